#include "cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "momug/config.hpp"
#include "momug/error.hpp"
#include "momug/pipeline.hpp"

namespace momug {

using nlohmann::json;

namespace {

// Config file, then --set overrides, then dedicated flags; later wins.
struct ConfigSource {
  std::string path;
  std::vector<std::string> sets;
  json flags = json::object();

  void flag(const std::string& dotted, json value) { assign(flags, dotted, std::move(value)); }

  static void assign(json& root, const std::string& dotted, json value) {
    json* node = &root;
    std::size_t start = 0;
    for (std::size_t dot; (dot = dotted.find('.', start)) != std::string::npos; start = dot + 1) {
      json& child = (*node)[dotted.substr(start, dot - start)];
      if (!child.is_object()) child = json::object();
      node = &child;
    }
    (*node)[dotted.substr(start)] = std::move(value);
  }

  RunConfig resolve() const {
    json j = json::object();
    if (!path.empty()) {
      std::ifstream in(path);
      require(in.good(), ErrorCode::io_error, "cannot open config file " + path);
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        fail(ErrorCode::parse_error, "config " + path + ": " + e.what());
      }
      require(j.is_object(), ErrorCode::config_error, "config " + path + " must hold a JSON object");
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      require(eq != std::string::npos && eq > 0, ErrorCode::config_error, "--set expects key.path=value, got " + s);
      const std::string value = s.substr(eq + 1);
      // Values parse as JSON when they can, so numbers and booleans keep their types.
      json v = json::parse(value, nullptr, false);
      if (v.is_discarded()) v = value;
      assign(j, s.substr(0, eq), v);
    }
    j.merge_patch(flags);
    return run_config_from_json(j);
  }
};

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("--config", src.path, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.sets, "Override a config key, e.g. --set train.epochs=2")->take_all();
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t nl; (nl = s.find('\n', start)) != std::string::npos; start = nl + 1)
    out.push_back(s.substr(start, nl - start));
  out.push_back(s.substr(start));
  return out;
}

void print_error(std::ostream& err, std::string_view code, const std::string& message) {
  const auto lines = split_lines(message);
  json j{{"error", code}, {"message", lines.front()}};
  if (lines.size() > 1) {
    j["message"] = std::to_string(lines.size()) + " problems";
    j["details"] = lines;
  }
  err << j.dump() << std::endl;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unified motion/text diffusion model toolkit", "momug"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "Suppress progress lines on stderr");
  app.fallthrough();  // subcommands accept --quiet too

  json summary;
  std::function<json()> action;

  // gen-corpus
  GenCorpusOptions gen;
  auto* c_gen = app.add_subcommand("gen-corpus", "Generate the synthetic paired corpus");
  c_gen->add_option("--seed", gen.seed, "Corpus seed")->required();
  c_gen->add_option("--count", gen.count, "Number of pairs")->required();
  c_gen->add_option("--dim", gen.d_motion, "Motion feature dimension")->default_val(8);
  c_gen->add_option("--out", gen.out, "Output corpus JSONL")->required();
  c_gen->callback([&] { action = [&] { return run_gen_corpus(gen); }; });

  // pretrain-base
  PretrainOptions pre;
  ConfigSource pre_cfg;
  std::optional<std::uint64_t> pre_seed;
  std::optional<int> pre_epochs;
  auto* c_pre = app.add_subcommand("pretrain-base", "Pretrain the base language model on captions");
  c_pre->add_option("--corpus", pre.corpus, "Corpus JSONL")->required();
  c_pre->add_option("--out", pre.out, "Base checkpoint path")->required();
  c_pre->add_option("--seed", pre_seed, "Root seed");
  c_pre->add_option("--epochs", pre_epochs, "Pretraining epochs");
  add_config_options(c_pre, pre_cfg);
  c_pre->callback([&] {
    action = [&] {
      if (pre_seed) pre_cfg.flag("seed", *pre_seed);
      if (pre_epochs) pre_cfg.flag("pretrain.epochs", *pre_epochs);
      pre.config = pre_cfg.resolve();
      pre.quiet = quiet;
      return run_pretrain_base(pre);
    };
  });

  // train
  TrainOptions tr;
  ConfigSource tr_cfg;
  std::optional<std::uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  std::optional<double> tr_lr;
  std::optional<std::string> tr_ratio;
  auto* c_tr = app.add_subcommand("train", "Unified adapter training over both tasks");
  c_tr->add_option("--corpus", tr.corpus, "Corpus JSONL")->required();
  c_tr->add_option("--base", tr.base, "Base checkpoint from pretrain-base")->required();
  c_tr->add_option("--out-dir", tr.out_dir, "Directory for the log and checkpoints")->required();
  c_tr->add_option("--seed", tr_seed, "Root seed");
  c_tr->add_option("--epochs", tr_epochs, "Training epochs");
  c_tr->add_option("--lr", tr_lr, "Peak learning rate");
  c_tr->add_option("--ratio", tr_ratio, "Task mix t2m:m2t, e.g. 6:4");
  add_config_options(c_tr, tr_cfg);
  c_tr->callback([&] {
    action = [&] {
      if (tr_seed) tr_cfg.flag("seed", *tr_seed);
      if (tr_epochs) tr_cfg.flag("train.epochs", *tr_epochs);
      if (tr_lr) tr_cfg.flag("train.lr", *tr_lr);
      if (tr_ratio) {
        int a = 0, b = 0;
        char colon = 0, extra = 0;
        std::istringstream is(*tr_ratio);
        require(static_cast<bool>(is >> a >> colon >> b) && colon == ':' && !(is >> extra), ErrorCode::config_error,
                "--ratio expects A:B, got " + *tr_ratio);
        tr_cfg.flag("train.ratio_t2m", a);
        tr_cfg.flag("train.ratio_m2t", b);
      }
      tr.config = tr_cfg.resolve();
      tr.quiet = quiet;
      return run_train(tr);
    };
  });

  // sample
  SampleOptions sm;
  ConfigSource sm_cfg;
  std::optional<int> sm_length;
  std::optional<double> sm_scale;
  std::optional<std::uint64_t> sm_seed;
  bool sm_cond = false, sm_uncond = false;
  auto* c_sm = app.add_subcommand("sample", "Generate a motion from a caption");
  c_sm->add_option("--ckpt", sm.ckpt, "Trained checkpoint")->required();
  c_sm->add_option("--caption", sm.caption, "Caption text")->required();
  c_sm->add_option("--length", sm_length, "Frames; 0 or absent draws from the corpus lengths");
  c_sm->add_option("--cfg-scale", sm_scale, "Guidance scale");
  c_sm->add_option("--seed", sm_seed, "Sampling seed");
  c_sm->add_option("--out", sm.out, "Output JSONL (CSV written alongside)")->required();
  auto* f_cond = c_sm->add_flag("--conditional-only", sm_cond, "Debug: skip the unconditional branch");
  c_sm->add_flag("--unconditional-only", sm_uncond, "Debug: skip the conditional branch")->excludes(f_cond);
  add_config_options(c_sm, sm_cfg);
  c_sm->callback([&] {
    action = [&] {
      if (sm_length) sm_cfg.flag("sample.motion_length", *sm_length);
      if (sm_scale) sm_cfg.flag("sample.cfg_scale", *sm_scale);
      if (sm_seed) sm_cfg.flag("sample.seed", *sm_seed);
      if (sm_cond) sm_cfg.flag("sample.guidance", "conditional_only");
      if (sm_uncond) sm_cfg.flag("sample.guidance", "unconditional_only");
      sm.config = sm_cfg.resolve();
      return run_sample(sm);
    };
  });

  // caption
  CaptionOptions cp;
  ConfigSource cp_cfg;
  std::optional<std::string> cp_decode;
  std::optional<double> cp_temp;
  std::optional<int> cp_topk, cp_maxlen;
  std::optional<std::uint64_t> cp_seed;
  auto* c_cp = app.add_subcommand("caption", "Describe motions with text");
  c_cp->add_option("--ckpt", cp.ckpt, "Trained checkpoint")->required();
  c_cp->add_option("--motion-file", cp.motion_file, "Motion JSONL (corpus or sample output)")->required();
  c_cp->add_option("--decode", cp_decode, "greedy | temp | topk");
  c_cp->add_option("--temperature", cp_temp, "Softmax temperature for temp/topk");
  c_cp->add_option("--top-k", cp_topk, "k for topk decoding");
  c_cp->add_option("--max-len", cp_maxlen, "Maximum caption tokens");
  c_cp->add_option("--seed", cp_seed, "Decoding seed");
  c_cp->add_option("--out", cp.out, "Output JSONL")->required();
  add_config_options(c_cp, cp_cfg);
  c_cp->callback([&] {
    action = [&] {
      if (cp_decode) cp_cfg.flag("sample.decode", *cp_decode);
      if (cp_temp) cp_cfg.flag("sample.temperature", *cp_temp);
      if (cp_topk) cp_cfg.flag("sample.top_k", *cp_topk);
      if (cp_maxlen) cp_cfg.flag("sample.max_text_len", *cp_maxlen);
      if (cp_seed) cp_cfg.flag("sample.seed", *cp_seed);
      cp.config = cp_cfg.resolve();
      return run_caption(cp);
    };
  });

  // inpaint
  InpaintOptions ip;
  ConfigSource ip_cfg;
  std::optional<double> ip_scale;
  std::optional<std::uint64_t> ip_seed;
  auto* c_ip = app.add_subcommand("inpaint", "Regenerate the unmasked frames of a motion");
  c_ip->add_option("--ckpt", ip.ckpt, "Trained checkpoint")->required();
  c_ip->add_option("--motion-file", ip.motion_file, "Motion JSONL")->required();
  c_ip->add_option("--index", ip.index, "Record index in the motion file")->default_val(0);
  c_ip->add_option("--mask", ip.mask, "Known frames: prefix:K | suffix:K | frames:a-b")->required();
  c_ip->add_option("--caption", ip.caption, "Caption text")->required();
  c_ip->add_option("--cfg-scale", ip_scale, "Guidance scale");
  c_ip->add_option("--seed", ip_seed, "Sampling seed");
  c_ip->add_option("--out", ip.out, "Output JSONL (CSV written alongside)")->required();
  add_config_options(c_ip, ip_cfg);
  c_ip->callback([&] {
    action = [&] {
      if (ip_scale) ip_cfg.flag("sample.cfg_scale", *ip_scale);
      if (ip_seed) ip_cfg.flag("sample.seed", *ip_seed);
      ip.config = ip_cfg.resolve();
      return run_inpaint(ip);
    };
  });

  // train-embedder
  TrainEmbedderOptions te;
  ConfigSource te_cfg;
  std::optional<std::uint64_t> te_seed;
  auto* c_te = app.add_subcommand("train-embedder", "Train the evaluation embedder");
  c_te->add_option("--corpus", te.corpus, "Corpus JSONL")->required();
  c_te->add_option("--out", te.out, "Embedder checkpoint path")->required();
  c_te->add_option("--seed", te_seed, "Root seed");
  add_config_options(c_te, te_cfg);
  c_te->callback([&] {
    action = [&] {
      if (te_seed) te_cfg.flag("seed", *te_seed);
      te.config = te_cfg.resolve();
      te.quiet = quiet;
      return run_train_embedder(te);
    };
  });

  // eval
  EvalOptions ev;
  ConfigSource ev_cfg;
  std::optional<std::uint64_t> ev_seed;
  std::optional<int> ev_max;
  auto* c_ev = app.add_subcommand("eval", "Compute the motion and caption metrics");
  c_ev->add_option("--ckpt", ev.ckpt, "Trained checkpoint")->required();
  c_ev->add_option("--embedder", ev.embedder, "Embedder checkpoint")->required();
  c_ev->add_option("--corpus", ev.corpus, "Corpus JSONL")->required();
  c_ev->add_option("--split", ev.split, "train | test | all")->default_val("test");
  c_ev->add_option("--seed", ev_seed, "Evaluation seed");
  c_ev->add_option("--max-examples", ev_max, "Cap on evaluated pairs (0 = all)");
  c_ev->add_option("--out", ev.out, "Report JSON")->required();
  add_config_options(c_ev, ev_cfg);
  c_ev->callback([&] {
    action = [&] {
      if (ev_seed) ev_cfg.flag("sample.seed", *ev_seed);
      if (ev_max) ev_cfg.flag("eval.max_examples", *ev_max);
      ev.config = ev_cfg.resolve();
      return run_eval(ev);
    };
  });

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);  // --help and friends
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage_error", e.what());
    return 2;
  }

  try {
    summary = action();
  } catch (const Error& e) {
    print_error(err, error_code_name(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error(err, "internal_error", e.what());
    return 1;
  }
  out << summary.dump() << std::endl;
  return 0;
}

}  // namespace momug
