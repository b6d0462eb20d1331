#include "momug/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "momug/checkpoint.hpp"
#include "momug/embedder.hpp"
#include "momug/error.hpp"
#include "momug/sampling.hpp"
#include "momug/training.hpp"

namespace momug {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path, const char* what) {
  require(!path.empty(), ErrorCode::invalid_argument, std::string("missing ") + what + " path");
  require(fs::is_regular_file(path), ErrorCode::io_error, std::string(what) + " not found: " + path);
}

void require_writable(const std::string& path, const char* what) {
  require(!path.empty(), ErrorCode::invalid_argument, std::string("missing ") + what + " path");
  const fs::path parent = fs::path(path).parent_path();
  require(parent.empty() || fs::is_directory(parent), ErrorCode::io_error,
          std::string(what) + " directory does not exist: " + parent.string());
  require(!fs::is_directory(path), ErrorCode::io_error, std::string(what) + " is a directory: " + path);
}

ModelConfig model_config_for(const RunConfig& run, const Corpus& corpus) {
  ModelConfig m = run.model;
  m.vocab_size = corpus.vocab.size();
  m.d_motion = corpus.d_motion;
  m.validate();
  return m;
}

json lineage(const RunConfig& run, const Corpus& corpus, const std::string& stage) {
  return {{"stage", stage},
          {"root_seed", run.seed},
          {"corpus_seed", corpus.seed},
          {"init_seed", derive_seed(run.seed, "init")},
          {"pretrain_seed", run.pretrain.seed},
          {"train_seed", run.train.seed},
          {"config", to_json(run)}};
}

json report_json(const RPrecision& r) {
  return {{"top1", r.top1}, {"top2", r.top2}, {"top3", r.top3}, {"n", r.n}};
}

json step_json(const StepReport& r) {
  return {{"step", r.step},
          {"mode_mix", {{"t2m", r.n_t2m}, {"m2t", r.n_m2t}}},
          {"lm_loss", r.lm_loss},
          {"ddpm_loss", r.ddpm_loss},
          {"total", r.total},
          {"lr", r.lr}};
}

void check_compatible(const Vocabulary& a, const Vocabulary& b, const std::string& what) {
  require(a == b, ErrorCode::state_mismatch, what + ": vocabularies differ");
}

std::vector<int> caption_ids(const std::string& text, const Vocabulary& vocab) {
  require(!text.empty(), ErrorCode::invalid_argument, "caption must not be empty");
  return tokenize(text, vocab);
}

Mat<double> normalize_frames(const Mat<double>& raw, const CorpusStats& stats) {
  require(raw.cols() == stats.feature_dim(), ErrorCode::shape_mismatch,
          "motion has " + std::to_string(raw.cols()) + " features, checkpoint expects " +
              std::to_string(stats.feature_dim()));
  return apply_normalization(MotionSequence{raw}, stats).frames;
}

Mat<double> denormalize_frames(const Mat<double>& x, const CorpusStats& stats) {
  return denormalize(MotionSequence{x}, stats).frames;
}

void progress(bool quiet, const std::string& line) {
  if (!quiet) std::cerr << line << '\n';
}

}  // namespace

json to_json(const MetricReport& r) {
  return {{"motion",
           {{"fid", r.fid},
            {"fid_noise", r.fid_noise},
            {"r_precision_real", report_json(r.r_precision_real)},
            {"r_precision", report_json(r.r_precision_gen)},
            {"mm_dist_real", r.mm_dist_real},
            {"mm_dist", r.mm_dist_gen},
            {"diversity_real", r.diversity_real},
            {"diversity", r.diversity_gen},
            {"diversity_gap", r.diversity_gap},
            {"multimodality", r.multimodality},
            {"n_motion", r.n_motion},
            {"n_multimodality_captions", r.n_multimodality_captions},
            {"multimodality_repeats", r.multimodality_repeats},
            {"diversity_pairs", r.diversity_pairs}}},
          {"caption",
           {{"bleu1", r.bleu1},
            {"bleu4", r.bleu4},
            {"rouge_l", r.rouge_l},
            {"cider", r.cider},
            {"n_captions", r.n_captions},
            {"n_truncated", r.n_truncated}}}};
}

std::string csv_path_for(const std::string& jsonl_path) {
  fs::path p(jsonl_path);
  if (p.extension() == ".jsonl") return p.replace_extension(".csv").string();
  return jsonl_path + ".csv";
}

void write_motion_csv(const Mat<double>& frames, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::io_error, "cannot open for writing: " + path);
  out << "frame";
  for (Eigen::Index c = 0; c < frames.cols(); ++c) out << ",f" << c;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < frames.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < frames.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", frames(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
  require(out.good(), ErrorCode::io_error, "write failed: " + path);
}

void write_motion_outputs(const std::vector<MotionRecord>& motions, const std::string& jsonl_path,
                          const json& extra) {
  std::ofstream out(jsonl_path, std::ios::trunc);
  require(out.good(), ErrorCode::io_error, "cannot open for writing: " + jsonl_path);
  for (std::size_t i = 0; i < motions.size(); ++i) {
    const Mat<double>& f = motions[i].frames;
    json rec{{"type", "motion"},
             {"id", i},
             {"caption", motions[i].caption},
             {"n_frames", f.rows()},
             {"d_motion", f.cols()},
             {"frames", std::vector<double>(f.data(), f.data() + f.size())}};
    for (const auto& [k, v] : extra.items()) rec[k] = v;
    out << rec.dump() << '\n';
  }
  require(out.good(), ErrorCode::io_error, "write failed: " + jsonl_path);
  // A single motion gets a plain CSV; several get one CSV each with an index suffix.
  if (motions.size() == 1) {
    write_motion_csv(motions[0].frames, csv_path_for(jsonl_path));
  } else {
    const std::string base = csv_path_for(jsonl_path);
    const fs::path p(base);
    for (std::size_t i = 0; i < motions.size(); ++i) {
      fs::path q = p;
      q.replace_filename(p.stem().string() + "_" + std::to_string(i) + ".csv");
      write_motion_csv(motions[i].frames, q.string());
    }
  }
}

std::vector<MotionRecord> read_motion_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io_error, "cannot open motion file: " + path);
  std::vector<MotionRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no) + ": ";
    try {
      const json rec = json::parse(line);
      const std::string type = rec.at("type").get<std::string>();
      if (type == "stats") continue;
      require(type == "pair" || type == "motion", ErrorCode::parse_error, where + "unknown record type " + type);
      const int n = rec.at("n_frames").get<int>();
      const int d = rec.at("d_motion").get<int>();
      const auto values = rec.at("frames").get<std::vector<double>>();
      require(n >= 1 && d >= 1 && values.size() == static_cast<std::size_t>(n) * d, ErrorCode::parse_error,
              where + "frames do not match n_frames x d_motion");
      MotionRecord m;
      m.caption = rec.value("caption", "");
      m.frames = Eigen::Map<const Mat<double>>(values.data(), n, d);
      out.push_back(std::move(m));
    } catch (const json::exception& e) {
      fail(ErrorCode::parse_error, where + e.what());
    }
  }
  require(!out.empty(), ErrorCode::parse_error, "motion file has no motion records: " + path);
  return out;
}

json run_gen_corpus(const GenCorpusOptions& o) {
  require(o.count >= 2, ErrorCode::invalid_argument, "--count must be >= 2");
  require(o.d_motion >= kMinMotionDim, ErrorCode::invalid_argument,
          "--dim must be >= " + std::to_string(kMinMotionDim));
  require_writable(o.out, "corpus output");
  const Corpus c = build_corpus(o.seed, o.count, o.d_motion);
  save_corpus(c, o.out);
  return {{"command", "gen-corpus"}, {"pairs", c.pairs.size()}, {"vocab_size", c.vocab.size()}, {"out", o.out}};
}

json run_pretrain_base(const PretrainOptions& o) {
  require_file(o.corpus, "corpus");
  require_writable(o.out, "checkpoint output");
  const RunConfig& run = o.config;
  run.validate();
  const Corpus corpus = load_corpus(o.corpus);
  const auto train = corpus_split(corpus, Split::train);
  const ModelConfig mc = model_config_for(run, corpus);

  const std::uint64_t init_seed = derive_seed(run.seed, "init");
  ModelCheckpoint ckpt;
  ckpt.tag = "base";
  ckpt.state = init_state<float>(mc, init_seed);
  int last_step = -1;
  double last_lm = 0.0;
  ckpt.state.base = pretrain_base(mc, train, run.pretrain, init_seed, [&](const StepReport& r) {
    last_step = r.step;
    last_lm = r.lm_loss;
    if (r.step % 50 == 0) progress(o.quiet, "pretrain step " + std::to_string(r.step) + " lm " + std::to_string(r.lm_loss));
    return true;
  });
  ckpt.schedule = cosine_schedule(mc.diffusion_steps);
  ckpt.vocab = corpus.vocab;
  ckpt.stats = corpus.stats;
  ckpt.lineage = lineage(run, corpus, "pretrain-base");
  save_model_checkpoint(ckpt, o.out);
  return {{"command", "pretrain-base"}, {"steps", last_step + 1}, {"final_lm_loss", last_lm}, {"out", o.out}};
}

json run_train(const TrainOptions& o) {
  require_file(o.corpus, "corpus");
  require_file(o.base, "base checkpoint");
  require(!o.out_dir.empty(), ErrorCode::invalid_argument, "missing --out-dir");
  require(!fs::exists(o.out_dir) || fs::is_directory(o.out_dir), ErrorCode::io_error,
          "--out-dir exists and is not a directory: " + o.out_dir);
  const RunConfig& run = o.config;
  run.validate();
  const Corpus corpus = load_corpus(o.corpus);
  const ModelCheckpoint base = load_model_checkpoint(o.base);
  require(base.tag == "base", ErrorCode::state_mismatch, o.base + " is tagged '" + base.tag + "', expected 'base'");
  check_compatible(base.vocab, corpus.vocab, "base checkpoint vs corpus");
  require(base.state.config.d_motion == corpus.d_motion, ErrorCode::state_mismatch,
          "base checkpoint d_motion differs from the corpus");

  // Architecture comes from the base; the adapter hyperparameters from the run config.
  ModelConfig mc = base.state.config;
  mc.lora_rank = run.model.lora_rank;
  mc.lora_alpha = run.model.lora_alpha;
  mc.lora_dropout = run.model.lora_dropout;
  mc.max_seq_len = run.model.max_seq_len;
  mc.validate();
  ModelState<float> state;
  state.config = mc;
  state.base = base.state.base;
  state.adapters = init_adapters<float>(mc, derive_seed(run.seed, "init.adapters"));

  const auto pairs = normalized_pairs(corpus_split(corpus, Split::train), corpus.stats);
  const int total_steps = run.train.epochs * steps_per_epoch(pairs.size(), run.train.batch_size);

  fs::create_directories(o.out_dir);
  const std::string log_path = (fs::path(o.out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, std::ios::trunc);
  require(log.good(), ErrorCode::io_error, "cannot open for writing: " + log_path);

  ModelCheckpoint out;
  out.tag = "finetuned";
  out.schedule = base.schedule;
  out.vocab = corpus.vocab;
  out.stats = corpus.stats;
  out.lineage = lineage(run, corpus, "train");
  out.lineage["base_lineage"] = base.lineage;

  std::vector<std::string> written;
  TrainCallbacks cb;
  cb.on_step = [&](const StepReport& r) {
    log << step_json(r).dump() << '\n';
    if (r.step % 50 == 0)
      progress(o.quiet, "train step " + std::to_string(r.step) + "/" + std::to_string(total_steps) + " lm " +
                            std::to_string(r.lm_loss) + " ddpm " + std::to_string(r.ddpm_loss));
    return true;
  };
  cb.on_checkpoint = [&](int step, const ModelState<float>& s) {
    if (step >= total_steps) return;  // the final state is written below
    char name[32];
    std::snprintf(name, sizeof name, "step_%06d.ckpt", step);
    out.state = s;
    const std::string p = (fs::path(o.out_dir) / name).string();
    save_model_checkpoint(out, p);
    written.push_back(p);
  };
  const auto reports = train_loop(state, pairs, run.train, base.schedule, corpus.vocab, cb);
  require(log.good(), ErrorCode::io_error, "write failed: " + log_path);

  out.state = state;
  const std::string final_path = (fs::path(o.out_dir) / "final.ckpt").string();
  save_model_checkpoint(out, final_path);
  written.push_back(final_path);
  json summary{{"command", "train"}, {"steps", reports.size()}, {"log", log_path}, {"checkpoints", written}};
  if (!reports.empty()) summary["last"] = step_json(reports.back());
  return summary;
}

json run_sample(const SampleOptions& o) {
  require_file(o.ckpt, "checkpoint");
  require_writable(o.out, "sample output");
  const SampleConfig& cfg = o.config.sample;
  cfg.validate();
  const ModelCheckpoint ckpt = load_model_checkpoint(o.ckpt);
  const auto ids = caption_ids(o.caption, ckpt.vocab);
  const int length = resolve_motion_length(cfg, ckpt.stats);
  const Mat<double> x = sample_motion(ids, length, ckpt.state, ckpt.schedule, ckpt.vocab, cfg);
  write_motion_outputs({{detokenize(ids, ckpt.vocab), denormalize_frames(x, ckpt.stats)}}, o.out,
                       {{"cfg_scale", cfg.cfg_scale}, {"seed", cfg.seed}});
  return {{"command", "sample"}, {"n_frames", length}, {"out", o.out}, {"csv", csv_path_for(o.out)}};
}

json run_caption(const CaptionOptions& o) {
  require_file(o.ckpt, "checkpoint");
  require_file(o.motion_file, "motion file");
  require_writable(o.out, "caption output");
  const SampleConfig& cfg = o.config.sample;
  cfg.validate();
  const ModelCheckpoint ckpt = load_model_checkpoint(o.ckpt);
  const auto motions = read_motion_records(o.motion_file);
  std::vector<Mat<double>> normalized;
  for (const auto& m : motions) normalized.push_back(normalize_frames(m.frames, ckpt.stats));

  std::vector<json> records;
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    SampleConfig c = cfg;
    c.seed = derive_seed(cfg.seed, "caption", i);
    const TextSample t = sample_text(normalized[i], ckpt.state, ckpt.schedule, ckpt.vocab, c);
    records.push_back({{"type", "caption"},
                       {"id", i},
                       {"caption", t.text},
                       {"token_ids", t.token_ids},
                       {"truncated", t.truncated},
                       {"decode", decode_kind_name(cfg.decode.kind)}});
  }
  std::ofstream out(o.out, std::ios::trunc);
  require(out.good(), ErrorCode::io_error, "cannot open for writing: " + o.out);
  for (const auto& r : records) out << r.dump() << '\n';
  require(out.good(), ErrorCode::io_error, "write failed: " + o.out);
  return {{"command", "caption"}, {"captions", records.size()}, {"out", o.out}};
}

json run_inpaint(const InpaintOptions& o) {
  require_file(o.ckpt, "checkpoint");
  require_file(o.motion_file, "motion file");
  require_writable(o.out, "inpaint output");
  const SampleConfig& cfg = o.config.sample;
  cfg.validate();
  const ModelCheckpoint ckpt = load_model_checkpoint(o.ckpt);
  const auto motions = read_motion_records(o.motion_file);
  require(o.index >= 0 && o.index < static_cast<int>(motions.size()), ErrorCode::out_of_range,
          "--index " + std::to_string(o.index) + " is outside the motion file");
  const Mat<double> x0 = normalize_frames(motions[static_cast<std::size_t>(o.index)].frames, ckpt.stats);
  const auto known = parse_mask(o.mask, static_cast<int>(x0.rows()));
  const auto ids = caption_ids(o.caption, ckpt.vocab);
  const Mat<double> x = inpaint_motion(x0, known, ids, ckpt.state, ckpt.schedule, ckpt.vocab, cfg);
  std::vector<int> mask_bits(known.begin(), known.end());
  write_motion_outputs({{detokenize(ids, ckpt.vocab), denormalize_frames(x, ckpt.stats)}}, o.out,
                       {{"cfg_scale", cfg.cfg_scale}, {"seed", cfg.seed}, {"known_mask", mask_bits}});
  return {{"command", "inpaint"}, {"n_frames", x.rows()}, {"out", o.out}, {"csv", csv_path_for(o.out)}};
}

json run_train_embedder(const TrainEmbedderOptions& o) {
  require_file(o.corpus, "corpus");
  require_writable(o.out, "embedder output");
  const RunConfig& run = o.config;
  run.validate();
  const Corpus corpus = load_corpus(o.corpus);
  const auto pairs = normalized_pairs(corpus_split(corpus, Split::train), corpus.stats);
  EmbedderConfig ec = run.embedder;
  ec.vocab_size = corpus.vocab.size();
  ec.d_motion = corpus.d_motion;
  EmbedderTrainReport report;
  EmbedderCheckpoint ckpt;
  ckpt.embedder = train_embedder(pairs, ec, run.embedder_train, &report, [&](int epoch, double loss, double top1) {
    progress(o.quiet, "embedder epoch " + std::to_string(epoch) + " loss " + std::to_string(loss) + " val top1 " +
                          std::to_string(top1));
  });
  ckpt.vocab = corpus.vocab;
  ckpt.stats = corpus.stats;
  ckpt.lineage = {{"root_seed", run.seed}, {"embedder_seed", run.embedder_train.seed}, {"corpus_seed", corpus.seed}};
  save_embedder_checkpoint(ckpt, o.out);
  return {{"command", "train-embedder"},
          {"epochs", report.epochs},
          {"final_loss", report.final_loss},
          {"val_top1", report.val_top1},
          {"val_pairs", report.val_pairs},
          {"reached_target", report.reached_target},
          {"out", o.out}};
}

json run_eval(const EvalOptions& o) {
  require_file(o.ckpt, "checkpoint");
  require_file(o.embedder, "embedder");
  require_file(o.corpus, "corpus");
  require_writable(o.out, "report output");
  const RunConfig& run = o.config;
  run.validate();
  const Split split = parse_split(o.split);
  const ModelCheckpoint ckpt = load_model_checkpoint(o.ckpt);
  const EmbedderCheckpoint emb = load_embedder_checkpoint(o.embedder);
  const Corpus corpus = load_corpus(o.corpus);
  check_compatible(ckpt.vocab, corpus.vocab, "checkpoint vs corpus");
  check_compatible(emb.vocab, corpus.vocab, "embedder vs corpus");
  require(ckpt.stats.mean == corpus.stats.mean && ckpt.stats.std == corpus.stats.std, ErrorCode::state_mismatch,
          "checkpoint was trained with different normalization statistics than the corpus");

  EvalConfig ec = run.eval;
  ec.sample = run.sample;
  const auto pairs = normalized_pairs(corpus_split(corpus, split), corpus.stats);
  const MetricReport r = evaluate(ckpt.state, ckpt.schedule, ckpt.vocab, pairs, emb.embedder, ec);

  json report = to_json(r);
  report["split"] = o.split;
  report["n_pairs"] = pairs.size();
  report["checkpoint_tag"] = ckpt.tag;
  report["sample"] = to_json(run.sample);
  report["eval"] = to_json(run)["eval"];
  std::ofstream out(o.out, std::ios::trunc);
  require(out.good(), ErrorCode::io_error, "cannot open for writing: " + o.out);
  out << report.dump(2) << '\n';
  require(out.good(), ErrorCode::io_error, "write failed: " + o.out);
  return {{"command", "eval"}, {"out", o.out}, {"report", report}};
}

}  // namespace momug
