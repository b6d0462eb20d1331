#include "momug/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "momug/error.hpp"

namespace momug {

using nlohmann::json;

namespace {

// Collects schema problems as "path: message" instead of stopping at the first.
class Reader {
 public:
  using Setter = std::function<void(const json&, const std::string&)>;

  void object(const json& j, const std::string& path, const std::map<std::string, Setter>& fields) {
    if (!j.is_object()) {
      problem(path, "expected an object");
      return;
    }
    for (const auto& [key, value] : j.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      const auto it = fields.find(key);
      if (it == fields.end())
        problem(sub, "unknown key");
      else
        it->second(value, sub);
    }
  }

  Setter real(double& out) {
    return [this, &out](const json& v, const std::string& p) {
      if (v.is_number())
        out = v.get<double>();
      else
        problem(p, "expected a number");
    };
  }
  Setter integer(int& out) {
    return [this, &out](const json& v, const std::string& p) {
      if (v.is_number_integer() && v.get<long long>() >= INT32_MIN && v.get<long long>() <= INT32_MAX)
        out = v.get<int>();
      else
        problem(p, "expected an integer");
    };
  }
  Setter seed(std::uint64_t& out, bool* seen = nullptr) {
    return [this, &out, seen](const json& v, const std::string& p) {
      if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)) {
        out = v.get<std::uint64_t>();
        if (seen) *seen = true;
      } else {
        problem(p, "expected a non-negative integer");
      }
    };
  }
  Setter boolean(bool& out) {
    return [this, &out](const json& v, const std::string& p) {
      if (v.is_boolean())
        out = v.get<bool>();
      else
        problem(p, "expected a boolean");
    };
  }
  Setter decode(DecodeKind& out) {
    return [this, &out](const json& v, const std::string& p) {
      if (!v.is_string()) return problem(p, "expected a string");
      try {
        out = parse_decode_kind(v.get<std::string>());
      } catch (const Error& e) {
        problem(p, e.what());
      }
    };
  }
  Setter guidance(Guidance& out) {
    return [this, &out](const json& v, const std::string& p) {
      const std::string s = v.is_string() ? v.get<std::string>() : "";
      if (s == "guided")
        out = Guidance::guided;
      else if (s == "conditional_only")
        out = Guidance::conditional_only;
      else if (s == "unconditional_only")
        out = Guidance::unconditional_only;
      else
        problem(p, "expected one of guided, conditional_only, unconditional_only");
    };
  }

  void problem(const std::string& path, const std::string& message) { problems.push_back(path + ": " + message); }

  std::vector<std::string> problems;
};

std::map<std::string, Reader::Setter> model_fields(Reader& r, ModelConfig& c) {
  return {
      {"d_model", r.integer(c.d_model)},
      {"n_layers", r.integer(c.n_layers)},
      {"n_heads", r.integer(c.n_heads)},
      {"d_ff", r.integer(c.d_ff)},
      {"max_seq_len", r.integer(c.max_seq_len)},
      {"diffusion_steps", r.integer(c.diffusion_steps)},
      {"lora_rank", r.integer(c.lora_rank)},
      {"lora_alpha", r.real(c.lora_alpha)},
      {"lora_dropout", r.real(c.lora_dropout)},
  };
}

std::map<std::string, Reader::Setter> train_fields(Reader& r, TrainConfig& c, bool* seed_seen) {
  return {
      {"lambda", r.real(c.lambda)},
      {"lr", r.real(c.lr)},
      {"beta1", r.real(c.beta1)},
      {"beta2", r.real(c.beta2)},
      {"adam_eps", r.real(c.adam_eps)},
      {"weight_decay", r.real(c.weight_decay)},
      {"batch_size", r.integer(c.batch_size)},
      {"epochs", r.integer(c.epochs)},
      {"warmup_frac", r.real(c.warmup_frac)},
      {"grad_clip", r.real(c.grad_clip)},
      {"cfg_drop_prob", r.real(c.cfg_drop_prob)},
      {"ratio_t2m", r.integer(c.ratio_t2m)},
      {"ratio_m2t", r.integer(c.ratio_m2t)},
      {"seed", r.seed(c.seed, seed_seen)},
      {"t2m_text_loss", r.boolean(c.t2m_text_loss)},
      {"checkpoint_every", r.integer(c.checkpoint_every)},
  };
}

std::map<std::string, Reader::Setter> sample_fields(Reader& r, SampleConfig& c, bool* seed_seen) {
  return {
      {"cfg_scale", r.real(c.cfg_scale)},
      {"motion_length", r.integer(c.motion_length)},
      {"max_text_len", r.integer(c.max_text_len)},
      {"decode", r.decode(c.decode.kind)},
      {"temperature", r.real(c.decode.temperature)},
      {"top_k", r.integer(c.decode.top_k)},
      {"seed", r.seed(c.seed, seed_seen)},
      {"guidance", r.guidance(c.guidance)},
  };
}

std::string guidance_name(Guidance g) {
  switch (g) {
    case Guidance::conditional_only: return "conditional_only";
    case Guidance::unconditional_only: return "unconditional_only";
    default: return "guided";
  }
}

// Config validators report "train.*"; the pretraining section reuses the type.
void validate_as(const TrainConfig& c, const std::string& section, std::vector<std::string>& problems) {
  try {
    c.validate();
  } catch (const Error& e) {
    std::string msg = e.what();
    if (msg.rfind("train.", 0) == 0) msg = section + msg.substr(5);
    problems.push_back(msg);
  }
}

template <typename F>
void collect(F&& f, std::vector<std::string>& problems) {
  try {
    f();
  } catch (const Error& e) {
    problems.push_back(e.what());
  }
}

void throw_problems(const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg;
  for (const auto& p : problems) msg += (msg.empty() ? "" : "\n") + p;
  fail(ErrorCode::config_error, msg);
}

}  // namespace

DecodeKind parse_decode_kind(const std::string& name) {
  if (name == "greedy") return DecodeKind::greedy;
  if (name == "temp" || name == "temperature") return DecodeKind::temperature;
  if (name == "topk" || name == "top_k") return DecodeKind::top_k;
  fail(ErrorCode::config_error, "unknown decode mode '" + name + "' (expected greedy, temp or topk)");
}

std::string decode_kind_name(DecodeKind kind) {
  switch (kind) {
    case DecodeKind::temperature: return "temp";
    case DecodeKind::top_k: return "topk";
    default: return "greedy";
  }
}

RunConfig default_run_config() {
  RunConfig c;
  // Base pretraining is desk-scale plumbing with no published values behind it.
  c.pretrain.lr = 1e-3;
  c.pretrain.weight_decay = 0.0;
  c.pretrain.batch_size = 32;
  c.pretrain.epochs = 20;
  c.pretrain.beta2 = 0.999;
  c.train.epochs = 1;
  c.seed = 0;
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  ModelConfig m = model;
  m.vocab_size = std::max(m.vocab_size, 1);  // filled from the corpus later
  collect([&] { m.validate(); }, problems);
  validate_as(pretrain, "pretrain", problems);
  validate_as(train, "train", problems);
  collect([&] { sample.validate(); }, problems);
  EmbedderConfig e = embedder;
  e.vocab_size = std::max(e.vocab_size, 1);
  collect([&] { e.validate(); }, problems);
  const auto& et = embedder_train;
  if (et.batch_size < 2) problems.push_back("embedder_train.batch_size must be >= 2");
  if (et.min_epochs < 0 || et.max_epochs < et.min_epochs)
    problems.push_back("embedder_train.max_epochs must be >= min_epochs >= 0");
  if (!(et.lr > 0.0)) problems.push_back("embedder_train.lr must be > 0");
  if (!(et.val_fraction > 0.0 && et.val_fraction < 1.0))
    problems.push_back("embedder_train.val_fraction must be in (0, 1)");
  if (eval.max_examples < 0) problems.push_back("eval.max_examples must be >= 0");
  if (eval.multimodality_captions < 0 || eval.multimodality_repeats < 0)
    problems.push_back("eval.multimodality_* must be >= 0");
  if (eval.diversity_pairs < 1) problems.push_back("eval.diversity_pairs must be >= 1");
  throw_problems(problems);
}

json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},   {"d_motion", c.d_motion},
          {"max_seq_len", c.max_seq_len}, {"diffusion_steps", c.diffusion_steps},
          {"lora_rank", c.lora_rank},     {"lora_alpha", c.lora_alpha},
          {"lora_dropout", c.lora_dropout}};
}

json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"warmup_frac", c.warmup_frac},
          {"grad_clip", c.grad_clip},
          {"cfg_drop_prob", c.cfg_drop_prob},
          {"ratio_t2m", c.ratio_t2m},
          {"ratio_m2t", c.ratio_m2t},
          {"seed", c.seed},
          {"t2m_text_loss", c.t2m_text_loss},
          {"checkpoint_every", c.checkpoint_every}};
}

json to_json(const SampleConfig& c) {
  return {{"cfg_scale", c.cfg_scale},
          {"motion_length", c.motion_length},
          {"max_text_len", c.max_text_len},
          {"decode", decode_kind_name(c.decode.kind)},
          {"temperature", c.decode.temperature},
          {"top_k", c.decode.top_k},
          {"seed", c.seed},
          {"guidance", guidance_name(c.guidance)}};
}

json to_json(const RunConfig& c) {
  json model = to_json(c.model);
  model.erase("vocab_size");
  model.erase("d_motion");
  const auto& e = c.embedder;
  const auto& et = c.embedder_train;
  return {{"seed", c.seed},
          {"model", model},
          {"pretrain", to_json(c.pretrain)},
          {"train", to_json(c.train)},
          {"sample", to_json(c.sample)},
          {"embedder", {{"d_emb", e.d_emb}, {"d_text", e.d_text}, {"hidden", e.hidden}, {"kernel", e.kernel}}},
          {"embedder_train",
           {{"batch_size", et.batch_size},
            {"min_epochs", et.min_epochs},
            {"max_epochs", et.max_epochs},
            {"lr", et.lr},
            {"target_top1", et.target_top1},
            {"val_fraction", et.val_fraction},
            {"seed", et.seed}}},
          {"eval",
           {{"motions", c.eval.motions},
            {"captions", c.eval.captions},
            {"max_examples", c.eval.max_examples},
            {"multimodality_captions", c.eval.multimodality_captions},
            {"multimodality_repeats", c.eval.multimodality_repeats},
            {"diversity_pairs", c.eval.diversity_pairs}}}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  Reader r;
  auto fields = model_fields(r, c);
  fields["vocab_size"] = r.integer(c.vocab_size);
  fields["d_motion"] = r.integer(c.d_motion);
  r.object(j, "model", fields);
  throw_problems(r.problems);
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  Reader r;
  bool pretrain_seed = false, train_seed = false, sample_seed = false, embedder_seed = false;
  auto& e = c.embedder;
  auto& et = c.embedder_train;
  const std::map<std::string, Reader::Setter> top = {
      {"seed", r.seed(c.seed)},
      {"model", [&](const json& v, const std::string& p) { r.object(v, p, model_fields(r, c.model)); }},
      {"pretrain",
       [&](const json& v, const std::string& p) { r.object(v, p, train_fields(r, c.pretrain, &pretrain_seed)); }},
      {"train", [&](const json& v, const std::string& p) { r.object(v, p, train_fields(r, c.train, &train_seed)); }},
      {"sample",
       [&](const json& v, const std::string& p) { r.object(v, p, sample_fields(r, c.sample, &sample_seed)); }},
      {"embedder",
       [&](const json& v, const std::string& p) {
         r.object(v, p,
                  {{"d_emb", r.integer(e.d_emb)},
                   {"d_text", r.integer(e.d_text)},
                   {"hidden", r.integer(e.hidden)},
                   {"kernel", r.integer(e.kernel)}});
       }},
      {"embedder_train",
       [&](const json& v, const std::string& p) {
         r.object(v, p,
                  {{"batch_size", r.integer(et.batch_size)},
                   {"min_epochs", r.integer(et.min_epochs)},
                   {"max_epochs", r.integer(et.max_epochs)},
                   {"lr", r.real(et.lr)},
                   {"target_top1", r.real(et.target_top1)},
                   {"val_fraction", r.real(et.val_fraction)},
                   {"seed", r.seed(et.seed, &embedder_seed)}});
       }},
      {"eval",
       [&](const json& v, const std::string& p) {
         r.object(v, p,
                  {{"motions", r.boolean(c.eval.motions)},
                   {"captions", r.boolean(c.eval.captions)},
                   {"max_examples", r.integer(c.eval.max_examples)},
                   {"multimodality_captions", r.integer(c.eval.multimodality_captions)},
                   {"multimodality_repeats", r.integer(c.eval.multimodality_repeats)},
                   {"diversity_pairs", r.integer(c.eval.diversity_pairs)}});
       }},
  };
  r.object(j, "", top);
  throw_problems(r.problems);

  // Seeds not pinned explicitly are split from the root.
  if (!pretrain_seed) c.pretrain.seed = derive_seed(c.seed, "pretrain");
  if (!train_seed) c.train.seed = derive_seed(c.seed, "train");
  if (!sample_seed) c.sample.seed = derive_seed(c.seed, "sample");
  if (!embedder_seed) c.embedder_train.seed = derive_seed(c.seed, "embedder");
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io_error, "cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::parse_error, "config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace momug
