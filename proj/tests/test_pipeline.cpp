#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "helpers.hpp"
#include "momug/checkpoint.hpp"
#include "momug/config.hpp"
#include "momug/error.hpp"
#include "momug/pipeline.hpp"

using namespace momug;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("momug_test_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "momug");
  args.push_back("--quiet");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Output of the adapted forward on a motion-to-text sequence, the path every decode takes.
Mat<float> probe_forward(const ModelState<float>& s, const Corpus& corpus, const NoiseSchedule& schedule) {
  const auto pairs = normalized_pairs({corpus.pairs[0]}, corpus.stats);
  const auto ex = build_example(pairs[0].caption.token_ids, pairs[0].motion, TaskMode::motion_to_text, 0, false,
                                corpus.vocab, s.config.max_seq_len);
  const auto emb = embed_mixed(ex.sequence, s, schedule);
  return forward(emb.hidden, s).output;
}

const std::vector<std::string> kTinyModel = {"--set", "model.d_model=16", "model.n_heads=2", "model.d_ff=32",
                                             "model.n_layers=1", "model.lora_rank=4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("run config lists every schema violation with its key path") {
  const json j = {{"train", {{"lr", "fast"}, {"epochs", 1.5}, {"bogus", 1}}},
                  {"model", {{"d_model", 30}, {"n_heads", 4}}},
                  {"sample", {{"decode", "beam"}}},
                  {"extra", 1}};
  try {
    run_config_from_json(j);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config_error);
    const std::string msg = e.what();
    CHECK(msg.find("train.lr: expected a number") != std::string::npos);
    CHECK(msg.find("train.epochs: expected an integer") != std::string::npos);
    CHECK(msg.find("train.bogus: unknown key") != std::string::npos);
    CHECK(msg.find("sample.decode:") != std::string::npos);
    CHECK(msg.find("extra: unknown key") != std::string::npos);
  }
  // Range violations surface after the types are fine.
  try {
    run_config_from_json({{"model", {{"d_model", 30}, {"n_heads", 4}}}, {"pretrain", {{"lr", -1.0}}}});
    FAIL("expected a config error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("model.d_model must be divisible by model.n_heads") != std::string::npos);
    CHECK(msg.find("pretrain.lr must be >= 0") != std::string::npos);
  }
}

TEST_CASE("run config defaults carry the unified-stage values and split seeds from the root") {
  const RunConfig c = run_config_from_json(json::object());
  CHECK(c.train.lr == 1e-4);
  CHECK(c.train.beta1 == 0.9);
  CHECK(c.train.beta2 == 0.95);
  CHECK(c.train.weight_decay == 1e-3);
  CHECK(c.train.batch_size == 64);
  CHECK(c.train.warmup_frac == 0.10);
  CHECK(c.train.lambda == 0.01);
  CHECK(c.train.cfg_drop_prob == 0.10);
  CHECK(c.train.ratio_t2m == 6);
  CHECK(c.train.ratio_m2t == 4);
  CHECK(c.model.lora_rank == 16);
  CHECK(c.model.lora_alpha == 32.0);
  CHECK(c.model.lora_dropout == 0.1);
  CHECK(c.model.diffusion_steps == 50);
  CHECK(c.sample.cfg_scale == 2.5);

  const RunConfig a = run_config_from_json({{"seed", 5}});
  const RunConfig b = run_config_from_json({{"seed", 6}});
  CHECK(a.train.seed == derive_seed(5, "train"));
  CHECK(a.train.seed != b.train.seed);
  CHECK(a.sample.seed != a.train.seed);
  const RunConfig pinned = run_config_from_json({{"seed", 5}, {"train", {{"seed", 42}}}});
  CHECK(pinned.train.seed == 42);

  // to_json round-trips.
  const RunConfig back = run_config_from_json(to_json(a));
  CHECK(to_json(back) == to_json(a));
}

TEST_CASE("checkpoint round trip is bitwise and refuses other versions") {
  TempDir dir("ckpt");
  const Corpus corpus = build_corpus(4, 6, 8);
  ModelCheckpoint ckpt;
  ckpt.tag = "finetuned";
  ckpt.state = init_state<float>(test::tiny_config(corpus.vocab.size()), 9);
  test::perturb_lora_b(ckpt.state, 2, 0.2);
  ckpt.schedule = cosine_schedule(50);
  ckpt.vocab = corpus.vocab;
  ckpt.stats = corpus.stats;
  ckpt.lineage = {{"root_seed", 1}};
  const std::string path = dir / "m.ckpt";
  save_model_checkpoint(ckpt, path);
  const ModelCheckpoint back = load_model_checkpoint(path);

  CHECK(back.tag == "finetuned");
  CHECK(back.vocab == ckpt.vocab);
  CHECK(back.stats.mean == ckpt.stats.mean);
  CHECK(back.stats.std == ckpt.stats.std);
  CHECK(back.stats.length_histogram == ckpt.stats.length_histogram);
  CHECK(back.schedule.beta == ckpt.schedule.beta);
  CHECK(back.schedule.alpha_bar == ckpt.schedule.alpha_bar);
  CHECK(back.lineage == ckpt.lineage);
  auto a = ckpt.state;
  auto b = back.state;
  auto ta = named_tensors(a.adapters), tb = named_tensors(b.adapters);
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK((ta[i].tensor->array() == tb[i].tensor->array()).all());
  CHECK(base_fingerprint(a.base) == base_fingerprint(b.base));
  const Mat<float> fa = probe_forward(a, corpus, ckpt.schedule), fb = probe_forward(b, corpus, back.schedule);
  CHECK((fa.array() == fb.array()).all());

  // Saving the loaded checkpoint reproduces the file byte for byte.
  save_model_checkpoint(back, dir / "again.ckpt");
  CHECK(slurp(path) == slurp(dir / "again.ckpt"));

  // Version field lives right after the 6-byte magic.
  std::string bytes = slurp(path);
  bytes[6] = 2;
  std::ofstream(dir / "v2.ckpt", std::ios::binary) << bytes;
  try {
    load_model_checkpoint(dir / "v2.ckpt");
    FAIL("expected refusal");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::version_mismatch);
  }
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTMOMUG";
  CHECK_THROWS_AS(load_model_checkpoint(dir / "bad.ckpt"), Error);
  std::ofstream(dir / "short.ckpt", std::ios::binary) << slurp(path).substr(0, 200);
  CHECK_THROWS_AS(load_model_checkpoint(dir / "short.ckpt"), Error);
}

TEST_CASE("embedder checkpoint round trip") {
  TempDir dir("emb");
  const Corpus corpus = build_corpus(4, 6, 8);
  EmbedderConfig ec;
  ec.vocab_size = corpus.vocab.size();
  EmbedderCheckpoint ckpt{init_embedder(ec, 3), corpus.vocab, corpus.stats, json::object()};
  save_embedder_checkpoint(ckpt, dir / "e.ckpt");
  const auto back = load_embedder_checkpoint(dir / "e.ckpt");
  // Stored at 32 bits.
  CHECK((back.embedder.conv1_w - ckpt.embedder.conv1_w.cast<float>().cast<double>()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.embedder.config.kernel == ec.kernel);
  CHECK_THROWS_AS(load_model_checkpoint(dir / "e.ckpt"), Error);
}

TEST_CASE("cli: zero-epoch training reproduces the pretrained base forward") {
  TempDir dir("cli_zero");
  REQUIRE(cli({"gen-corpus", "--seed", "3", "--count", "30", "--out", dir / "c.jsonl"}).code == 0);
  REQUIRE(cli(with({"pretrain-base", "--corpus", dir / "c.jsonl", "--out", dir / "base.ckpt", "--epochs", "2"},
                   kTinyModel))
              .code == 0);
  const auto r = cli(with({"train", "--corpus", dir / "c.jsonl", "--base", dir / "base.ckpt", "--out-dir",
                           dir / "run", "--epochs", "0"},
                          kTinyModel));
  REQUIRE(r.code == 0);
  const auto base = load_model_checkpoint(dir / "base.ckpt");
  const auto tuned = load_model_checkpoint(dir / "run/final.ckpt");
  CHECK(base.tag == "base");
  CHECK(tuned.tag == "finetuned");
  CHECK(base_fingerprint(base.state.base) == base_fingerprint(tuned.state.base));
  for (const auto& b : tuned.state.adapters.blocks)
    for (const auto* p : {&b.q, &b.k, &b.v, &b.o, &b.up, &b.down}) CHECK(p->b.isZero(0.0));
  const Corpus corpus = load_corpus(dir / "c.jsonl");
  const auto pairs = normalized_pairs({corpus.pairs[0]}, corpus.stats);
  const auto ex = build_example(pairs[0].caption.token_ids, pairs[0].motion, TaskMode::motion_to_text, 0, false,
                                corpus.vocab);
  const auto emb = embed_mixed(ex.sequence, tuned.state, tuned.schedule);
  const auto adapted = forward(emb.hidden, tuned.state, ForwardOptions{true, nullptr});
  const auto frozen = forward(emb.hidden, base.state, ForwardOptions{false, nullptr});
  CHECK((adapted.output.array() == frozen.output.array()).all());
  CHECK(slurp(dir / "run/train_log.jsonl").empty());
}

TEST_CASE("cli: training log, flags over config, cfg identity and error reporting") {
  TempDir dir("cli_full");
  REQUIRE(cli({"gen-corpus", "--seed", "5", "--count", "30", "--out", dir / "c.jsonl"}).code == 0);
  REQUIRE(cli(with({"pretrain-base", "--corpus", dir / "c.jsonl", "--out", dir / "base.ckpt", "--epochs", "1"},
                   kTinyModel))
              .code == 0);
  std::ofstream(dir / "cfg.json") << R"({"train": {"epochs": 9, "batch_size": 9, "checkpoint_every": 2}})";
  const auto r = cli(with({"train", "--corpus", dir / "c.jsonl", "--base", dir / "base.ckpt", "--out-dir",
                           dir / "run", "--config", dir / "cfg.json", "--epochs", "1"},
                          kTinyModel));
  REQUIRE(r.code == 0);
  // 27 training pairs at batch 9, one epoch: the flag beat the config's 9 epochs.
  std::ifstream log(dir / "run/train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    CHECK(j.at("step").get<int>() == lines);
    for (const char* k : {"mode_mix", "lm_loss", "ddpm_loss", "total", "lr"}) CHECK(j.contains(k));
    CHECK(j["mode_mix"]["t2m"].get<int>() + j["mode_mix"]["m2t"].get<int>() == 9);
    ++lines;
  }
  CHECK(lines == 3);
  CHECK(fs::exists(dir / "run/step_000002.ckpt"));
  CHECK(fs::exists(dir / "run/final.ckpt"));

  const std::string ck = dir / "run/final.ckpt";
  const std::vector<std::string> common = {"sample", "--ckpt", ck, "--caption", "a man jumps up and down slowly",
                                           "--length", "24", "--seed", "7"};
  REQUIRE(cli(with(common, {"--cfg-scale", "1", "--out", dir / "s1.jsonl"})).code == 0);
  REQUIRE(cli(with(common, {"--conditional-only", "--out", dir / "s2.jsonl"})).code == 0);
  CHECK(slurp(dir / "s1.csv") == slurp(dir / "s2.csv"));
  const auto recs = read_motion_records(dir / "s1.jsonl");
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].frames.rows() == 24);

  // Unknown word: error JSON on stderr, non-zero exit, nothing written.
  const auto unk = cli({"sample", "--ckpt", ck, "--caption", "a robot dances", "--out", dir / "never.jsonl"});
  CHECK(unk.code != 0);
  CHECK(json::parse(unk.err).at("error") == "unknown_word");
  CHECK_FALSE(fs::exists(dir / "never.jsonl"));
  CHECK_FALSE(fs::exists(dir / "never.csv"));

  const auto cfgerr = cli({"train", "--corpus", dir / "c.jsonl", "--base", dir / "base.ckpt", "--out-dir",
                           dir / "run2", "--set", "train.lr=abc", "train.bogus=1"});
  CHECK(cfgerr.code != 0);
  const json e = json::parse(cfgerr.err);
  CHECK(e.at("error") == "config_error");
  CHECK(e.at("details").size() == 2);
  CHECK_FALSE(fs::exists(dir / "run2"));

  // A bumped format version is refused before anything is written.
  std::string bytes = slurp(dir / "base.ckpt");
  bytes[6] = 9;
  std::ofstream(dir / "v9.ckpt", std::ios::binary) << bytes;
  const auto ver = cli({"train", "--corpus", dir / "c.jsonl", "--base", dir / "v9.ckpt", "--out-dir", dir / "run3"});
  CHECK(json::parse(ver.err).at("error") == "version_mismatch");
  CHECK_FALSE(fs::exists(dir / "run3"));

  // Caption and inpaint run against corpus records.
  REQUIRE(cli({"caption", "--ckpt", ck, "--motion-file", dir / "c.jsonl", "--out", dir / "cap.jsonl", "--decode",
               "topk", "--max-len", "5"})
              .code == 0);
  std::ifstream caps(dir / "cap.jsonl");
  int n_caps = 0;
  while (std::getline(caps, line)) {
    const json j = json::parse(line);
    CHECK(j.at("token_ids").size() <= 5);
    ++n_caps;
  }
  CHECK(n_caps == 30);
  REQUIRE(cli({"inpaint", "--ckpt", ck, "--motion-file", dir / "c.jsonl", "--index", "1", "--mask", "prefix:4",
               "--caption", "a man jumps up and down slowly", "--out", dir / "ip.jsonl"})
              .code == 0);
  const auto edited = read_motion_records(dir / "ip.jsonl");
  const Corpus corpus = load_corpus(dir / "c.jsonl");
  CHECK((edited[0].frames.topRows(4) - corpus.pairs[1].motion.frames.topRows(4)).cwiseAbs().maxCoeff() < 1e-9);
  const auto badmask = cli({"inpaint", "--ckpt", ck, "--motion-file", dir / "c.jsonl", "--mask", "middle:3",
                            "--caption", "a man jumps up and down slowly", "--out", dir / "ip2.jsonl"});
  CHECK(badmask.code != 0);
  CHECK_FALSE(fs::exists(dir / "ip2.jsonl"));
}
