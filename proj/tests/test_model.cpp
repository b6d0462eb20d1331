#include <doctest.h>

#include "helpers.hpp"
#include "momug/error.hpp"

using namespace momug;

namespace {

const Corpus& small_corpus() {
  static const Corpus c = build_corpus(3, 16, 8);
  return c;
}

ModelState<double> tiny_state(std::uint64_t seed = 5) {
  auto s = init_state<double>(test::tiny_config(small_corpus().vocab.size()), seed);
  test::perturb_lora_b(s, seed);
  return s;
}

}  // namespace

TEST_CASE("config validation names the offending key") {
  ModelConfig c = test::tiny_config(40);
  c.n_heads = 3;
  try {
    c.validate();
    FAIL("expected config_error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config_error);
    CHECK(std::string(e.what()).find("model.n_heads") != std::string::npos);
  }
}

TEST_CASE("analytic gradients match central differences") {
  auto state = tiny_state();
  const auto batch = test::mixed_batch(small_corpus(), state.config, 11);
  const auto schedule = cosine_schedule(50);
  TrainConfig cfg;
  cfg.lambda = 0.5;  // larger than the default so text-path errors are visible

  SUBCASE("trainable parameters") {
    const auto r = test::finite_difference_check(state, batch, cfg, schedule, false);
    INFO(r.worst);
    CHECK(r.checked > 1000);
    CHECK(r.max_rel < 1e-4);
  }
  SUBCASE("base parameters") {
    const auto r = test::finite_difference_check(state, batch, cfg, schedule, true);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("zero LoRA B makes the adapted forward equal the base forward bitwise") {
  auto state = init_state<double>(test::tiny_config(small_corpus().vocab.size()), 8);
  const auto batch = test::mixed_batch(small_corpus(), state.config, 2);
  const auto schedule = cosine_schedule(50);
  for (const auto& ex : batch.examples) {
    const auto emb = embed_mixed(ex.sequence, state, schedule, ex.eps.size() ? &ex.eps : nullptr);
    Rng drop(1, "drop");
    const auto adapted = forward(emb.hidden, state, ForwardOptions{true, &drop});
    const auto plain = forward(emb.hidden, state, ForwardOptions{false, nullptr});
    CHECK((adapted.output.array() == plain.output.array()).all());
  }
}

TEST_CASE("attention is causal and rows are distributions") {
  auto state = tiny_state();
  const auto batch = test::mixed_batch(small_corpus(), state.config, 4);
  const auto schedule = cosine_schedule(50);
  const auto& seq = batch.examples[0].sequence;
  const auto emb = embed_mixed(seq, state, schedule, &batch.examples[0].eps);
  const auto trace = forward(emb.hidden, state);
  for (int layer = 0; layer < state.config.n_layers; ++layer) {
    for (int head = 0; head < state.config.n_heads; ++head) {
      const auto& p = attention_probs(trace, layer, head);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
        for (Eigen::Index j = i + 1; j < p.cols(); ++j) CHECK(p(i, j) == 0.0);
      }
    }
  }

  // Changing the last frame leaves every earlier output untouched.
  Mat<double> hidden2 = emb.hidden;
  hidden2.row(hidden2.rows() - 1).array() += 1.0;
  const auto trace2 = forward(hidden2, state);
  const auto n = emb.hidden.rows() - 1;
  CHECK((trace.output.topRows(n).array() == trace2.output.topRows(n).array()).all());
  CHECK((trace.output.row(n).array() != trace2.output.row(n).array()).any());
}

TEST_CASE("mixed sequence validation rejects broken layouts") {
  const auto& corpus = small_corpus();
  const auto& p = corpus.pairs[0];
  auto ex = build_example(p.caption.token_ids, p.motion, TaskMode::text_to_motion, 3, false, corpus.vocab);
  CHECK_NOTHROW(ex.sequence.validate(8));
  CHECK_THROWS_AS(ex.sequence.validate(6), Error);

  auto broken = ex.sequence;
  broken.tokens[static_cast<std::size_t>(broken.motion_begin() + broken.motion_count())] = Vocabulary::kEos;
  CHECK_THROWS_AS(broken.validate(8), Error);

  auto m2t = build_example(p.caption.token_ids, p.motion, TaskMode::motion_to_text, 0, false, corpus.vocab);
  m2t.sequence.timestep = 4;
  CHECK_THROWS_AS(m2t.sequence.validate(8), Error);
}

TEST_CASE("state conversion round-trips and base fingerprint tracks content") {
  auto s = tiny_state();
  const auto f = convert_state<float>(s);
  const auto back = convert_state<double>(f);
  CHECK(base_fingerprint(f.base) == base_fingerprint(convert_state<float>(back).base));
  auto changed = f;
  changed.base.lm_head(0, 0) += 1.0F;
  CHECK(base_fingerprint(changed.base) != base_fingerprint(f.base));
}
