#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "alignlab/losses.hpp"
#include "alignlab/model.hpp"

using namespace alignlab;

namespace {

constexpr Scalar kLn2 = 0.6931471805599453;
constexpr Scalar kLn4 = 1.3862943611198906;

ModelConfig lm_config(int vocab, std::uint64_t seed) {
  ModelConfig c;
  c.kind = ModelKind::DecoderLm;
  c.action_count = vocab;
  c.embed_dim = 8;
  c.hidden_dim = 12;
  c.max_positions = 12;
  c.seed = seed;
  return c;
}

// Pins the output distribution: with w2 zeroed, every logits row equals b2,
// so the policy emits softmax(logit_bias) at every single step.
PolicyModel pinned_output_lm(int vocab, const Vector& logit_bias,
                             std::uint64_t seed = 1) {
  PolicyModel model(lm_config(vocab, seed));
  auto& w2 = model.params().at("w2")->value;
  w2 = Matrix::Zero(w2.rows(), w2.cols());
  auto& b2 = model.params().at("b2")->value;
  for (int i = 0; i < vocab; ++i) b2(0, i) = logit_bias(i);
  return model;
}

PolicyModel uniform_lm(int vocab, std::uint64_t seed = 1) {
  return pinned_output_lm(vocab, Vector::Zero(vocab), seed);
}

TokenSequence seq(std::vector<int> tokens, int prompt_len) {
  TokenSequence s;
  s.tokens = std::move(tokens);
  s.prompt_len = prompt_len;
  return s;
}

LossConfig plain_cfg() {
  LossConfig cfg;
  cfg.propagation = Propagation::Off;
  cfg.normalize = Normalize::PerToken;
  return cfg;
}

}  // namespace

TEST_CASE("sft on the uniform policy costs ln(vocab) per token") {
  PolicyModel model = uniform_lm(4);
  const LossReport report = sft_loss(model, seq({1, 2, 3}, 1), plain_cfg());

  REQUIRE(report.token_losses.size() == 2);
  CHECK(report.token_losses(0) == doctest::Approx(kLn4).epsilon(1e-12));
  CHECK(report.token_losses(1) == doctest::Approx(kLn4).epsilon(1e-12));
  CHECK(report.total_value() == doctest::Approx(kLn4).epsilon(1e-12));
  CHECK(report.method == "sft");
  CHECK(report.raw_token_losses);
  CHECK(report.weights.size() == 0);
  // greedy dominance holds trivially under the uniform policy, with zero gap
  REQUIRE(report.corollary_gaps.size() == 2);
  CHECK(report.corollary_gaps.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("sft averages hand-pinned target probabilities") {
  // the pinned distribution is (0.5, 0.25, 0.125, 0.125); targets hit the
  // 0.5 and then the 0.25 slot
  Vector bias(4);
  bias << std::log(0.5), std::log(0.25), std::log(0.125), std::log(0.125);
  PolicyModel model = pinned_output_lm(4, bias);

  const LossReport report = sft_loss(model, seq({3, 0, 1}, 1), plain_cfg());
  REQUIRE(report.token_losses.size() == 2);
  CHECK(report.token_losses(0) == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK(report.token_losses(1) == doctest::Approx(kLn4).epsilon(1e-12));
  CHECK(report.total_value() ==
        doctest::Approx((kLn2 + kLn4) / 2.0).epsilon(1e-12));

  SUBCASE("normalization variants rescale the same sum") {
    LossConfig cfg = plain_cfg();
    cfg.normalize = Normalize::None;
    CHECK(sft_loss(model, seq({3, 0, 1}, 1), cfg).total_value() ==
          doctest::Approx(kLn2 + kLn4).epsilon(1e-12));
    // with propagation off, every token carries coefficient one, so the
    // weight-mass normalizer coincides with the per-token one
    cfg.normalize = Normalize::PerWeightSum;
    CHECK(sft_loss(model, seq({3, 0, 1}, 1), cfg).total_value() ==
          doctest::Approx((kLn2 + kLn4) / 2.0).epsilon(1e-12));
  }
}

TEST_CASE("sequence guards") {
  PolicyModel model = uniform_lm(4);
  CHECK_THROWS_WITH_AS(sft_loss(model, seq({1, 2}, 0), plain_cfg()),
                       "empty prefix", std::invalid_argument);
  CHECK_THROWS_WITH_AS(sft_loss(model, seq({1, 2}, 2), plain_cfg()),
                       "no target tokens", std::invalid_argument);
  LossConfig bad = plain_cfg();
  bad.lambda = 1.5;
  CHECK_THROWS_WITH_AS(sft_loss(model, seq({1, 2}, 1), bad),
                       "lambda must lie in [0, 1]", std::invalid_argument);
}

TEST_CASE("greedy one-step-ahead picks argmax with ties to the lowest id") {
  SUBCASE("uniform ties collapse to token zero") {
    PolicyModel model = uniform_lm(4);
    CHECK(greedy_one_step_ahead(model, seq({1, 2, 3, 0}, 1)) ==
          std::vector<int>{0, 0, 0});
  }
  SUBCASE("a pinned favourite wins everywhere") {
    Vector bias(4);
    bias << 0.0, 0.0, 0.0, 30.0;
    PolicyModel model = pinned_output_lm(4, bias);
    CHECK(greedy_one_step_ahead(model, seq({1, 2, 0}, 2)) ==
          std::vector<int>{3});
  }
}

TEST_CASE("state fusion mixes embedding rows by lambda") {
  PolicyModel model(lm_config(4, 9));
  // overwrite the embedding table with one-hot rows so mixes are legible
  auto& embed = model.params().at("embed")->value;
  embed = Matrix::Zero(4, model.config().embed_dim);
  for (int v = 0; v < 4; ++v) embed(v, v) = 1.0;

  const TokenSequence batch = seq({0, 1, 2}, 1);
  const std::vector<int> predicted{3, 3};

  SUBCASE("scalar lambda") {
    const Matrix fused = fuse_states(model, batch, predicted, 0.2)->value;
    REQUIRE(fused.rows() == 3);
    CHECK(fused(0, 0) == 1.0);  // prompt row untouched
    CHECK(fused.row(0).sum() == 1.0);
    CHECK(fused(1, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(fused(1, 3) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(fused(2, 2) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(fused(2, 3) == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("per-position lambda") {
    const std::vector<Scalar> lambdas{0.0, 1.0};
    const Matrix fused = fuse_states(model, batch, predicted, lambdas)->value;
    CHECK(fused(1, 1) == 1.0);  // lambda 0: pure ground truth
    CHECK(fused(1, 3) == 0.0);
    CHECK(fused(2, 3) == 1.0);  // lambda 1: pure prediction
    CHECK(fused(2, 2) == 0.0);
  }
  SUBCASE("guards") {
    CHECK_THROWS_WITH_AS(fuse_states(model, batch, {3}, 0.2),
                         "prediction count mismatch", std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        fuse_states(model, batch, predicted, std::vector<Scalar>{0.2}),
        "lambda count mismatch", std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        fuse_states(model, batch, predicted, std::vector<Scalar>{0.2, 1.5}),
        "invalid mix", std::invalid_argument);
  }
}

TEST_CASE("propagated weights reproduce the hand tables") {
  Matrix ones(3, 1);
  ones.setOnes();

  SUBCASE("undiscounted suffix sums count the remaining tokens") {
    auto w = propagation_weights(ad::constant(ones), 1.0,
                                 Propagation::SuffixSum);
    CHECK(w->value(0, 0) == doctest::Approx(3.0));
    CHECK(w->value(1, 0) == doctest::Approx(2.0));
    CHECK(w->value(2, 0) == doctest::Approx(1.0));
  }
  SUBCASE("discounted pair") {
    Matrix in(2, 1);
    in << 2.0, 1.0;
    auto w = propagation_weights(ad::constant(in), 0.95,
                                 Propagation::SuffixSum);
    CHECK(w->value(0, 0) == doctest::Approx(2.95).epsilon(1e-12));
    CHECK(w->value(1, 0) == doctest::Approx(1.0));
  }
  SUBCASE("scaled variant discounts the plain total by distance from the end") {
    Matrix in(2, 1);
    in << 2.0, 1.0;
    auto w = propagation_weights(ad::constant(in), 0.95,
                                 Propagation::ScaledSuffix);
    CHECK(w->value(0, 0) == doctest::Approx(0.95 * 3.0).epsilon(1e-12));
    CHECK(w->value(1, 0) == doctest::Approx(1.0));
  }
  SUBCASE("guards") {
    CHECK_THROWS_WITH_AS(
        propagation_weights(ad::constant(Matrix::Zero(0, 1)), 0.9,
                            Propagation::SuffixSum),
        "no target tokens", std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        propagation_weights(ad::constant(ones), 0.9, Propagation::Off),
        "propagation is off", std::invalid_argument);
  }
  SUBCASE("coefficient mass matches a direct expansion") {
    // under suffix sums, L_t appears once in each w_i with i <= t, scaled
    // by decay^(t-i): mass = sum_t sum_{i<=t} decay^(t-i)
    const Scalar mass = weight_coefficient_sum(3, 0.5, Propagation::SuffixSum);
    CHECK(mass == doctest::Approx(1.0 + 1.5 + 1.75).epsilon(1e-12));
    const Scalar counts = weight_coefficient_sum(4, 1.0, Propagation::SuffixSum);
    CHECK(counts == doctest::Approx(10.0));  // 1 + 2 + 3 + 4
    CHECK_THROWS_WITH_AS(weight_coefficient_sum(0, 0.9, Propagation::SuffixSum),
                         "no target tokens", std::invalid_argument);
  }
}

TEST_CASE("ift on the uniform policy reproduces the weighted oracle") {
  PolicyModel model = uniform_lm(4);
  LossConfig cfg;
  cfg.lambda = 0.2;
  cfg.decay = 1.0;
  cfg.propagation = Propagation::SuffixSum;
  cfg.normalize = Normalize::PerToken;

  // two target positions, every distribution uniform: L = (ln4, ln4),
  // w = (2 ln4, ln4), total = 3 ln4 / 2
  const LossReport report = ift_loss(model, seq({1, 2, 3}, 1), cfg);
  CHECK(report.method == "ift");
  REQUIRE(report.token_losses.size() == 2);
  CHECK(report.token_losses(0) == doctest::Approx(kLn4).epsilon(1e-12));
  REQUIRE(report.weights.size() == 2);
  CHECK(report.weights(0) == doctest::Approx(2.0 * kLn4).epsilon(1e-12));
  CHECK(report.weights(1) == doctest::Approx(kLn4).epsilon(1e-12));
  CHECK(report.total_value() == doctest::Approx(1.5 * kLn4).epsilon(1e-12));
  CHECK(report.fused_greedy_tokens == std::vector<int>{0, 0});
  CHECK(report.raw_token_losses);

  SUBCASE("the experimental dot-product total differs") {
    LossConfig dot = cfg;
    dot.dot_product_total = true;
    const LossReport r = ift_loss(model, seq({1, 2, 3}, 1), dot);
    // sum_t w_t * L_t / N = (2 ln4^2 + ln4^2) / 2
    CHECK(r.total_value() ==
          doctest::Approx(1.5 * kLn4 * kLn4).epsilon(1e-12));
  }
}

TEST_CASE("ift with zero fusion and no propagation is exactly sft") {
  for (std::uint64_t s = 0; s < 8; ++s) {
    PolicyModel a(lm_config(5, 100 + s));
    PolicyModel b(lm_config(5, 100 + s));
    const TokenSequence batch = seq({1, 4, 2, 0, 3}, 2);

    LossConfig cfg = plain_cfg();
    cfg.lambda = 0.0;

    const LossReport sft = sft_loss(a, batch, cfg);
    const LossReport ift = ift_loss(b, batch, cfg);
    CHECK(std::abs(sft.total_value() - ift.total_value()) <= 1e-12);
    CHECK((sft.token_losses - ift.token_losses).cwiseAbs().maxCoeff() <=
          1e-12);
  }
}

TEST_CASE("bellman residuals vanish on every pinned policy") {
  PolicyModel model = uniform_lm(4);
  const LossReport report = sft_loss(model, seq({1, 2, 3}, 1), plain_cfg());

  // V_n = exp(-sum of remaining losses): 1/16 then 1/4 under uniform ln4
  const Vector losses = report.token_losses;
  CHECK(std::exp(-losses.sum()) == doctest::Approx(1.0 / 16).epsilon(1e-12));
  CHECK(std::exp(-losses(1)) == doctest::Approx(0.25).epsilon(1e-12));

  const Vector residual = bellman_residual(report);
  REQUIRE(residual.size() == 2);
  CHECK(residual.cwiseAbs().maxCoeff() <= 1e-9);

  SUBCASE("the raw-vector overload handles arbitrary losses") {
    Vector arbitrary(3);
    arbitrary << 0.3, 1.2, 0.05;
    CHECK(bellman_residual(arbitrary).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK_THROWS_WITH_AS(bellman_residual(Vector(0)), "no target tokens",
                         std::invalid_argument);
  }
  SUBCASE("reports without raw losses are rejected") {
    PolicyModel ref = model.clone();
    const LossReport dpo =
        dpo_loss(model, &ref, seq({1, 2}, 1), seq({1, 3}, 1), plain_cfg(),
                 DpoMode::Offline);
    CHECK_THROWS_WITH_AS(bellman_residual(dpo), "raw losses required",
                         std::logic_error);
  }
}

TEST_CASE("dpo against a frozen clone starts at ln 2") {
  PolicyModel model(lm_config(5, 33));
  PolicyModel reference = model.clone();
  const LossReport report =
      dpo_loss(model, &reference, seq({1, 2, 3}, 1), seq({1, 4, 4}, 1),
               plain_cfg(), DpoMode::Offline);
  CHECK(report.method == "dpo_offline");
  CHECK(report.total_value() == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK_FALSE(report.raw_token_losses);
}

TEST_CASE("dpo margins follow -log(sigmoid(beta * margin))") {
  // pinned-logit construction: sequence log-prob differences reduce to
  // logit differences, so the policy/reference pair below has margin 1
  Vector policy_bias(2), ref_bias(2);
  policy_bias << 1.0, 0.0;
  ref_bias << 0.0, 0.0;
  PolicyModel policy = pinned_output_lm(2, policy_bias);
  PolicyModel reference = pinned_output_lm(2, ref_bias);

  LossConfig cfg = plain_cfg();
  cfg.beta = 0.1;

  const TokenSequence pos = seq({0, 0}, 1);
  const TokenSequence neg = seq({0, 1}, 1);
  const LossReport report =
      dpo_loss(policy, &reference, pos, neg, cfg, DpoMode::Offline);

  const Scalar expected = -std::log(1.0 / (1.0 + std::exp(-0.1)));
  CHECK(report.total_value() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(report.total_value() == doctest::Approx(0.644397).epsilon(1e-5));

  SUBCASE("a huge margin saturates to zero loss") {
    Vector sharp(2);
    sharp << 200.0, 0.0;
    PolicyModel strong = pinned_output_lm(2, sharp);
    const LossReport sat =
        dpo_loss(strong, &reference, pos, neg, cfg, DpoMode::Offline);
    CHECK(sat.total_value() >= 0.0);
    CHECK(sat.total_value() < 1e-8);
  }
}

TEST_CASE("dpo guards") {
  PolicyModel model(lm_config(4, 3));
  PolicyModel reference = model.clone();
  const TokenSequence pos = seq({1, 2}, 1);

  CHECK_THROWS_WITH_AS(
      dpo_loss(model, nullptr, pos, seq({1, 3}, 1), plain_cfg(),
               DpoMode::Offline),
      "reference required", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      dpo_loss(model, &reference, pos, seq({2, 3}, 1), plain_cfg(),
               DpoMode::Offline),
      "pair prompt mismatch", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      dpo_loss(model, &reference, pos, std::nullopt, plain_cfg(),
               DpoMode::Offline),
      "stored negative required", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      dpo_loss(model, &reference, pos, std::nullopt, plain_cfg(),
               DpoMode::Online, /*truncation=*/1),
      "prompt too long", std::invalid_argument);
}

TEST_CASE("online dpo regenerates the negative from the current policy") {
  // the policy is pinned to favour token 3, so its greedy negative is a run
  // of 3s; a self-negative equal to the positive would zero the margin, and
  // here positive != negative by construction
  Vector bias(4);
  bias << 0.0, 0.0, 0.0, 5.0;
  PolicyModel policy = pinned_output_lm(4, bias);
  PolicyModel reference = policy.clone();

  const TokenSequence pos = seq({1, 2, 2}, 1);
  const LossReport report =
      dpo_loss(policy, &reference, pos, std::nullopt, plain_cfg(),
               DpoMode::Online, /*truncation=*/4);
  CHECK(report.method == "dpo_online");
  // policy == reference still pins the online loss at ln 2
  CHECK(report.total_value() == doctest::Approx(kLn2).epsilon(1e-12));
}

TEST_CASE("orpo blends sft with the odds-ratio penalty") {
  PolicyModel model(lm_config(5, 44));
  const TokenSequence pos = seq({1, 2, 3}, 1);
  const TokenSequence neg = seq({1, 4, 0}, 1);

  SUBCASE("zero mix collapses to exactly sft") {
    LossConfig cfg = plain_cfg();
    cfg.orpo_mix = 0.0;
    PolicyModel twin(lm_config(5, 44));
    const LossReport orpo = orpo_loss(model, pos, neg, cfg);
    const LossReport sft = sft_loss(twin, pos, cfg);
    CHECK(orpo.total_value() == sft.total_value());
    CHECK(orpo.method == "orpo");
  }
  SUBCASE("identical pairs add exactly orpo_mix * ln 2") {
    LossConfig cfg = plain_cfg();
    cfg.orpo_mix = 0.7;
    PolicyModel twin(lm_config(5, 44));
    const LossReport orpo = orpo_loss(model, pos, pos, cfg);
    const LossReport sft = sft_loss(twin, pos, cfg);
    CHECK(orpo.total_value() ==
          doctest::Approx(sft.total_value() + 0.7 * kLn2).epsilon(1e-12));
  }
  SUBCASE("preferring the positive lowers the penalty below ln 2") {
    LossConfig cfg = plain_cfg();
    cfg.orpo_mix = 1.0;
    Vector bias(5);
    bias << 0.0, 3.0, 3.0, 3.0, -3.0;
    PolicyModel sharp = pinned_output_lm(5, bias);
    PolicyModel twin = sharp.clone();
    const LossReport orpo = orpo_loss(sharp, pos, neg, cfg);
    const LossReport sft = sft_loss(twin, pos, cfg);
    CHECK(orpo.total_value() < sft.total_value() + kLn2);
  }
}

TEST_CASE("traces record the full distribution at every step") {
  // a pinned policy that always says token 0; no stop token configured
  Vector bias(4);
  bias << 30.0, 0.0, 0.0, 0.0;
  PolicyModel model = pinned_output_lm(4, bias);

  TraceOptions opts;
  opts.truncation = 4;
  opts.eos = std::nullopt;

  const TokenSequence origin = seq({1}, 1);

  SUBCASE("self rollouts walk the policy greedily") {
    const PreferenceTrace trace = build_preference_trace(
        model, origin, origin, TraceKind::SelfRollout, opts);
    CHECK(trace.kind == TraceKind::SelfRollout);
    REQUIRE(trace.steps.size() == 3);
    CHECK(trace.steps[0].state_id == "1");
    CHECK(trace.steps[1].state_id == "1,0");
    CHECK(trace.steps[2].state_id == "1,0,0");
    CHECK(trace.actions() == std::vector<int>{0, 0, 0});
    for (const TraceStep& step : trace.steps) {
      CHECK(step.chosen == 0);
      CHECK(step.distribution.size() == 4);
      CHECK(step.distribution(0) > 0.999);
      CHECK(step.distribution.sum() == doctest::Approx(1.0).epsilon(1e-9));
      // the pinned policy emits the same distribution at every state
      CHECK(step.distribution == trace.steps[0].distribution);
    }
  }

  SUBCASE("a stop token ends the rollout immediately") {
    TraceOptions stop = opts;
    stop.eos = 0;
    const PreferenceTrace trace = build_preference_trace(
        model, origin, origin, TraceKind::SelfRollout, stop);
    CHECK(trace.steps.size() == 1);
    CHECK(trace.actions() == std::vector<int>{0});
  }

  SUBCASE("re-scoring the rollout as ground truth reproduces it bit-for-bit") {
    const PreferenceTrace rolled = build_preference_trace(
        model, origin, origin, TraceKind::SelfRollout, opts);
    TokenSequence truth = origin;
    for (int a : rolled.actions()) truth.tokens.push_back(a);

    const PreferenceTrace scored = build_preference_trace(
        model, origin, truth, TraceKind::GroundTruthPrior, opts);
    CHECK(scored.kind == TraceKind::GroundTruthPrior);
    REQUIRE(scored.steps.size() == rolled.steps.size());
    for (std::size_t i = 0; i < scored.steps.size(); ++i) {
      CHECK(scored.steps[i].state_id == rolled.steps[i].state_id);
      CHECK(scored.steps[i].chosen == rolled.steps[i].chosen);
      CHECK(scored.steps[i].distribution == rolled.steps[i].distribution);
    }
  }

  SUBCASE("fused and stored-negative traces score one step per target") {
    const TokenSequence truth = seq({1, 2, 3, 0}, 1);
    for (TraceKind kind :
         {TraceKind::FusedPrior, TraceKind::StoredNegative}) {
      const PreferenceTrace trace =
          build_preference_trace(model, origin, truth, kind, opts);
      CHECK(trace.kind == kind);
      CHECK(trace.steps.size() == 3);
      CHECK(trace.actions() == std::vector<int>{2, 3, 0});
    }
  }

  SUBCASE("guards") {
    TraceOptions tight = opts;
    tight.truncation = 2;
    const TokenSequence long_origin = seq({1, 2, 3}, 3);
    CHECK_THROWS_WITH_AS(
        build_preference_trace(model, long_origin, long_origin,
                               TraceKind::SelfRollout, tight),
        "prompt too long", std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        build_preference_trace(model, seq({1, 2}, 2), seq({2, 3, 1}, 2),
                               TraceKind::GroundTruthPrior, opts),
        "ground truth must extend origin", std::invalid_argument);
  }
}
