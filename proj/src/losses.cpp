#include "alignlab/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "alignlab/math.hpp"

namespace alignlab {

namespace {

void validate_lm_batch(const PolicyModel& model, const TokenSequence& batch) {
  if (model.kind() != ModelKind::DecoderLm) {
    throw std::logic_error("sequence losses need a decoder model");
  }
  if (batch.prompt_len < 1) throw std::invalid_argument("empty prefix");
  if (batch.target_count() < 1) throw std::invalid_argument("no target tokens");
  batch.validate(ActionSpace{model.action_count(), {}});
}

// Logits row t-1 predicts token t; one (row, column) pick per target.
std::vector<std::pair<int, int>> target_picks(const TokenSequence& b) {
  std::vector<std::pair<int, int>> picks;
  picks.reserve(static_cast<std::size_t>(b.target_count()));
  for (int t = b.prompt_len; t < b.length(); ++t) {
    picks.emplace_back(t - 1, b.tokens[static_cast<std::size_t>(t)]);
  }
  return picks;
}

struct TeacherForced {
  ad::NodePtr logits;    // full (T x V) rows
  ad::NodePtr logp_col;  // (N x 1) log-probabilities of the targets
  ad::NodePtr nll_col;   // (N x 1) per-token losses
};

TeacherForced teacher_forced_nll(const PolicyModel& model,
                                 const TokenSequence& batch,
                                 const ad::NodePtr& embeddings) {
  TeacherForced out;
  out.logits = model.logits_from_embeddings(embeddings);
  out.logp_col =
      ad::pick_entries(ad::row_log_softmax(out.logits), target_picks(batch));
  out.nll_col = ad::neg(out.logp_col);
  return out;
}

// Greedy picks and dominance gaps per target position from full logits rows.
void greedy_and_gaps(const Matrix& logits, const TokenSequence& batch,
                     std::vector<int>* greedy, Vector* gaps) {
  const int n = batch.target_count();
  greedy->resize(static_cast<std::size_t>(n));
  gaps->resize(n);
  for (int i = 0; i < n; ++i) {
    const int t = batch.prompt_len + i;
    const Matrix dist = row_softmax(logits.row(t - 1));
    (*greedy)[static_cast<std::size_t>(i)] = argmax_lowest(dist.row(0));
    const int target = batch.tokens[static_cast<std::size_t>(t)];
    (*gaps)(i) = dist.row(0).maxCoeff() - dist(0, target);
  }
}

ad::NodePtr normalized_sum(const ad::NodePtr& column, Normalize norm,
                           int count, Scalar weight_mass) {
  switch (norm) {
    case Normalize::PerToken:
      return ad::scale(ad::sum(column), 1.0 / static_cast<Scalar>(count));
    case Normalize::PerWeightSum:
      return ad::scale(ad::sum(column), 1.0 / weight_mass);
    case Normalize::None:
      return ad::sum(column);
  }
  throw std::logic_error("unreachable");
}

void check_shared_prompt(const TokenSequence& positive,
                         const TokenSequence& negative) {
  bool ok = positive.prompt_len == negative.prompt_len &&
            negative.length() >= negative.prompt_len;
  if (ok) {
    for (int i = 0; i < positive.prompt_len; ++i) {
      if (positive.tokens[static_cast<std::size_t>(i)] !=
          negative.tokens[static_cast<std::size_t>(i)]) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) throw std::invalid_argument("pair prompt mismatch");
}

// Sequence log-probability under a model whose gradients we never want:
// evaluated to a plain double.
Scalar detached_sequence_logprob(const PolicyModel& model,
                                 const TokenSequence& seq) {
  const Matrix rows = model.target_logits(seq);
  const Matrix logp = row_log_softmax(rows);
  Scalar total = 0.0;
  for (int i = 0; i < seq.target_count(); ++i) {
    const int token = seq.tokens[static_cast<std::size_t>(seq.prompt_len + i)];
    total += logp(i, token);
  }
  return total;
}

// Length-normalized log-odds: m - log(1 - exp(m)) with m the mean target
// log-probability. m < 0 for any non-degenerate model.
ad::NodePtr log_odds(const ad::NodePtr& logp_col, int count) {
  auto m = ad::scale(ad::sum(logp_col), 1.0 / static_cast<Scalar>(count));
  return ad::sub(m, ad::log_(ad::sub_from_scalar(1.0, ad::exp_(m))));
}

}  // namespace

const char* propagation_name(Propagation p) {
  switch (p) {
    case Propagation::Off: return "off";
    case Propagation::SuffixSum: return "suffix_sum";
    case Propagation::ScaledSuffix: return "scaled_suffix";
  }
  return "unknown";
}

const char* normalize_name(Normalize n) {
  switch (n) {
    case Normalize::PerToken: return "per_token";
    case Normalize::PerWeightSum: return "per_weight_sum";
    case Normalize::None: return "none";
  }
  return "unknown";
}

Propagation propagation_from_name(const std::string& name) {
  if (name == "off") return Propagation::Off;
  if (name == "suffix_sum") return Propagation::SuffixSum;
  if (name == "scaled_suffix") return Propagation::ScaledSuffix;
  throw std::invalid_argument("unknown propagation mode: " + name);
}

Normalize normalize_from_name(const std::string& name) {
  if (name == "per_token") return Normalize::PerToken;
  if (name == "per_weight_sum") return Normalize::PerWeightSum;
  if (name == "none") return Normalize::None;
  throw std::invalid_argument("unknown normalize mode: " + name);
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("lambda must lie in [0, 1]");
  }
  if (!(decay > 0.0 && decay <= 1.0)) {
    throw std::invalid_argument("decay must lie in (0, 1]");
  }
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (!(orpo_mix >= 0.0)) {
    throw std::invalid_argument("orpo_mix must be non-negative");
  }
}

std::vector<int> greedy_one_step_ahead(PolicyModel& model,
                                       const TokenSequence& batch) {
  validate_lm_batch(model, batch);
  const Matrix rows = model.target_logits(batch);
  std::vector<int> greedy(static_cast<std::size_t>(batch.target_count()));
  for (int i = 0; i < batch.target_count(); ++i) {
    greedy[static_cast<std::size_t>(i)] = argmax_lowest(rows.row(i));
  }
  return greedy;
}

ad::NodePtr fuse_states(PolicyModel& model, const TokenSequence& batch,
                        const std::vector<int>& predicted, Scalar lambda) {
  const std::vector<Scalar> lambdas(
      static_cast<std::size_t>(batch.target_count()), lambda);
  return fuse_states(model, batch, predicted, lambdas);
}

ad::NodePtr fuse_states(PolicyModel& model, const TokenSequence& batch,
                        const std::vector<int>& predicted,
                        const std::vector<Scalar>& lambda_per_token) {
  validate_lm_batch(model, batch);
  if (predicted.size() != static_cast<std::size_t>(batch.target_count())) {
    throw std::invalid_argument("prediction count mismatch");
  }
  if (lambda_per_token.size() != predicted.size()) {
    throw std::invalid_argument("lambda count mismatch");
  }
  for (Scalar l : lambda_per_token) {
    if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("invalid mix");
  }
  std::vector<int> mixed = batch.tokens;
  Vector mix = Vector::Zero(batch.length());
  for (int i = 0; i < batch.target_count(); ++i) {
    const int t = batch.prompt_len + i;
    mixed[static_cast<std::size_t>(t)] = predicted[static_cast<std::size_t>(i)];
    mix(t) = lambda_per_token[static_cast<std::size_t>(i)];
  }
  return ad::mix_rows(model.embed_tokens(batch.tokens),
                      model.embed_tokens(mixed), mix);
}

ad::NodePtr propagation_weights(const ad::NodePtr& token_losses, Scalar decay,
                                Propagation mode) {
  if (token_losses->value.size() == 0) {
    throw std::invalid_argument("no target tokens");
  }
  switch (mode) {
    case Propagation::SuffixSum:
      return ad::discounted_suffix_sum(token_losses, decay);
    case Propagation::ScaledSuffix:
      return ad::scaled_suffix_sum(token_losses, decay);
    case Propagation::Off:
      throw std::invalid_argument("propagation is off");
  }
  throw std::logic_error("unreachable");
}

Scalar weight_coefficient_sum(int count, Scalar decay, Propagation mode) {
  if (count < 1) throw std::invalid_argument("no target tokens");
  Scalar mass = 0.0;
  switch (mode) {
    case Propagation::Off:
      mass = static_cast<Scalar>(count);
      break;
    case Propagation::SuffixSum: {
      Scalar inner = 0.0, dp = 1.0;
      for (int i = 0; i < count; ++i) {
        inner += dp;
        mass += inner;
        dp *= decay;
      }
      break;
    }
    case Propagation::ScaledSuffix: {
      for (int i = 0; i < count; ++i) {
        for (int t = 0; t <= i; ++t) {
          mass += std::pow(decay, static_cast<Scalar>(count - 1 - t));
        }
      }
      break;
    }
  }
  return mass;
}

LossReport sft_loss(PolicyModel& model, const TokenSequence& batch,
                    const LossConfig& cfg) {
  cfg.validate();
  validate_lm_batch(model, batch);
  const int n = batch.target_count();

  TeacherForced tf =
      teacher_forced_nll(model, batch, model.embed_tokens(batch.tokens));

  LossReport report;
  report.method = "sft";
  report.token_losses = tf.nll_col->value.col(0);
  report.total = normalized_sum(tf.nll_col, cfg.normalize, n,
                                static_cast<Scalar>(n));
  greedy_and_gaps(tf.logits->value, batch, &report.fused_greedy_tokens,
                  &report.corollary_gaps);
  report.raw_token_losses = true;
  return report;
}

LossReport ift_loss(PolicyModel& model, const TokenSequence& batch,
                    const LossConfig& cfg,
                    const std::vector<Scalar>* lambda_per_token) {
  cfg.validate();
  validate_lm_batch(model, batch);
  const int n = batch.target_count();

  // Step 1: value-only teacher-forced pass; greedy pick per target position.
  ad::NodePtr probe = model.logits_for_tokens(batch.tokens);
  std::vector<int> greedy;
  Vector gaps;
  greedy_and_gaps(probe->value, batch, &greedy, &gaps);

  // Step 2: fuse the input embeddings toward the model's own predictions.
  std::vector<Scalar> lambdas =
      lambda_per_token ? *lambda_per_token
                       : std::vector<Scalar>(static_cast<std::size_t>(n),
                                             cfg.lambda);
  ad::NodePtr fused = fuse_states(model, batch, greedy, lambdas);
  TeacherForced tf = teacher_forced_nll(model, batch, fused);

  LossReport report;
  report.method = "ift";
  report.token_losses = tf.nll_col->value.col(0);
  report.fused_greedy_tokens = std::move(greedy);
  report.corollary_gaps = std::move(gaps);
  report.raw_token_losses = true;

  // Step 3: propagate each token's loss backwards along the sequence.
  if (cfg.propagation == Propagation::Off) {
    report.total = normalized_sum(tf.nll_col, cfg.normalize, n,
                                  static_cast<Scalar>(n));
    return report;
  }
  ad::NodePtr weights =
      propagation_weights(tf.nll_col, cfg.decay, cfg.propagation);
  report.weights = weights->value.col(0);
  const Scalar mass = weight_coefficient_sum(n, cfg.decay, cfg.propagation);
  const ad::NodePtr summand =
      cfg.dot_product_total ? ad::cwise_mul(weights, tf.nll_col) : weights;
  report.total = normalized_sum(summand, cfg.normalize, n, mass);
  return report;
}

LossReport dpo_loss(PolicyModel& model, const PolicyModel* reference,
                    const TokenSequence& positive,
                    const std::optional<TokenSequence>& negative,
                    const LossConfig& cfg, DpoMode mode, int truncation,
                    std::optional<int> eos) {
  cfg.validate();
  if (reference == nullptr) throw std::invalid_argument("reference required");
  validate_lm_batch(model, positive);

  TokenSequence neg_seq;
  if (mode == DpoMode::Online) {
    if (truncation <= positive.prompt_len) {
      throw std::invalid_argument("prompt too long");
    }
    std::vector<int> prompt(
        positive.tokens.begin(),
        positive.tokens.begin() + positive.prompt_len);
    neg_seq.tokens = prompt;
    const std::vector<int> emitted = greedy_rollout(
        model, std::move(prompt), truncation - positive.prompt_len, eos);
    neg_seq.tokens.insert(neg_seq.tokens.end(), emitted.begin(),
                          emitted.end());
    neg_seq.prompt_len = positive.prompt_len;
  } else {
    if (!negative.has_value()) {
      throw std::invalid_argument("stored negative required");
    }
    neg_seq = *negative;
  }
  validate_lm_batch(model, neg_seq);
  check_shared_prompt(positive, neg_seq);

  TeacherForced pos =
      teacher_forced_nll(model, positive, model.embed_tokens(positive.tokens));
  TeacherForced neg =
      teacher_forced_nll(model, neg_seq, model.embed_tokens(neg_seq.tokens));

  const Scalar ref_pos = detached_sequence_logprob(*reference, positive);
  const Scalar ref_neg = detached_sequence_logprob(*reference, neg_seq);

  ad::NodePtr margin = ad::scale(
      ad::sub(ad::sub(ad::sum(pos.logp_col), ad::constant_scalar(ref_pos)),
              ad::sub(ad::sum(neg.logp_col), ad::constant_scalar(ref_neg))),
      cfg.beta);

  LossReport report;
  report.method = mode == DpoMode::Online ? "dpo_online" : "dpo_offline";
  report.total = ad::neg(ad::log_sigmoid_(margin));
  report.token_losses = pos.nll_col->value.col(0);
  greedy_and_gaps(pos.logits->value, positive, &report.fused_greedy_tokens,
                  &report.corollary_gaps);
  return report;
}

LossReport orpo_loss(PolicyModel& model, const TokenSequence& positive,
                     const TokenSequence& negative, const LossConfig& cfg) {
  cfg.validate();
  validate_lm_batch(model, positive);
  validate_lm_batch(model, negative);
  check_shared_prompt(positive, negative);
  const int n = positive.target_count();

  TeacherForced pos =
      teacher_forced_nll(model, positive, model.embed_tokens(positive.tokens));
  TeacherForced neg =
      teacher_forced_nll(model, negative, model.embed_tokens(negative.tokens));

  ad::NodePtr sft_total = normalized_sum(pos.nll_col, cfg.normalize, n,
                                         static_cast<Scalar>(n));

  LossReport report;
  report.method = "orpo";
  if (cfg.orpo_mix == 0.0) {
    report.total = sft_total;  // exact degeneracy to sft
  } else {
    ad::NodePtr odds_gap =
        ad::sub(log_odds(pos.logp_col, n),
                log_odds(neg.logp_col, negative.target_count()));
    ad::NodePtr contrast =
        ad::neg(ad::log_sigmoid_(ad::scale(odds_gap, cfg.beta)));
    report.total = ad::add(sft_total, ad::scale(contrast, cfg.orpo_mix));
  }
  report.token_losses = pos.nll_col->value.col(0);
  greedy_and_gaps(pos.logits->value, positive, &report.fused_greedy_tokens,
                  &report.corollary_gaps);
  return report;
}

Vector bellman_residual(const Vector& token_losses) {
  const Eigen::Index n = token_losses.size();
  if (n == 0) throw std::invalid_argument("no target tokens");
  // Suffix sums accumulated backwards keep the identity tight in floating
  // point: value(t) = exp(-suffix(t)), one_step(t) = exp(-L_t).
  Vector suffix(n);
  Scalar acc = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    acc += token_losses(t);
    suffix(t) = acc;
  }
  Vector residuals(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Scalar value_t = std::exp(-suffix(t));
    const Scalar value_next = t + 1 < n ? std::exp(-suffix(t + 1)) : 1.0;
    const Scalar one_step = std::exp(-token_losses(t));
    residuals(t) = std::abs(value_t - one_step * value_next);
  }
  return residuals;
}

Vector bellman_residual(const LossReport& report) {
  if (!report.raw_token_losses) {
    throw std::logic_error("raw losses required");
  }
  return bellman_residual(report.token_losses);
}

PreferenceTrace build_preference_trace(PolicyModel& model,
                                       const TokenSequence& origin,
                                       const TokenSequence& ground_truth,
                                       TraceKind kind,
                                       const TraceOptions& opts) {
  if (model.kind() != ModelKind::DecoderLm) {
    throw std::logic_error("traces need a decoder model");
  }
  if (origin.length() < 1) throw std::invalid_argument("empty prefix");
  if (origin.length() > opts.truncation) {
    throw std::invalid_argument("prompt too long");
  }
  origin.validate(ActionSpace{model.action_count(), {}});

  PreferenceTrace trace;
  trace.origin = origin;
  trace.kind = kind;

  if (kind == TraceKind::SelfRollout) {
    std::vector<int> prefix = origin.tokens;
    while (static_cast<int>(prefix.size()) < opts.truncation) {
      const Vector dist = model.next_action_distribution(prefix);
      const int chosen = argmax_lowest(dist.transpose());
      TokenSequence so_far{prefix, 0};
      trace.steps.push_back(
          TraceStep{so_far.state_id(static_cast<int>(prefix.size())), dist,
                    chosen});
      prefix.push_back(chosen);
      if (opts.eos && chosen == *opts.eos) break;
    }
    return trace;
  }

  // Prior kinds re-score `ground_truth` position by position.
  ground_truth.validate(ActionSpace{model.action_count(), {}});
  const int start = origin.length();
  if (ground_truth.length() <= start) {
    throw std::invalid_argument("ground truth must extend origin");
  }
  for (int i = 0; i < start; ++i) {
    if (ground_truth.tokens[static_cast<std::size_t>(i)] !=
        origin.tokens[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument("ground truth must extend origin");
    }
  }

  TokenSequence batch{ground_truth.tokens, start};
  Matrix rows;
  if (kind == TraceKind::FusedPrior) {
    const std::vector<int> greedy = greedy_one_step_ahead(model, batch);
    ad::NodePtr fused = fuse_states(model, batch, greedy, opts.lambda);
    ad::NodePtr logits = model.logits_from_embeddings(fused);
    rows.resize(batch.target_count(), model.action_count());
    for (int t = start; t < batch.length(); ++t) {
      rows.row(t - start) = logits->value.row(t - 1);
    }
  } else {
    rows = model.target_logits(batch);
  }

  for (int i = 0; i < batch.target_count(); ++i) {
    const int t = start + i;
    const Matrix dist = row_softmax(rows.row(i));
    trace.steps.push_back(TraceStep{ground_truth.state_id(t),
                                    dist.row(0).transpose(),
                                    ground_truth.tokens[static_cast<std::size_t>(t)]});
  }
  return trace;
}

}  // namespace alignlab
