#pragma once

#include <optional>
#include <string>
#include <vector>

#include "alignlab/autodiff.hpp"
#include "alignlab/core_mdp.hpp"
#include "alignlab/model.hpp"

// The training objectives, all expressed over one teacher-forced sequence:
//
//  * sft: plain negative log-likelihood of the target tokens.
//  * ift: a single value-only teacher-forced pass picks the greedy token at
//    every target position; the input embedding at each target position is
//    then mixed toward that prediction's embedding ((1-lambda) truth +
//    lambda predicted, a residual connection in time); the per-token losses
//    on the fused input can finally be propagated backwards along the
//    sequence as discounted suffix sums, crediting early tokens with the
//    consequences of later ones. Gradients reach the embedding table
//    through both lookups, never through the argmax that picked the tokens.
//  * dpo: -log(sigmoid(beta * margin)) against a frozen reference model,
//    with the dispreferred sequence either stored (offline) or regenerated
//    from the current policy by greedy rollout (online).
//  * orpo: the sft term plus an odds-ratio term on length-normalized
//    sequence likelihoods; reference-free.

namespace alignlab {

enum class Propagation {
  Off,          // total is just the (normalized) sum of token losses
  SuffixSum,    // w_t = sum_{i>=t} decay^(i-t) * L_i
  ScaledSuffix, // w_t = decay^(N-1-t) * sum_{i>=t} L_i
};

enum class Normalize { PerToken, PerWeightSum, None };

const char* propagation_name(Propagation p);
const char* normalize_name(Normalize n);
Propagation propagation_from_name(const std::string& name);
Normalize normalize_from_name(const std::string& name);

struct LossConfig {
  Scalar lambda = 0.2;   // fusion strength toward the model's own prediction
  Scalar decay = 0.95;   // suffix-sum discount
  Propagation propagation = Propagation::SuffixSum;
  Normalize normalize = Normalize::PerToken;
  Scalar beta = 0.1;     // contrastive temperature (dpo/orpo)
  Scalar orpo_mix = 1.0; // weight of the odds-ratio term next to sft
  // Experimental alternative total: sum_t w_t * L_t instead of sum_t w_t.
  bool dot_product_total = false;

  /// Throws std::invalid_argument on out-of-range values
  /// (lambda in [0,1], decay in (0,1], beta > 0, orpo_mix >= 0).
  void validate() const;
};

/// Everything a training step wants to log about one loss evaluation.
/// `total` is the live graph node; the vectors are detached values.
struct LossReport {
  std::string method;
  Vector token_losses;  // per-target-position negative log-probabilities
  Vector weights;       // propagated weights (empty when propagation is off)
  ad::NodePtr total;
  std::vector<int> fused_greedy_tokens;  // greedy pick per target position
  Vector corollary_gaps;  // max(dist) - dist(target) per evaluated state
  bool raw_token_losses = false;  // token_losses hold plain NLLs

  Scalar total_value() const { return total->value(0, 0); }
};

// ----- building blocks ------------------------------------------------------

/// Greedy next-token choice at every target position, conditioned on the
/// ground-truth prefix (one value-only teacher-forced pass; ties resolve to
/// the lowest token id). Result carries no gradients.
std::vector<int> greedy_one_step_ahead(PolicyModel& model,
                                       const TokenSequence& batch);

/// Token embeddings of `batch` with every target position t mixed as
/// (1 - lambda) * E(truth_t) + lambda * E(predicted_t); prompt positions
/// stay pure. The per-token overload lets callers jitter lambda by
/// position. Throws "invalid mix" when a lambda leaves [0,1].
ad::NodePtr fuse_states(PolicyModel& model, const TokenSequence& batch,
                        const std::vector<int>& predicted, Scalar lambda);
ad::NodePtr fuse_states(PolicyModel& model, const TokenSequence& batch,
                        const std::vector<int>& predicted,
                        const std::vector<Scalar>& lambda_per_token);

/// Propagated weights over a column of per-step losses, as a live graph
/// node (the weights are part of the differentiable total). Throws
/// "no target tokens" on an empty column.
ad::NodePtr propagation_weights(const ad::NodePtr& token_losses, Scalar decay,
                                Propagation mode);

/// Sum over positions of the coefficient each token loss receives in
/// sum_t w_t; the PerWeightSum normalizer divides by this mass.
Scalar weight_coefficient_sum(int count, Scalar decay, Propagation mode);

// ----- objectives -----------------------------------------------------------

LossReport sft_loss(PolicyModel& model, const TokenSequence& batch,
                    const LossConfig& cfg);

/// `lambda_per_token`, when given, overrides cfg.lambda position by
/// position (size must equal the target count).
LossReport ift_loss(PolicyModel& model, const TokenSequence& batch,
                    const LossConfig& cfg,
                    const std::vector<Scalar>* lambda_per_token = nullptr);

enum class DpoMode { Offline, Online };

/// Offline requires a stored `negative`; online ignores it and regenerates
/// the negative by greedy rollout from the shared prompt (capped at
/// `truncation` total positions, stopping early on `eos`). Both sequences
/// must start with the same prompt ("pair prompt mismatch" otherwise), and
/// a reference model is mandatory ("reference required").
LossReport dpo_loss(PolicyModel& model, const PolicyModel* reference,
                    const TokenSequence& positive,
                    const std::optional<TokenSequence>& negative,
                    const LossConfig& cfg, DpoMode mode, int truncation = 64,
                    std::optional<int> eos = std::nullopt);

LossReport orpo_loss(PolicyModel& model, const TokenSequence& positive,
                     const TokenSequence& negative, const LossConfig& cfg);

/// Consistency check on the value/one-step decomposition implied by the
/// exponentiated suffix losses: with V_n = exp(-sum_{i>=n} L_i) and
/// p_n = exp(-L_n), returns |V_n - p_n * V_{n+1}| per position (V beyond
/// the last position is 1). Requires a report that retained raw token
/// losses ("raw losses required"); the vector overload takes the raw
/// per-position losses directly.
Vector bellman_residual(const Vector& token_losses);
Vector bellman_residual(const LossReport& report);

// ----- traces ---------------------------------------------------------------

struct TraceOptions {
  int truncation = 64;          // cap on total sequence length for rollouts
  std::optional<int> eos;       // rollout stop token
  Scalar lambda = 0.2;          // fusion strength for FusedPrior traces
};

/// Walks or re-scores a sequence under the model and records the full
/// action distribution at every step. SelfRollout ignores `ground_truth`
/// and rolls greedily from `origin`; the prior kinds re-score
/// `ground_truth`, which must extend `origin` (share its tokens as a
/// prefix). Distributions are detached values; traces carry no gradients.
PreferenceTrace build_preference_trace(PolicyModel& model,
                                       const TokenSequence& origin,
                                       const TokenSequence& ground_truth,
                                       TraceKind kind,
                                       const TraceOptions& opts);

}  // namespace alignlab
