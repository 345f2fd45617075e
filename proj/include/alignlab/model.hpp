#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/autodiff.hpp"
#include "alignlab/core_mdp.hpp"
#include "alignlab/types.hpp"

// The two trainable policies of the lab, behind one interface:
//
//  * GridMlp: two fully connected layers mapping a one-hot cell feature to
//    one logit per move. Rows are independent; no sequence structure.
//  * DecoderLm: token + position embeddings, one single-head causal
//    self-attention block with a residual connection, and a two-layer MLP
//    head. Logits row i is the next-token prediction after position i, so a
//    perturbation of input token t can only influence rows >= t.
//
// Every forward pass, including inference, goes through the same graph
// builder: a "no gradient" pass is simply a graph nobody calls backward on.

namespace alignlab {

enum class ModelKind { GridMlp, DecoderLm };

struct ModelConfig {
  ModelKind kind = ModelKind::DecoderLm;
  int action_count = 0;   // vocabulary size / number of moves
  int input_dim = 0;      // GridMlp: feature width (cell count)
  int embed_dim = 0;      // DecoderLm: embedding width
  int hidden_dim = 0;     // MLP hidden width (both kinds)
  int max_positions = 0;  // DecoderLm: longest supported sequence
  std::uint64_t seed = 0;
};

class PolicyModel {
 public:
  explicit PolicyModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ModelKind kind() const { return config_.kind; }
  int action_count() const { return config_.action_count; }

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// Deep copy with identical parameter values (e.g. a frozen reference).
  PolicyModel clone() const;

  // ----- graph builders (gradients flow) ----------------------------------

  /// DecoderLm only: embedding rows for the given tokens, one per position.
  /// Gradients scatter back into the embedding table.
  ad::NodePtr embed_tokens(const std::vector<int>& tokens) const;

  /// Logits from already-embedded input rows. For DecoderLm, `x` must be
  /// (T x embed_dim) token embeddings; position embeddings are added
  /// inside, and output row i predicts the token at position i+1. For
  /// GridMlp, `x` is (T x input_dim) feature rows and output row i is the
  /// move distribution at input row i. Feeding embed_tokens(tokens) here
  /// reproduces logits_for_tokens(tokens) exactly.
  ad::NodePtr logits_from_embeddings(const ad::NodePtr& x) const;

  /// DecoderLm: logits_from_embeddings(embed_tokens(tokens)).
  ad::NodePtr logits_for_tokens(const std::vector<int>& tokens) const;

  // ----- value-only conveniences (no backward ever called) ----------------

  /// DecoderLm: logits over the next token given a non-empty prefix.
  Vector next_action_logits(const std::vector<int>& prefix_tokens) const;
  /// GridMlp: logits over moves for one cell index.
  Vector action_logits(int cell) const;

  /// Softmax of the respective logits.
  Vector next_action_distribution(const std::vector<int>& prefix_tokens) const;
  Vector action_distribution(int cell) const;

  /// One logits row per target position of `seq` (teacher-forced pass).
  /// Requires prompt_len >= 1 and at least one target position.
  Matrix target_logits(const TokenSequence& seq) const;

  /// One-hot feature rows for GridMlp inputs.
  static Matrix one_hot_rows(const std::vector<int>& cells, int dim);

  // ----- persistence -------------------------------------------------------

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  PolicyModel(const ModelConfig& config, ad::ParamStore params);
  void bind_handles();

  ModelConfig config_;
  ad::ParamStore params_;
  // cached handles into params_
  ad::NodePtr embed_, pos_, wq_, wk_, wv_, wo_, w1_, b1_, w2_, b2_;
};

/// Greedy continuation: appends argmax tokens (ties to the lowest index)
/// until `eos` is produced or `max_new` tokens were emitted. The prefix must
/// be non-empty. Returns only the newly emitted tokens (including the EOS
/// when one is hit).
std::vector<int> greedy_rollout(const PolicyModel& model, std::vector<int> prefix,
                                int max_new, std::optional<int> eos);

}  // namespace alignlab
