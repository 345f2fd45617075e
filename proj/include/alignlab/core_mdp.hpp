#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "alignlab/types.hpp"

// Token-level decision-process vocabulary shared by every trainer in the
// project. A state is a prefix (of tokens, or a grid cell), an action is the
// next token, and a policy is a row-stochastic table over actions per state.

namespace alignlab {

/// Discrete action vocabulary. For sequence tasks the actions are token ids;
/// for the gridworld they are the four moves.
struct ActionSpace {
  int size = 0;
  std::vector<std::string> labels;  // optional, purely cosmetic

  bool contains(int action) const { return action >= 0 && action < size; }
};

/// A prompt plus continuation. Positions [0, prompt_len) are the fixed
/// instruction; positions [prompt_len, size) are the supervised targets.
struct TokenSequence {
  std::vector<int> tokens;
  int prompt_len = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  int target_count() const { return length() - prompt_len; }

  /// Canonical state identifier for the prefix tokens[0, prefix_len):
  /// comma-joined token ids ("3,7,4"). Empty prefix -> "".
  std::string state_id(int prefix_len) const;

  /// Throws std::invalid_argument unless 0 <= prompt_len <= size and all
  /// tokens lie in [0, actions.size).
  void validate(const ActionSpace& actions) const;
};

/// Row-stochastic action distribution per state. Rows keep insertion order
/// so serialized tables are deterministic and diff-friendly.
class TransitionTable {
 public:
  /// Throws std::invalid_argument on duplicate state ids, negative entries,
  /// or rows that do not sum to 1 within 1e-6.
  void add_row(const std::string& state_id, Vector distribution);

  bool has_row(const std::string& state_id) const;
  const Vector& row(const std::string& state_id) const;  // throws "unknown state"

  int row_count() const { return static_cast<int>(ids_.size()); }
  const std::vector<std::string>& state_ids() const { return ids_; }

  /// Text form, one row per line: `state_id<TAB>p_0 p_1 ...` with nine
  /// significant digits per probability.
  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;
  static TransitionTable load(std::istream& in);
  static TransitionTable load_file(const std::string& path);

 private:
  std::vector<std::string> ids_;
  std::vector<Vector> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// How a preference trace was produced.
enum class TraceKind {
  SelfRollout,      // greedy rollout of the policy from the origin prompt
  GroundTruthPrior, // policy evaluated on each ground-truth prefix
  FusedPrior,       // policy evaluated on mixed ground-truth/greedy embeddings
  StoredNegative,   // policy evaluated on a stored (dispreferred) sequence
};

const char* trace_kind_name(TraceKind kind);

/// One step of a trace: the state the estimator stood in, the full action
/// distribution it emitted there, and the action the traced sequence took.
struct TraceStep {
  std::string state_id;
  Vector distribution;
  int chosen = -1;
};

/// Diagnostic record of how a policy walks (or re-scores) a sequence.
/// Distributions are recorded by value; nothing here carries gradients.
struct PreferenceTrace {
  TokenSequence origin;
  std::vector<TraceStep> steps;
  TraceKind kind = TraceKind::SelfRollout;

  /// The traced action sequence (chosen token per step).
  std::vector<int> actions() const;
};

/// Result of the greedy-dominance check on one distribution.
struct CorollaryResult {
  bool holds = false;  // max probability >= probability of the target action
  Scalar gap = 0.0;    // max(dist) - dist(target), >= 0 whenever holds
};

/// Validates that `distribution` is a distribution (sum within 1e-6 of one,
/// entries in [0,1]) and reports the greedy-dominance gap for `target`.
/// Throws std::invalid_argument("invalid distribution") on malformed input
/// and std::out_of_range on a target outside the support.
CorollaryResult corollary_check(const Vector& distribution, int target);

/// Probability the table assigns to the whole continuation: the product of
/// row[state(prefix)][token] over every target position. Empty target -> 1.
/// Throws std::out_of_range("unknown state: ...") when a prefix has no row.
Scalar sequence_transition_prob(const TransitionTable& table,
                                const TokenSequence& seq);

}  // namespace alignlab
