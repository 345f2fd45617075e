#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/core_mdp.hpp"
#include "alignlab/losses.hpp"
#include "alignlab/model.hpp"
#include "alignlab/types.hpp"

// A small gridworld testbed. Cells are S (start), F (frozen, walkable),
// H (hole, terminal), G (gift, terminal, reward 1 on entry). Moves are
// deterministic; walking off the edge leaves the agent in place. Value
// iteration provides the exact optimal policy, so a trained policy table can
// be scored against a closed-form oracle.

namespace alignlab {

inline constexpr int kMoveUp = 0;
inline constexpr int kMoveDown = 1;
inline constexpr int kMoveLeft = 2;
inline constexpr int kMoveRight = 3;

/// The four grid moves, labelled U/D/L/R.
ActionSpace grid_actions();

struct GridSpec {
  int rows = 0;
  int cols = 0;
  std::string cells;  // row-major map characters
  int start = 0;
  int gift = 0;

  int cell_count() const { return rows * cols; }
  char at(int cell) const { return cells[static_cast<std::size_t>(cell)]; }
  bool is_hole(int cell) const { return at(cell) == 'H'; }
  bool is_gift(int cell) const { return at(cell) == 'G'; }
  bool is_terminal(int cell) const { return is_hole(cell) || is_gift(cell); }

  /// Deterministic move; bumping into the boundary stays in place.
  int next_cell(int cell, int action) const;

  /// State id used in transition tables: the cell index in decimal.
  std::string cell_id(int cell) const { return std::to_string(cell); }
};

/// Built-in default map and its hand-written detour (the dispreferred
/// trajectory used by the pairwise objectives). The same text lives under
/// assets/frozen_lake/ so external tools can load it from disk.
extern const char kDefaultMapText[];
extern const char kDefaultDetourActions[];

/// Parses a map drawing, one row per line. Throws std::invalid_argument on
/// ragged rows, characters outside SFHG, a missing/duplicate S or G, or a
/// start that cannot reach the gift.
GridSpec parse_grid(const std::string& text);

struct ValueIterationResult {
  Vector values;                    // optimal state value per cell, 0 at terminals
  int sweeps = 0;                   // synchronous sweeps until sup-norm < tol
  std::vector<int> greedy_actions;  // lowest-index argmax move; -1 at terminals
  TransitionTable oracle_policy;    // one row per non-terminal cell; ties uniform
};

ValueIterationResult value_iteration(const GridSpec& grid,
                                     Scalar discount = 0.9,
                                     Scalar tolerance = 1e-9,
                                     int max_sweeps = 1000);

/// Fewest moves from each cell to the gift (0 at the gift itself); -1 for
/// holes and unreachable cells.
std::vector<int> bfs_distances(const GridSpec& grid);

/// Non-terminal cells reachable from the start, in BFS order.
std::vector<int> reachable_cells(const GridSpec& grid);

enum class TerminalKind { Gift, Hole, Truncated };

struct GridTrajectory {
  std::vector<int> cells;    // visited cells; cells.size() == actions.size() + 1
  std::vector<int> actions;  // move taken at cells[i]
  TerminalKind terminal = TerminalKind::Truncated;

  int step_count() const { return static_cast<int>(actions.size()); }
};

/// Walks `letters` (U/D/L/R per move) from the start. Throws
/// std::invalid_argument on unknown letters, a walk through a hole before
/// the final cell, or a walk that does not end on the gift.
GridTrajectory trajectory_from_actions(const GridSpec& grid,
                                       const std::string& letters);

/// Follows `move_per_cell` greedily from the start until a terminal cell or
/// `cap` moves.
GridTrajectory greedy_trajectory(const GridSpec& grid,
                                 const std::vector<int>& move_per_cell,
                                 int cap);

struct TrajectoryPair {
  GridTrajectory optimal;  // greedy walk of the value-iteration policy
  GridTrajectory detour;   // hand-written dispreferred walk
};

/// Builds the preferred/dispreferred training pair. `detour_letters` is
/// required ("suboptimal path required for pairwise losses" otherwise).
TrajectoryPair make_trajectories(const GridSpec& grid,
                                 const ValueIterationResult& vi,
                                 const std::optional<std::string>& detour_letters);

extern const std::vector<std::string> kGridMethods;  // sft ift dpo_offline dpo_online orpo

struct FrozenLakeConfig {
  GridSpec grid;
  std::optional<std::string> detour_letters;  // needed by dpo_*/orpo
  LossConfig loss;
  int epochs = 400;
  Scalar lr = 5e-3;
  int hidden_dim = 32;
  Scalar discount = 0.9;
  int rollouts = 8;      // exploration rollouts for the coverage metric
  int rollout_cap = 32;  // step cap per rollout / greedy episode
  std::uint64_t seed = 1;
};

struct GridTrainResult {
  std::string method;
  std::uint64_t seed = 0;
  Scalar mse = 0.0;       // policy table vs oracle, reachable cells x moves
  Scalar coverage = 0.0;  // distinct cells visited over the rollout budget
  int steps = 0;          // greedy episode length after training (capped)
  Scalar final_loss = 0.0;
  bool corollary_all_hold = false;  // greedy-dominance check at every cell
  std::vector<Scalar> loss_curve;   // one entry per epoch
  Vector final_token_losses;        // per-step losses on the preferred walk
  Vector final_weights;             // propagated weights (ift only)
  TransitionTable learned_policy;
};

/// Trains one policy on the default trajectory pair with the chosen
/// objective. Methods: sft, ift, dpo_offline, dpo_online, orpo. The same
/// seed gives every method an identical initial model, so cross-method
/// comparisons are paired. Throws std::runtime_error("non-finite loss at
/// epoch N") if the objective diverges.
GridTrainResult train_grid_policy(const std::string& method,
                                  const FrozenLakeConfig& cfg);

/// Mean squared difference between the model's move distribution and the
/// oracle row over reachable non-terminal cells (all four moves).
Scalar policy_mse(const PolicyModel& model, const GridSpec& grid,
                  const TransitionTable& oracle);

/// Number of distinct cells touched over `rollouts` episodes from the
/// start: the first episode is greedy, later ones take a uniform random
/// move with probability 0.1 (fixed internal seed, so the metric is a pure
/// function of the policy). Episodes stop at a terminal cell or after
/// `cap` moves.
int exploration_coverage(const PolicyModel& model, const GridSpec& grid,
                         int rollouts, int cap,
                         std::uint64_t seed = 0x5EEDC0DEULL);

/// Moves the greedy policy takes from the start until a terminal cell, at
/// most `cap`.
int greedy_episode_length(const PolicyModel& model, const GridSpec& grid,
                          int cap);

/// Softmax move distribution per non-terminal cell, as a transition table.
TransitionTable learned_policy_table(const PolicyModel& model,
                                     const GridSpec& grid);

}  // namespace alignlab
