#include "alignlab/frozen_lake.hpp"

#include <cmath>
#include <deque>
#include <set>
#include <stdexcept>
#include <utility>

#include "alignlab/math.hpp"

namespace alignlab {

// Map asset + sidecar detour shipped under assets/frozen_lake/ as well; the
// detour wastes one move bumping the left wall, then takes the long corridor.
const char kDefaultMapText[] =
    "SFHFG\n"
    "FFFFF\n"
    "FFFFF\n"
    "FHHHF\n";
const char kDefaultDetourActions[] = "DLDRRRUUR";

const std::vector<std::string> kGridMethods = {
    "sft", "ift", "dpo_offline", "dpo_online", "orpo"};

ActionSpace grid_actions() { return ActionSpace{4, {"U", "D", "L", "R"}}; }

int GridSpec::next_cell(int cell, int action) const {
  const int r = cell / cols;
  const int c = cell % cols;
  int nr = r, nc = c;
  switch (action) {
    case kMoveUp: nr = r - 1; break;
    case kMoveDown: nr = r + 1; break;
    case kMoveLeft: nc = c - 1; break;
    case kMoveRight: nc = c + 1; break;
    default: throw std::invalid_argument("unknown move");
  }
  if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) return cell;  // bump
  return nr * cols + nc;
}

GridSpec parse_grid(const std::string& text) {
  std::vector<std::string> lines;
  std::string line;
  for (char ch : text) {
    if (ch == '\n') {
      lines.push_back(line);
      line.clear();
    } else {
      line.push_back(ch);
    }
  }
  if (!line.empty()) lines.push_back(line);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw std::invalid_argument("empty map");

  GridSpec grid;
  grid.rows = static_cast<int>(lines.size());
  grid.cols = static_cast<int>(lines.front().size());
  int starts = 0, gifts = 0;
  for (const std::string& row : lines) {
    if (static_cast<int>(row.size()) != grid.cols) {
      throw std::invalid_argument("ragged rows");
    }
    for (char ch : row) {
      const int cell = static_cast<int>(grid.cells.size());
      switch (ch) {
        case 'S': ++starts; grid.start = cell; break;
        case 'G': ++gifts; grid.gift = cell; break;
        case 'F': case 'H': break;
        default:
          throw std::invalid_argument(std::string("invalid map character: ") +
                                      ch);
      }
      grid.cells.push_back(ch);
    }
  }
  if (starts != 1) {
    throw std::invalid_argument(starts == 0 ? "missing start cell"
                                            : "multiple start cells");
  }
  if (gifts != 1) {
    throw std::invalid_argument(gifts == 0 ? "missing gift cell"
                                           : "multiple gift cells");
  }
  if (bfs_distances(grid)[static_cast<std::size_t>(grid.start)] < 0) {
    throw std::invalid_argument("no path from start to gift");
  }
  return grid;
}

std::vector<int> bfs_distances(const GridSpec& grid) {
  std::vector<int> dist(static_cast<std::size_t>(grid.cell_count()), -1);
  std::deque<int> frontier;
  dist[static_cast<std::size_t>(grid.gift)] = 0;
  frontier.push_back(grid.gift);
  while (!frontier.empty()) {
    const int cell = frontier.front();
    frontier.pop_front();
    for (int move = 0; move < 4; ++move) {
      // A neighbor reaches `cell` by the opposite move; adjacency is
      // symmetric, so expanding with each move from `cell` finds them all.
      const int n = grid.next_cell(cell, move);
      if (n == cell || grid.is_terminal(n)) continue;
      if (dist[static_cast<std::size_t>(n)] >= 0) continue;
      dist[static_cast<std::size_t>(n)] =
          dist[static_cast<std::size_t>(cell)] + 1;
      frontier.push_back(n);
    }
  }
  return dist;
}

std::vector<int> reachable_cells(const GridSpec& grid) {
  std::vector<int> order;
  std::vector<char> seen(static_cast<std::size_t>(grid.cell_count()), 0);
  std::deque<int> frontier;
  seen[static_cast<std::size_t>(grid.start)] = 1;
  frontier.push_back(grid.start);
  while (!frontier.empty()) {
    const int cell = frontier.front();
    frontier.pop_front();
    if (grid.is_terminal(cell)) continue;
    order.push_back(cell);
    for (int move = 0; move < 4; ++move) {
      const int n = grid.next_cell(cell, move);
      if (seen[static_cast<std::size_t>(n)]) continue;
      seen[static_cast<std::size_t>(n)] = 1;
      frontier.push_back(n);
    }
  }
  return order;
}

ValueIterationResult value_iteration(const GridSpec& grid, Scalar discount,
                                     Scalar tolerance, int max_sweeps) {
  if (!(discount > 0.0 && discount < 1.0)) {
    throw std::invalid_argument("discount must lie in (0, 1)");
  }
  const int n = grid.cell_count();
  ValueIterationResult out;
  out.values = Vector::Zero(n);

  auto action_value = [&](const Vector& v, int cell, int move) {
    const int next = grid.next_cell(cell, move);
    const Scalar reward = grid.is_gift(next) ? 1.0 : 0.0;
    const Scalar future = grid.is_terminal(next) ? 0.0 : v(next);
    return reward + discount * future;
  };

  for (out.sweeps = 1; out.sweeps <= max_sweeps; ++out.sweeps) {
    Vector next = Vector::Zero(n);
    Scalar delta = 0.0;
    for (int cell = 0; cell < n; ++cell) {
      if (grid.is_terminal(cell)) continue;
      Scalar best = action_value(out.values, cell, 0);
      for (int move = 1; move < 4; ++move) {
        best = std::max(best, action_value(out.values, cell, move));
      }
      next(cell) = best;
      delta = std::max(delta, std::abs(best - out.values(cell)));
    }
    out.values = next;
    if (delta < tolerance) break;
  }
  if (out.sweeps > max_sweeps) {
    throw std::runtime_error("value iteration did not converge");
  }

  out.greedy_actions.assign(static_cast<std::size_t>(n), -1);
  for (int cell = 0; cell < n; ++cell) {
    if (grid.is_terminal(cell)) continue;
    Vector q(4);
    for (int move = 0; move < 4; ++move) {
      q(move) = action_value(out.values, cell, move);
    }
    out.greedy_actions[static_cast<std::size_t>(cell)] =
        argmax_lowest(q);
    const Scalar qmax = q.maxCoeff();
    const Scalar tie_eps = 1e-9 * std::max(Scalar{1}, std::abs(qmax));
    Vector row = Vector::Zero(4);
    int ties = 0;
    for (int move = 0; move < 4; ++move) {
      if (qmax - q(move) <= tie_eps) {
        row(move) = 1.0;
        ++ties;
      }
    }
    row /= static_cast<Scalar>(ties);
    out.oracle_policy.add_row(grid.cell_id(cell), row);
  }
  return out;
}

namespace {

int move_from_letter(char letter) {
  switch (letter) {
    case 'U': return kMoveUp;
    case 'D': return kMoveDown;
    case 'L': return kMoveLeft;
    case 'R': return kMoveRight;
    default:
      throw std::invalid_argument(std::string("unknown move letter: ") +
                                  letter);
  }
}

}  // namespace

GridTrajectory trajectory_from_actions(const GridSpec& grid,
                                       const std::string& letters) {
  if (letters.empty()) throw std::invalid_argument("empty action string");
  GridTrajectory walk;
  walk.cells.push_back(grid.start);
  for (std::size_t i = 0; i < letters.size(); ++i) {
    const int cell = walk.cells.back();
    if (grid.is_terminal(cell)) {
      throw std::invalid_argument("walk continues past a terminal cell");
    }
    const int move = move_from_letter(letters[i]);
    walk.actions.push_back(move);
    walk.cells.push_back(grid.next_cell(cell, move));
  }
  const int last = walk.cells.back();
  if (grid.is_hole(last)) {
    throw std::invalid_argument("walk ends in a hole");
  }
  if (!grid.is_gift(last)) {
    throw std::invalid_argument("walk must end on the gift");
  }
  walk.terminal = TerminalKind::Gift;
  return walk;
}

GridTrajectory greedy_trajectory(const GridSpec& grid,
                                 const std::vector<int>& move_per_cell,
                                 int cap) {
  GridTrajectory walk;
  walk.cells.push_back(grid.start);
  while (walk.step_count() < cap) {
    const int cell = walk.cells.back();
    if (grid.is_terminal(cell)) break;
    const int move = move_per_cell[static_cast<std::size_t>(cell)];
    walk.actions.push_back(move);
    walk.cells.push_back(grid.next_cell(cell, move));
  }
  const int last = walk.cells.back();
  walk.terminal = grid.is_gift(last)   ? TerminalKind::Gift
                  : grid.is_hole(last) ? TerminalKind::Hole
                                       : TerminalKind::Truncated;
  return walk;
}

TrajectoryPair make_trajectories(const GridSpec& grid,
                                 const ValueIterationResult& vi,
                                 const std::optional<std::string>& detour_letters) {
  if (!detour_letters.has_value() || detour_letters->empty()) {
    throw std::invalid_argument("suboptimal path required for pairwise losses");
  }
  TrajectoryPair pair;
  pair.optimal = greedy_trajectory(grid, vi.greedy_actions, grid.cell_count());
  if (pair.optimal.terminal != TerminalKind::Gift) {
    throw std::logic_error("oracle walk does not reach the gift");
  }
  pair.detour = trajectory_from_actions(grid, *detour_letters);
  if (pair.detour.step_count() <= pair.optimal.step_count()) {
    throw std::invalid_argument("detour must be longer than the optimal walk");
  }
  return pair;
}

namespace {

// One-hot feature row per visited cell (the final arrival cell carries no
// action, so only the first step_count() cells become inputs).
Matrix walk_features(const GridSpec& grid, const GridTrajectory& walk) {
  std::vector<int> inputs(walk.cells.begin(),
                          walk.cells.end() - 1);
  return PolicyModel::one_hot_rows(inputs, grid.cell_count());
}

std::vector<std::pair<int, int>> walk_picks(const GridTrajectory& walk) {
  std::vector<std::pair<int, int>> picks;
  picks.reserve(walk.actions.size());
  for (int i = 0; i < walk.step_count(); ++i) {
    picks.emplace_back(i, walk.actions[static_cast<std::size_t>(i)]);
  }
  return picks;
}

ad::NodePtr walk_nll(const PolicyModel& model, const Matrix& features,
                     const GridTrajectory& walk) {
  auto logits = model.logits_from_embeddings(ad::constant(features));
  return ad::neg(
      ad::pick_entries(ad::row_log_softmax(logits), walk_picks(walk)));
}

ad::NodePtr walk_logprob(const PolicyModel& model, const GridSpec& grid,
                         const GridTrajectory& walk) {
  auto logits = model.logits_from_embeddings(
      ad::constant(walk_features(grid, walk)));
  return ad::sum(
      ad::pick_entries(ad::row_log_softmax(logits), walk_picks(walk)));
}

Scalar detached_walk_logprob(const PolicyModel& model, const GridSpec& grid,
                             const GridTrajectory& walk) {
  const Matrix feats = walk_features(grid, walk);
  const Matrix logits =
      model.logits_from_embeddings(ad::constant(feats))->value;
  const Matrix logp = row_log_softmax(logits);
  Scalar total = 0.0;
  for (int i = 0; i < walk.step_count(); ++i) {
    total += logp(i, walk.actions[static_cast<std::size_t>(i)]);
  }
  return total;
}

ad::NodePtr normalized_total(const ad::NodePtr& column, Normalize norm,
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

// Mixed features for the fused objective: position t blends the walk's true
// cell with the cell the greedy policy would actually have reached from the
// previous true cell. Position 0 has no predecessor and stays pure.
Matrix fused_walk_features(const PolicyModel& model, const GridSpec& grid,
                           const GridTrajectory& walk, Scalar lambda) {
  Matrix feats = walk_features(grid, walk);
  for (int t = 1; t < walk.step_count(); ++t) {
    const int prev = walk.cells[static_cast<std::size_t>(t - 1)];
    const int greedy =
        argmax_lowest(model.action_logits(prev));
    const int reached = grid.next_cell(prev, greedy);
    Vector mixed = Vector::Zero(grid.cell_count());
    mixed(walk.cells[static_cast<std::size_t>(t)]) += 1.0 - lambda;
    mixed(reached) += lambda;
    feats.row(t) = mixed.transpose();
  }
  return feats;
}

ad::NodePtr grid_log_odds(const ad::NodePtr& logp_sum, int count) {
  auto m = ad::scale(logp_sum, 1.0 / static_cast<Scalar>(count));
  return ad::sub(m, ad::log_(ad::sub_from_scalar(1.0, ad::exp_(m))));
}

}  // namespace

GridTrainResult train_grid_policy(const std::string& method,
                                  const FrozenLakeConfig& cfg) {
  bool known = false;
  for (const std::string& m : kGridMethods) known = known || m == method;
  if (!known) throw std::invalid_argument("unknown method: " + method);
  cfg.loss.validate();
  if (cfg.epochs < 1 || cfg.lr <= 0.0 || cfg.hidden_dim < 1 ||
      cfg.rollouts < 1 || cfg.rollout_cap < 1) {
    throw std::invalid_argument("invalid training configuration");
  }

  const GridSpec& grid = cfg.grid;
  ValueIterationResult vi = value_iteration(grid, cfg.discount);

  const bool pairwise = method != "sft" && method != "ift";
  GridTrajectory optimal =
      greedy_trajectory(grid, vi.greedy_actions, grid.cell_count());
  if (optimal.terminal != TerminalKind::Gift) {
    throw std::logic_error("oracle walk does not reach the gift");
  }
  GridTrajectory detour;
  if (pairwise) {
    if (!cfg.detour_letters.has_value() || cfg.detour_letters->empty()) {
      throw std::invalid_argument(
          "suboptimal path required for pairwise losses");
    }
    detour = trajectory_from_actions(grid, *cfg.detour_letters);
  }

  ModelConfig mc;
  mc.kind = ModelKind::GridMlp;
  mc.action_count = 4;
  mc.input_dim = grid.cell_count();
  mc.hidden_dim = cfg.hidden_dim;
  mc.seed = cfg.seed;
  PolicyModel model(mc);
  PolicyModel reference = model.clone();  // frozen at initialization

  const Matrix pure_feats = walk_features(grid, optimal);
  const int n_steps = optimal.step_count();
  const Scalar weight_mass =
      cfg.loss.propagation == Propagation::Off
          ? static_cast<Scalar>(n_steps)
          : weight_coefficient_sum(n_steps, cfg.loss.decay,
                                   cfg.loss.propagation);

  const Scalar ref_opt = pairwise
      ? detached_walk_logprob(reference, grid, optimal) : 0.0;
  const Scalar ref_det = method == "dpo_offline"
      ? detached_walk_logprob(reference, grid, detour) : 0.0;

  GridTrainResult result;
  result.method = method;
  result.seed = cfg.seed;
  result.loss_curve.reserve(static_cast<std::size_t>(cfg.epochs));

  ad::RmsProp opt(cfg.lr);
  ad::NodePtr nll;  // per-step losses of the preferred walk (when built)
  ad::NodePtr weights;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    nll.reset();
    weights.reset();
    ad::NodePtr total;

    if (method == "sft") {
      nll = walk_nll(model, pure_feats, optimal);
      total = normalized_total(nll, cfg.loss.normalize, n_steps,
                               static_cast<Scalar>(n_steps));
    } else if (method == "ift") {
      const Matrix fused =
          fused_walk_features(model, grid, optimal, cfg.loss.lambda);
      nll = walk_nll(model, fused, optimal);
      if (cfg.loss.propagation == Propagation::Off) {
        total = normalized_total(nll, cfg.loss.normalize, n_steps,
                                 static_cast<Scalar>(n_steps));
      } else {
        weights =
            propagation_weights(nll, cfg.loss.decay, cfg.loss.propagation);
        const ad::NodePtr summand = cfg.loss.dot_product_total
                                        ? ad::cwise_mul(weights, nll)
                                        : weights;
        total = normalized_total(summand, cfg.loss.normalize, n_steps,
                                 weight_mass);
      }
    } else if (method == "dpo_offline" || method == "dpo_online") {
      GridTrajectory negative = detour;
      Scalar ref_neg = ref_det;
      if (method == "dpo_online") {
        std::vector<int> greedy_now(
            static_cast<std::size_t>(grid.cell_count()), 0);
        for (int cell = 0; cell < grid.cell_count(); ++cell) {
          if (grid.is_terminal(cell)) continue;
          greedy_now[static_cast<std::size_t>(cell)] =
              argmax_lowest(model.action_logits(cell));
        }
        negative = greedy_trajectory(grid, greedy_now, cfg.rollout_cap);
        ref_neg = detached_walk_logprob(reference, grid, negative);
      }
      nll = walk_nll(model, pure_feats, optimal);
      auto margin = ad::scale(
          ad::sub(ad::sub(walk_logprob(model, grid, optimal),
                          ad::constant_scalar(ref_opt)),
                  ad::sub(walk_logprob(model, grid, negative),
                          ad::constant_scalar(ref_neg))),
          cfg.loss.beta);
      total = ad::neg(ad::log_sigmoid_(margin));
    } else {  // orpo
      nll = walk_nll(model, pure_feats, optimal);
      auto sft_part = normalized_total(nll, cfg.loss.normalize, n_steps,
                                       static_cast<Scalar>(n_steps));
      if (cfg.loss.orpo_mix == 0.0) {
        total = sft_part;
      } else {
        auto gap = ad::sub(
            grid_log_odds(walk_logprob(model, grid, optimal), n_steps),
            grid_log_odds(walk_logprob(model, grid, detour),
                          detour.step_count()));
        auto contrast = ad::neg(ad::log_sigmoid_(ad::scale(gap, cfg.loss.beta)));
        total = ad::add(sft_part, ad::scale(contrast, cfg.loss.orpo_mix));
      }
    }

    const Scalar value = total->value(0, 0);
    if (!std::isfinite(value)) {
      throw std::runtime_error("non-finite loss at epoch " +
                               std::to_string(epoch));
    }
    result.loss_curve.push_back(value);
    model.params().zero_grad();
    ad::backward(total);
    opt.step(model.params());
  }

  result.final_loss = result.loss_curve.back();
  if (nll) result.final_token_losses = nll->value.col(0);
  if (weights) result.final_weights = weights->value.col(0);

  result.mse = policy_mse(model, grid, vi.oracle_policy);
  result.coverage = static_cast<Scalar>(
      exploration_coverage(model, grid, cfg.rollouts, cfg.rollout_cap));
  result.steps = greedy_episode_length(model, grid, cfg.rollout_cap);

  result.corollary_all_hold = true;
  for (int cell : reachable_cells(grid)) {
    const Vector dist = model.action_distribution(cell);
    const CorollaryResult check = corollary_check(
        dist, vi.greedy_actions[static_cast<std::size_t>(cell)]);
    result.corollary_all_hold = result.corollary_all_hold && check.holds &&
                                std::isfinite(check.gap);
  }
  result.learned_policy = learned_policy_table(model, grid);
  return result;
}

Scalar policy_mse(const PolicyModel& model, const GridSpec& grid,
                  const TransitionTable& oracle) {
  const std::vector<int> cells = reachable_cells(grid);
  Scalar total = 0.0;
  for (int cell : cells) {
    const Vector dist = model.action_distribution(cell);
    const Vector& target = oracle.row(grid.cell_id(cell));
    total += (dist - target).squaredNorm();
  }
  return total / (static_cast<Scalar>(cells.size()) * 4.0);
}

int exploration_coverage(const PolicyModel& model, const GridSpec& grid,
                         int rollouts, int cap, std::uint64_t seed) {
  if (rollouts < 1) throw std::invalid_argument("rollouts must be positive");
  Rng rng(seed);
  std::set<int> visited;
  for (int r = 0; r < rollouts; ++r) {
    int cell = grid.start;
    visited.insert(cell);
    for (int step = 0; step < cap; ++step) {
      if (grid.is_terminal(cell)) break;
      int move;
      if (r > 0 && rng.uniform() < 0.1) {
        move = rng.uniform_int(4);
      } else {
        move = argmax_lowest(model.action_logits(cell));
      }
      cell = grid.next_cell(cell, move);
      visited.insert(cell);
    }
  }
  return static_cast<int>(visited.size());
}

int greedy_episode_length(const PolicyModel& model, const GridSpec& grid,
                          int cap) {
  int cell = grid.start;
  int steps = 0;
  while (steps < cap && !grid.is_terminal(cell)) {
    const int move = argmax_lowest(model.action_logits(cell));
    cell = grid.next_cell(cell, move);
    ++steps;
  }
  return steps;
}

TransitionTable learned_policy_table(const PolicyModel& model,
                                     const GridSpec& grid) {
  TransitionTable table;
  for (int cell = 0; cell < grid.cell_count(); ++cell) {
    if (grid.is_terminal(cell)) continue;
    table.add_row(grid.cell_id(cell), model.action_distribution(cell));
  }
  return table;
}

}  // namespace alignlab
