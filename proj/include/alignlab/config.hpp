#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignlab/losses.hpp"
#include "alignlab/toy_lm.hpp"
#include "alignlab/types.hpp"

// Flat key=value configuration with [section] headers. No quoting, no
// nesting: every value round-trips bit-exactly through canonical_config, so
// a run can be reproduced from its own echo.

namespace alignlab {

struct FrozenLakeSection {
  std::string map;     // path to a map drawing; empty -> built-in default
  std::string detour;  // detour move letters; empty -> built-in default
  int epochs = 400;
  Scalar lr = 3e-3;
  int hidden_dim = 48;
  Scalar discount = 0.9;
  int rollouts = 8;
  int rollout_cap = 32;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::string> methods = {"sft", "ift", "dpo_offline", "orpo"};
};

struct ToyLmSection {
  CorpusSpec corpus;
  int epochs = 350;
  int batch = 4;
  Scalar lr = 3e-3;
  int embed_dim = 16;
  int hidden_dim = 32;
  int max_positions = 16;
  int eval_every = 25;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::string> methods = {"sft", "ift"};
};

struct LabConfig {
  LossConfig loss;         // loss.beta is per-method; see the accessors
  Scalar beta_dpo = 0.1;
  Scalar beta_orpo = 0.25;
  FrozenLakeSection frozen_lake;
  ToyLmSection toy_lm;

  LossConfig loss_for_dpo() const;   // loss with beta = beta_dpo
  LossConfig loss_for_orpo() const;  // loss with beta = beta_orpo

  /// Throws std::invalid_argument on any out-of-range value.
  void validate() const;
};

/// Parses config text. Unknown keys are all collected and rejected in one
/// message ("unknown config keys: ..."). An empty file yields the defaults.
LabConfig parse_config(const std::string& text);

/// Reads `path` (empty path -> defaults) and applies `overrides` in order.
/// Each override is `key=value` or `section.key=value`; one argument may
/// carry several whitespace-separated pairs. Bare keys must be unambiguous
/// across sections. The result is validated.
LabConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides);

/// Applies one override argument to an already-parsed config.
void apply_override(LabConfig& config, const std::string& override_arg);

/// Canonical echo: every key in fixed order, reals in shortest
/// round-trip form. parse_config(canonical_config(c)) == c.
std::string canonical_config(const LabConfig& config);

/// FNV-1a 64 over the canonical echo, as 16 hex digits.
std::string config_hash(const LabConfig& config);

}  // namespace alignlab
