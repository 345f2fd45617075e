#include "alignlab/core_mdp.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace alignlab {

std::string TokenSequence::state_id(int prefix_len) const {
  if (prefix_len < 0 || prefix_len > length()) {
    throw std::out_of_range("state_id: prefix length out of range");
  }
  std::string id;
  for (int i = 0; i < prefix_len; ++i) {
    if (i > 0) id.push_back(',');
    id += std::to_string(tokens[i]);
  }
  return id;
}

void TokenSequence::validate(const ActionSpace& actions) const {
  if (prompt_len < 0 || prompt_len > length()) {
    throw std::invalid_argument("prompt_len out of range");
  }
  for (int t : tokens) {
    if (!actions.contains(t)) {
      throw std::invalid_argument("unknown token: " + std::to_string(t));
    }
  }
}

void TransitionTable::add_row(const std::string& state_id, Vector distribution) {
  if (index_.count(state_id)) {
    throw std::invalid_argument("duplicate state: " + state_id);
  }
  if (distribution.size() == 0) {
    throw std::invalid_argument("invalid distribution");
  }
  Scalar sum = 0.0;
  for (Eigen::Index i = 0; i < distribution.size(); ++i) {
    const Scalar p = distribution(i);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("invalid distribution");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw std::invalid_argument("invalid distribution");
  }
  index_.emplace(state_id, ids_.size());
  ids_.push_back(state_id);
  rows_.push_back(std::move(distribution));
}

bool TransitionTable::has_row(const std::string& state_id) const {
  return index_.count(state_id) != 0;
}

const Vector& TransitionTable::row(const std::string& state_id) const {
  auto it = index_.find(state_id);
  if (it == index_.end()) {
    throw std::out_of_range("unknown state: " + state_id);
  }
  return rows_[it->second];
}

void TransitionTable::save(std::ostream& out) const {
  char buf[64];
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    out << ids_[i] << '\t';
    const Vector& r = rows_[i];
    for (Eigen::Index j = 0; j < r.size(); ++j) {
      if (j > 0) out << ' ';
      std::snprintf(buf, sizeof(buf), "%.9g", r(j));
      out << buf;
    }
    out << '\n';
  }
}

void TransitionTable::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  save(out);
}

TransitionTable TransitionTable::load(std::istream& in) {
  TransitionTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::invalid_argument("malformed table line: " + line);
    }
    const std::string id = line.substr(0, tab);
    std::istringstream vals(line.substr(tab + 1));
    std::vector<Scalar> probs;
    Scalar p;
    while (vals >> p) probs.push_back(p);
    Vector row(static_cast<Eigen::Index>(probs.size()));
    for (std::size_t j = 0; j < probs.size(); ++j) {
      row(static_cast<Eigen::Index>(j)) = probs[j];
    }
    table.add_row(id, std::move(row));
  }
  return table;
}

TransitionTable TransitionTable::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return load(in);
}

const char* trace_kind_name(TraceKind kind) {
  switch (kind) {
    case TraceKind::SelfRollout: return "self_rollout";
    case TraceKind::GroundTruthPrior: return "ground_truth_prior";
    case TraceKind::FusedPrior: return "fused_prior";
    case TraceKind::StoredNegative: return "stored_negative";
  }
  return "unknown";
}

std::vector<int> PreferenceTrace::actions() const {
  std::vector<int> out;
  out.reserve(steps.size());
  for (const TraceStep& s : steps) out.push_back(s.chosen);
  return out;
}

CorollaryResult corollary_check(const Vector& distribution, int target) {
  if (distribution.size() == 0) {
    throw std::invalid_argument("invalid distribution");
  }
  Scalar sum = 0.0;
  for (Eigen::Index i = 0; i < distribution.size(); ++i) {
    const Scalar p = distribution(i);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("invalid distribution");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw std::invalid_argument("invalid distribution");
  }
  if (target < 0 || target >= distribution.size()) {
    throw std::out_of_range("target action out of range");
  }
  CorollaryResult result;
  result.gap = distribution.maxCoeff() - distribution(target);
  result.holds = result.gap >= 0.0;
  return result;
}

Scalar sequence_transition_prob(const TransitionTable& table,
                                const TokenSequence& seq) {
  Scalar prob = 1.0;
  for (int t = seq.prompt_len; t < seq.length(); ++t) {
    const Vector& row = table.row(seq.state_id(t));
    const int action = seq.tokens[static_cast<std::size_t>(t)];
    if (action < 0 || action >= row.size()) {
      throw std::out_of_range("unknown token: " + std::to_string(action));
    }
    prob *= row(action);
  }
  return prob;
}

}  // namespace alignlab
