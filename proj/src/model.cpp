#include "alignlab/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "alignlab/math.hpp"

namespace alignlab {

namespace {

void validate_config(const ModelConfig& c) {
  if (c.action_count <= 0) throw std::invalid_argument("action_count must be positive");
  if (c.hidden_dim <= 0) throw std::invalid_argument("hidden_dim must be positive");
  if (c.kind == ModelKind::GridMlp) {
    if (c.input_dim <= 0) throw std::invalid_argument("input_dim must be positive");
  } else {
    if (c.embed_dim <= 0) throw std::invalid_argument("embed_dim must be positive");
    if (c.max_positions <= 0) throw std::invalid_argument("max_positions must be positive");
  }
}

}  // namespace

PolicyModel::PolicyModel(const ModelConfig& config)
    : config_(config), params_(config.seed) {
  validate_config(config_);
  using ad::InitKind;
  if (config_.kind == ModelKind::GridMlp) {
    w1_ = params_.create("w1", config_.input_dim, config_.hidden_dim,
                         InitKind::UniformFanIn);
    b1_ = params_.create("b1", 1, config_.hidden_dim, InitKind::Zeros);
    w2_ = params_.create("w2", config_.hidden_dim, config_.action_count,
                         InitKind::UniformFanIn);
    b2_ = params_.create("b2", 1, config_.action_count, InitKind::Zeros);
  } else {
    const Scalar embed_bound = 1.0 / std::sqrt(static_cast<Scalar>(config_.embed_dim));
    embed_ = params_.create_uniform("embed", config_.action_count,
                                    config_.embed_dim, embed_bound);
    pos_ = params_.create_uniform("pos", config_.max_positions,
                                  config_.embed_dim, embed_bound);
    wq_ = params_.create("wq", config_.embed_dim, config_.embed_dim,
                         InitKind::UniformFanIn);
    wk_ = params_.create("wk", config_.embed_dim, config_.embed_dim,
                         InitKind::UniformFanIn);
    wv_ = params_.create("wv", config_.embed_dim, config_.embed_dim,
                         InitKind::UniformFanIn);
    wo_ = params_.create("wo", config_.embed_dim, config_.embed_dim,
                         InitKind::UniformFanIn);
    w1_ = params_.create("w1", config_.embed_dim, config_.hidden_dim,
                         InitKind::UniformFanIn);
    b1_ = params_.create("b1", 1, config_.hidden_dim, InitKind::Zeros);
    w2_ = params_.create("w2", config_.hidden_dim, config_.action_count,
                         InitKind::UniformFanIn);
    b2_ = params_.create("b2", 1, config_.action_count, InitKind::Zeros);
  }
}

PolicyModel::PolicyModel(const ModelConfig& config, ad::ParamStore params)
    : config_(config), params_(std::move(params)) {
  bind_handles();
}

void PolicyModel::bind_handles() {
  if (config_.kind == ModelKind::DecoderLm) {
    embed_ = params_.at("embed");
    pos_ = params_.at("pos");
    wq_ = params_.at("wq");
    wk_ = params_.at("wk");
    wv_ = params_.at("wv");
    wo_ = params_.at("wo");
  }
  w1_ = params_.at("w1");
  b1_ = params_.at("b1");
  w2_ = params_.at("w2");
  b2_ = params_.at("b2");
}

PolicyModel PolicyModel::clone() const {
  return PolicyModel(config_, params_.clone());
}

ad::NodePtr PolicyModel::embed_tokens(const std::vector<int>& tokens) const {
  if (config_.kind != ModelKind::DecoderLm) {
    throw std::logic_error("embed_tokens: not a decoder model");
  }
  return ad::gather_rows(embed_, tokens);
}

ad::NodePtr PolicyModel::logits_from_embeddings(const ad::NodePtr& x) const {
  if (config_.kind == ModelKind::GridMlp) {
    if (x->value.cols() != config_.input_dim) {
      throw std::invalid_argument("feature width mismatch");
    }
    auto z = ad::tanh_(ad::add_row_broadcast(ad::matmul(x, w1_), b1_));
    return ad::add_row_broadcast(ad::matmul(z, w2_), b2_);
  }

  const int T = x->rows();
  if (T == 0) throw std::invalid_argument("empty sequence");
  if (x->value.cols() != config_.embed_dim) {
    throw std::invalid_argument("embedding dimension mismatch");
  }
  if (T > config_.max_positions) {
    throw std::invalid_argument("sequence longer than position table");
  }
  std::vector<int> positions(static_cast<std::size_t>(T));
  std::iota(positions.begin(), positions.end(), 0);
  auto xin = ad::add(x, ad::gather_rows(pos_, positions));

  const Scalar inv_sqrt_d =
      1.0 / std::sqrt(static_cast<Scalar>(config_.embed_dim));
  auto q = ad::matmul(xin, wq_);
  auto k = ad::matmul(xin, wk_);
  auto v = ad::matmul(xin, wv_);
  auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d);
  auto attn = ad::row_softmax(scores, /*causal=*/true);
  auto h = ad::add(xin, ad::matmul(ad::matmul(attn, v), wo_));

  auto z = ad::tanh_(ad::add_row_broadcast(ad::matmul(h, w1_), b1_));
  return ad::add_row_broadcast(ad::matmul(z, w2_), b2_);
}

ad::NodePtr PolicyModel::logits_for_tokens(const std::vector<int>& tokens) const {
  if (config_.kind == ModelKind::GridMlp) {
    return logits_from_embeddings(
        ad::constant(one_hot_rows(tokens, config_.input_dim)));
  }
  return logits_from_embeddings(embed_tokens(tokens));
}

Vector PolicyModel::next_action_logits(const std::vector<int>& prefix_tokens) const {
  if (config_.kind != ModelKind::DecoderLm) {
    throw std::logic_error("next_action_logits: not a decoder model");
  }
  if (prefix_tokens.empty()) throw std::invalid_argument("empty prefix");
  ad::NodePtr logits = logits_for_tokens(prefix_tokens);
  return logits->value.row(logits->rows() - 1).transpose();
}

Vector PolicyModel::action_logits(int cell) const {
  if (config_.kind != ModelKind::GridMlp) {
    throw std::logic_error("action_logits: not a grid model");
  }
  ad::NodePtr logits = logits_for_tokens({cell});
  return logits->value.row(0).transpose();
}

Vector PolicyModel::next_action_distribution(
    const std::vector<int>& prefix_tokens) const {
  return row_softmax(next_action_logits(prefix_tokens).transpose())
      .row(0)
      .transpose();
}

Vector PolicyModel::action_distribution(int cell) const {
  return row_softmax(action_logits(cell).transpose()).row(0).transpose();
}

Matrix PolicyModel::target_logits(const TokenSequence& seq) const {
  if (config_.kind != ModelKind::DecoderLm) {
    throw std::logic_error("target_logits: not a decoder model");
  }
  if (seq.prompt_len < 1) throw std::invalid_argument("empty prefix");
  if (seq.target_count() < 1) throw std::invalid_argument("no target tokens");
  ad::NodePtr logits = logits_for_tokens(seq.tokens);
  Matrix out(seq.target_count(), config_.action_count);
  for (int t = seq.prompt_len; t < seq.length(); ++t) {
    out.row(t - seq.prompt_len) = logits->value.row(t - 1);
  }
  return out;
}

Matrix PolicyModel::one_hot_rows(const std::vector<int>& cells, int dim) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(cells.size()), dim);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] < 0 || cells[i] >= dim) {
      throw std::out_of_range("unknown token: " + std::to_string(cells[i]));
    }
    out(static_cast<Eigen::Index>(i), cells[i]) = 1.0;
  }
  return out;
}

void PolicyModel::save_checkpoint(const std::string& path) const {
  params_.save_checkpoint(path);
}

void PolicyModel::load_checkpoint(const std::string& path) {
  params_.load_checkpoint(path);
}

std::vector<int> greedy_rollout(const PolicyModel& model, std::vector<int> prefix,
                                int max_new, std::optional<int> eos) {
  if (prefix.empty()) throw std::invalid_argument("empty prefix");
  std::vector<int> emitted;
  for (int step = 0; step < max_new; ++step) {
    const Vector logits = model.next_action_logits(prefix);
    const int token = argmax_lowest(logits);
    emitted.push_back(token);
    prefix.push_back(token);
    if (eos && token == *eos) break;
  }
  return emitted;
}

}  // namespace alignlab
