#include "alignlab/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "alignlab/math.hpp"

namespace alignlab::ad {

namespace {

NodePtr make_node(Matrix value, const char* op, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const NodePtr& p : parents) {
    if (!p) throw std::invalid_argument("null operand");
    needs = needs || p->requires_grad;
  }
  node->parents = std::move(parents);
  node->requires_grad = needs;
  if (needs) node->backprop = std::move(backprop);
  return node;
}

// Accumulates `delta` into the parent's gradient if the parent wants one.
template <typename Expr>
void accum(Node& parent, const Expr& delta) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  parent.grad += delta;
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
  if (a->value.rows() != b->value.rows() ||
      a->value.cols() != b->value.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

NodePtr constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return node;
}

NodePtr constant_scalar(Scalar value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

NodePtr parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "parameter";
  node->requires_grad = true;
  return node;
}

void backward(const NodePtr& loss) {
  if (!loss) throw std::invalid_argument("backward: null node");
  if (loss->value.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  loss->ensure_grad();
  loss->grad(0, 0) += 1.0;
  if (!loss->requires_grad) return;

  // Post-order DFS; `order` ends up with ancestors before consumers, so the
  // reverse walk visits every node exactly once with its grad complete.
  struct Frame {
    Node* node;
    std::size_t next = 0;
  };
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<Frame> stack;
  visited.insert(loss.get());
  stack.push_back({loss.get()});
  while (!stack.empty()) {
    Frame& frame = stack.back();
    if (frame.next < frame.node->parents.size()) {
      Node* parent = frame.node->parents[frame.next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.push_back({parent});
      }
    } else {
      order.push_back(frame.node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

// ----- arithmetic ---------------------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "add");
  return make_node(a->value + b->value, "add", {a, b}, [](Node& self) {
    accum(*self.parents[0], self.grad);
    accum(*self.parents[1], self.grad);
  });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "sub");
  return make_node(a->value - b->value, "sub", {a, b}, [](Node& self) {
    accum(*self.parents[0], self.grad);
    accum(*self.parents[1], -self.grad);
  });
}

NodePtr cwise_mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "cwise_mul");
  return make_node((a->value.array() * b->value.array()).matrix(), "cwise_mul",
                   {a, b}, [](Node& self) {
                     accum(*self.parents[0],
                           (self.grad.array() *
                            self.parents[1]->value.array()).matrix());
                     accum(*self.parents[1],
                           (self.grad.array() *
                            self.parents[0]->value.array()).matrix());
                   });
}

NodePtr scale(const NodePtr& a, Scalar c) {
  return make_node(a->value * c, "scale", {a}, [c](Node& self) {
    accum(*self.parents[0], self.grad * c);
  });
}

NodePtr add_scalar(const NodePtr& a, Scalar c) {
  return make_node((a->value.array() + c).matrix(), "add_scalar", {a},
                   [](Node& self) { accum(*self.parents[0], self.grad); });
}

NodePtr sub_from_scalar(Scalar c, const NodePtr& a) {
  return make_node((c - a->value.array()).matrix(), "sub_from_scalar", {a},
                   [](Node& self) { accum(*self.parents[0], -self.grad); });
}

NodePtr neg(const NodePtr& a) {
  return make_node(-a->value, "neg", {a}, [](Node& self) {
    accum(*self.parents[0], -self.grad);
  });
}

// ----- linear algebra -----------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.cols() != b->value.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  return make_node(a->value * b->value, "matmul", {a, b}, [](Node& self) {
    Node& a_ = *self.parents[0];
    Node& b_ = *self.parents[1];
    accum(a_, self.grad * b_.value.transpose());
    accum(b_, a_.value.transpose() * self.grad);
  });
}

NodePtr transpose(const NodePtr& a) {
  return make_node(a->value.transpose(), "transpose", {a}, [](Node& self) {
    accum(*self.parents[0], self.grad.transpose());
  });
}

NodePtr add_row_broadcast(const NodePtr& a, const NodePtr& row_bias) {
  if (row_bias->value.rows() != 1 ||
      row_bias->value.cols() != a->value.cols()) {
    throw std::invalid_argument("add_row_broadcast: bias must be 1 x cols(a)");
  }
  Matrix out = a->value;
  out.rowwise() += row_bias->value.row(0);
  return make_node(std::move(out), "add_row_broadcast", {a, row_bias},
                   [](Node& self) {
                     accum(*self.parents[0], self.grad);
                     accum(*self.parents[1], self.grad.colwise().sum());
                   });
}

NodePtr gather_rows(const NodePtr& a, const std::vector<int>& row_indices) {
  const int n = static_cast<int>(row_indices.size());
  Matrix out(n, a->value.cols());
  for (int i = 0; i < n; ++i) {
    const int r = row_indices[static_cast<std::size_t>(i)];
    if (r < 0 || r >= a->value.rows()) {
      throw std::out_of_range("unknown token: " + std::to_string(r));
    }
    out.row(i) = a->value.row(r);
  }
  return make_node(std::move(out), "gather_rows", {a},
                   [row_indices](Node& self) {
                     Node& src = *self.parents[0];
                     if (!src.requires_grad) return;
                     src.ensure_grad();
                     for (std::size_t i = 0; i < row_indices.size(); ++i) {
                       src.grad.row(row_indices[i]) +=
                           self.grad.row(static_cast<Eigen::Index>(i));
                     }
                   });
}

NodePtr mix_rows(const NodePtr& a, const NodePtr& b, const Vector& mix) {
  check_same_shape(a, b, "mix_rows");
  if (mix.size() != a->value.rows()) {
    throw std::invalid_argument("mix_rows: coefficient count mismatch");
  }
  Matrix out(a->value.rows(), a->value.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) = (1.0 - mix(i)) * a->value.row(i) + mix(i) * b->value.row(i);
  }
  return make_node(std::move(out), "mix_rows", {a, b}, [mix](Node& self) {
    Node& a_ = *self.parents[0];
    Node& b_ = *self.parents[1];
    for (Eigen::Index i = 0; i < self.grad.rows(); ++i) {
      if (a_.requires_grad) {
        a_.ensure_grad();
        a_.grad.row(i) += (1.0 - mix(i)) * self.grad.row(i);
      }
      if (b_.requires_grad) {
        b_.ensure_grad();
        b_.grad.row(i) += mix(i) * self.grad.row(i);
      }
    }
  });
}

// ----- nonlinearities -----------------------------------------------------

NodePtr tanh_(const NodePtr& a) {
  return make_node(a->value.array().tanh().matrix(), "tanh", {a},
                   [](Node& self) {
                     accum(*self.parents[0],
                           (self.grad.array() *
                            (1.0 - self.value.array().square())).matrix());
                   });
}

NodePtr exp_(const NodePtr& a) {
  return make_node(a->value.array().exp().matrix(), "exp", {a},
                   [](Node& self) {
                     accum(*self.parents[0],
                           (self.grad.array() * self.value.array()).matrix());
                   });
}

NodePtr log_(const NodePtr& a) {
  return make_node(a->value.array().log().matrix(), "log", {a},
                   [](Node& self) {
                     accum(*self.parents[0],
                           (self.grad.array() /
                            self.parents[0]->value.array()).matrix());
                   });
}

NodePtr log_sigmoid_(const NodePtr& a) {
  Matrix out(a->value.rows(), a->value.cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out(i) = log_sigmoid(a->value(i));
  }
  return make_node(std::move(out), "log_sigmoid", {a}, [](Node& self) {
    Node& src = *self.parents[0];
    if (!src.requires_grad) return;
    src.ensure_grad();
    for (Eigen::Index i = 0; i < self.grad.size(); ++i) {
      // d/dx log(sigmoid(x)) = sigmoid(-x)
      src.grad(i) += self.grad(i) * sigmoid(-src.value(i));
    }
  });
}

// ----- softmax family -----------------------------------------------------

NodePtr row_softmax(const NodePtr& a, bool causal) {
  if (causal && a->value.rows() != a->value.cols()) {
    throw std::invalid_argument("row_softmax: causal mask needs a square matrix");
  }
  const Matrix& x = a->value;
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index span = causal ? i + 1 : x.cols();
    const Scalar m = x.row(i).head(span).maxCoeff();
    out.row(i).head(span) = (x.row(i).head(span).array() - m).exp();
    out.row(i).head(span) /= out.row(i).head(span).sum();
  }
  return make_node(std::move(out), "row_softmax", {a}, [](Node& self) {
    Node& src = *self.parents[0];
    if (!src.requires_grad) return;
    src.ensure_grad();
    for (Eigen::Index i = 0; i < self.grad.rows(); ++i) {
      // dX = P .* (G - (G . P)); masked entries carry P = 0 and stay zero.
      const Scalar dot = self.grad.row(i).dot(self.value.row(i));
      src.grad.row(i) +=
          (self.value.row(i).array() * (self.grad.row(i).array() - dot))
              .matrix();
    }
  });
}

NodePtr row_log_softmax(const NodePtr& a) {
  return make_node(alignlab::row_log_softmax(a->value), "row_log_softmax", {a},
                   [](Node& self) {
                     Node& src = *self.parents[0];
                     if (!src.requires_grad) return;
                     src.ensure_grad();
                     for (Eigen::Index i = 0; i < self.grad.rows(); ++i) {
                       const Scalar gsum = self.grad.row(i).sum();
                       src.grad.row(i) +=
                           self.grad.row(i) -
                           gsum * self.value.row(i).array().exp().matrix();
                     }
                   });
}

// ----- reductions & selections --------------------------------------------

NodePtr sum(const NodePtr& a) {
  Matrix out(1, 1);
  out(0, 0) = a->value.sum();
  return make_node(std::move(out), "sum", {a}, [](Node& self) {
    Node& src = *self.parents[0];
    accum(src, Matrix::Constant(src.value.rows(), src.value.cols(),
                                self.grad(0, 0)));
  });
}

NodePtr mean(const NodePtr& a) {
  if (a->value.size() == 0) throw std::invalid_argument("mean: empty input");
  Matrix out(1, 1);
  out(0, 0) = a->value.mean();
  return make_node(std::move(out), "mean", {a}, [](Node& self) {
    Node& src = *self.parents[0];
    const Scalar g = self.grad(0, 0) / static_cast<Scalar>(src.value.size());
    accum(src, Matrix::Constant(src.value.rows(), src.value.cols(), g));
  });
}

NodePtr pick_entries(const NodePtr& a,
                     const std::vector<std::pair<int, int>>& entries) {
  Matrix out(static_cast<Eigen::Index>(entries.size()), 1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [r, c] = entries[i];
    if (r < 0 || r >= a->value.rows() || c < 0 || c >= a->value.cols()) {
      throw std::out_of_range("pick_entries: index out of range");
    }
    out(static_cast<Eigen::Index>(i), 0) = a->value(r, c);
  }
  return make_node(std::move(out), "pick_entries", {a}, [entries](Node& self) {
    Node& src = *self.parents[0];
    if (!src.requires_grad) return;
    src.ensure_grad();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      src.grad(entries[i].first, entries[i].second) +=
          self.grad(static_cast<Eigen::Index>(i), 0);
    }
  });
}

// ----- discounted suffix machinery -----------------------------------------

NodePtr discounted_suffix_sum(const NodePtr& a, Scalar decay) {
  if (a->value.cols() != 1) {
    throw std::invalid_argument("discounted_suffix_sum: expects a column");
  }
  const Eigen::Index n = a->value.rows();
  Matrix out(n, 1);
  Scalar acc = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    acc = a->value(t, 0) + decay * acc;
    out(t, 0) = acc;
  }
  return make_node(std::move(out), "discounted_suffix_sum", {a},
                   [decay](Node& self) {
                     Node& src = *self.parents[0];
                     if (!src.requires_grad) return;
                     src.ensure_grad();
                     Scalar acc = 0.0;
                     for (Eigen::Index i = 0; i < self.grad.rows(); ++i) {
                       acc = self.grad(i, 0) + decay * acc;
                       src.grad(i, 0) += acc;
                     }
                   });
}

NodePtr scaled_suffix_sum(const NodePtr& a, Scalar decay) {
  if (a->value.cols() != 1) {
    throw std::invalid_argument("scaled_suffix_sum: expects a column");
  }
  const Eigen::Index n = a->value.rows();
  Matrix out(n, 1);
  Scalar suffix = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    suffix += a->value(t, 0);
    out(t, 0) = std::pow(decay, static_cast<Scalar>(n - 1 - t)) * suffix;
  }
  return make_node(std::move(out), "scaled_suffix_sum", {a},
                   [decay](Node& self) {
                     Node& src = *self.parents[0];
                     if (!src.requires_grad) return;
                     src.ensure_grad();
                     const Eigen::Index n = self.grad.rows();
                     Scalar acc = 0.0;
                     for (Eigen::Index i = 0; i < n; ++i) {
                       acc += std::pow(decay, static_cast<Scalar>(n - 1 - i)) *
                              self.grad(i, 0);
                       src.grad(i, 0) += acc;
                     }
                   });
}

// ----- parameters ----------------------------------------------------------

ParamStore::ParamStore(std::uint64_t seed) : seed_(seed), rng_(seed) {}

NodePtr ParamStore::create(const std::string& name, int rows, int cols,
                           InitKind init) {
  if (params_.count(name)) {
    throw std::invalid_argument("duplicate parameter: " + name);
  }
  Matrix value = Matrix::Zero(rows, cols);
  if (init == InitKind::UniformFanIn) {
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(rows));
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        value(i, j) = rng_.uniform(-bound, bound);
      }
    }
  }
  NodePtr node = parameter(std::move(value));
  params_.emplace(name, node);
  return node;
}

NodePtr ParamStore::create_uniform(const std::string& name, int rows, int cols,
                                   Scalar bound) {
  if (params_.count(name)) {
    throw std::invalid_argument("duplicate parameter: " + name);
  }
  Matrix value(rows, cols);
  for (Eigen::Index i = 0; i < value.rows(); ++i) {
    for (Eigen::Index j = 0; j < value.cols(); ++j) {
      value(i, j) = rng_.uniform(-bound, bound);
    }
  }
  NodePtr node = parameter(std::move(value));
  params_.emplace(name, node);
  return node;
}

NodePtr ParamStore::adopt(const std::string& name, Matrix value) {
  if (params_.count(name)) {
    throw std::invalid_argument("duplicate parameter: " + name);
  }
  NodePtr node = parameter(std::move(value));
  params_.emplace(name, node);
  return node;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

const NodePtr& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, node] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::total_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, node] : params_) {
    n += static_cast<std::size_t>(node->value.size());
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, node] : params_) node->grad.resize(0, 0);
}

namespace {
constexpr char kCheckpointMagic[8] = {'A', 'L', 'A', 'B', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated");
}
}  // namespace

void ParamStore::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_raw(out, kCheckpointVersion);
  write_raw(out, static_cast<std::uint64_t>(params_.size()));
  for (const auto& [name, node] : params_) {
    write_raw(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(out, static_cast<std::uint32_t>(2));
    write_raw(out, static_cast<std::uint64_t>(node->value.rows()));
    write_raw(out, static_cast<std::uint64_t>(node->value.cols()));
    for (Eigen::Index i = 0; i < node->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < node->value.cols(); ++j) {
        write_raw(out, node->value(i, j));
      }
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

void ParamStore::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad checkpoint magic");
  }
  std::uint32_t version = 0;
  read_raw(in, version);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  std::uint64_t count = 0;
  read_raw(in, count);
  if (count != params_.size()) {
    throw std::runtime_error("checkpoint parameter count mismatch");
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint32_t name_len = 0;
    read_raw(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint truncated");
    std::uint32_t rank = 0;
    read_raw(in, rank);
    if (rank != 2) throw std::runtime_error("unsupported tensor rank");
    std::uint64_t rows = 0, cols = 0;
    read_raw(in, rows);
    read_raw(in, cols);
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw std::runtime_error("checkpoint has unknown parameter: " + name);
    }
    Node& node = *it->second;
    if (node.value.rows() != static_cast<Eigen::Index>(rows) ||
        node.value.cols() != static_cast<Eigen::Index>(cols)) {
      throw std::runtime_error("checkpoint shape mismatch for: " + name);
    }
    for (Eigen::Index i = 0; i < node.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < node.value.cols(); ++j) {
        read_raw(in, node.value(i, j));
      }
    }
  }
}

ParamStore ParamStore::clone() const {
  ParamStore copy(seed_);
  for (const auto& [name, node] : params_) {
    copy.params_.emplace(name, parameter(node->value));
  }
  return copy;
}

void RmsProp::step(ParamStore& params) {
  params.for_each([this](const std::string& name, const NodePtr& node) {
    if (node->grad.size() == 0) return;  // parameter untouched this round
    Matrix& s = mean_square_[name];
    if (s.size() == 0) s = Matrix::Zero(node->value.rows(), node->value.cols());
    s = rho_ * s + (1.0 - rho_) * node->grad.array().square().matrix();
    node->value.array() -=
        lr_ * node->grad.array() / (s.array().sqrt() + eps_);
  });
}

}  // namespace alignlab::ad
