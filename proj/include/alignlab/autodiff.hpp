#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/types.hpp"

// Reverse-mode automatic differentiation over dense double matrices. Each
// operation allocates a graph node holding its value, the handles of its
// inputs, and a closure that routes the node's cotangent into those inputs.
// backward() walks the graph once in reverse topological order, so shared
// subexpressions are differentiated exactly once.

namespace alignlab::ad {

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node {
 public:
  Matrix value;
  Matrix grad;  // allocated lazily by ensure_grad(); accumulates across calls
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Routes this node's grad into parents' grads. Null for leaves.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
  }

  int rows() const { return static_cast<int>(value.rows()); }
  int cols() const { return static_cast<int>(value.cols()); }
};

/// Wraps a value that never receives gradients.
NodePtr constant(Matrix value);
NodePtr constant_scalar(Scalar value);

/// Wraps a trainable value (a leaf that accumulates gradients).
NodePtr parameter(Matrix value);

/// Seeds `loss` (which must be 1x1) with gradient one and accumulates
/// gradients into every reachable node with requires_grad set. Repeated
/// calls without zeroing keep accumulating.
void backward(const NodePtr& loss);

// ----- arithmetic ---------------------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b);          // same shape
NodePtr sub(const NodePtr& a, const NodePtr& b);          // same shape
NodePtr cwise_mul(const NodePtr& a, const NodePtr& b);    // same shape
NodePtr scale(const NodePtr& a, Scalar c);                // c * a
NodePtr add_scalar(const NodePtr& a, Scalar c);           // a + c
NodePtr sub_from_scalar(Scalar c, const NodePtr& a);      // c - a
NodePtr neg(const NodePtr& a);

// ----- linear algebra -----------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr transpose(const NodePtr& a);
/// a is (n x c), row_bias is (1 x c): adds row_bias to every row of a.
NodePtr add_row_broadcast(const NodePtr& a, const NodePtr& row_bias);
/// Selects rows of `a` by index (duplicates allowed); gradients scatter-add
/// back, which is exactly an embedding lookup. Throws on out-of-range rows.
NodePtr gather_rows(const NodePtr& a, const std::vector<int>& row_indices);
/// out_i = (1 - mix(i)) * a.row(i) + mix(i) * b.row(i). `mix` is a plain
/// per-row coefficient vector, not a graph input.
NodePtr mix_rows(const NodePtr& a, const NodePtr& b, const Vector& mix);

// ----- nonlinearities -----------------------------------------------------

NodePtr tanh_(const NodePtr& a);
NodePtr exp_(const NodePtr& a);
NodePtr log_(const NodePtr& a);          // caller guarantees positive input
NodePtr log_sigmoid_(const NodePtr& a);  // elementwise log(sigmoid(x)), stable

// ----- softmax family -----------------------------------------------------

/// Row-wise softmax. With `causal` the input must be square and entries
/// above the diagonal (column > row) are masked out of each row's support.
NodePtr row_softmax(const NodePtr& a, bool causal = false);
/// Row-wise log-softmax over the full row (no mask).
NodePtr row_log_softmax(const NodePtr& a);

// ----- reductions & selections --------------------------------------------

NodePtr sum(const NodePtr& a);   // 1x1
NodePtr mean(const NodePtr& a);  // 1x1
/// Collects a(r_i, c_i) into an (n x 1) column. Throws on out-of-range.
NodePtr pick_entries(const NodePtr& a,
                     const std::vector<std::pair<int, int>>& entries);

// ----- discounted suffix machinery -----------------------------------------

/// Input (n x 1). out_t = sum_{i >= t} decay^(i-t) * in_i.
NodePtr discounted_suffix_sum(const NodePtr& a, Scalar decay);
/// Input (n x 1). out_t = decay^(n-1-t) * sum_{i >= t} in_i.
NodePtr scaled_suffix_sum(const NodePtr& a, Scalar decay);

// ----- parameters ----------------------------------------------------------

enum class InitKind { UniformFanIn, Zeros };

/// Named collection of trainable leaves. Creation order is the RNG
/// consumption order, so a (seed, creation sequence) pair pins every initial
/// value; iteration is name-sorted and therefore deterministic.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed);

  /// Creates (rows x cols) leaf. UniformFanIn draws each entry from
  /// uniform(-1/sqrt(rows), 1/sqrt(rows)), i.e. fan-in is the row count.
  NodePtr create(const std::string& name, int rows, int cols, InitKind init);
  /// Same, with an explicit uniform bound (lookup tables size their draw by
  /// the embedding width rather than the row count).
  NodePtr create_uniform(const std::string& name, int rows, int cols,
                         Scalar bound);
  /// Registers an externally built value as a trainable leaf.
  NodePtr adopt(const std::string& name, Matrix value);

  bool contains(const std::string& name) const;
  const NodePtr& at(const std::string& name) const;  // throws on unknown name

  std::vector<std::string> names() const;
  std::size_t total_parameter_count() const;
  std::uint64_t seed() const { return seed_; }

  void zero_grad();

  /// Flat binary checkpoint; exact round trip of every double. Format:
  /// magic "ALABCKP1", u32 version, u64 param count, then per parameter
  /// u32 name length, name bytes, u32 rank (always 2), u64 dims, and the
  /// values in row-major order.
  void save_checkpoint(const std::string& path) const;
  /// Restores values into matching names/shapes; throws std::runtime_error
  /// on magic/version/shape/name mismatch.
  void load_checkpoint(const std::string& path);

  /// Deep copy: fresh leaves with identical names and values.
  ParamStore clone() const;

  template <typename Fn>
  void for_each(Fn&& fn) const {  // name-sorted iteration
    for (const auto& [name, node] : params_) fn(name, node);
  }

 private:
  std::uint64_t seed_;
  Rng rng_;
  std::map<std::string, NodePtr> params_;
};

/// RMSprop with the usual squared-gradient running average:
///   s <- rho * s + (1 - rho) * g^2;  p <- p - lr * g / (sqrt(s) + eps)
class RmsProp {
 public:
  explicit RmsProp(Scalar lr = 1e-3, Scalar rho = 0.99, Scalar eps = 1e-8)
      : lr_(lr), rho_(rho), eps_(eps) {}

  void step(ParamStore& params);

  Scalar learning_rate() const { return lr_; }

 private:
  Scalar lr_, rho_, eps_;
  std::map<std::string, Matrix> mean_square_;
};

}  // namespace alignlab::ad
