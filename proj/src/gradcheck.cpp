#include "alignlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace alignlab::ad {

GradCheckReport finite_difference_check(
    ParamStore& params, const std::function<NodePtr()>& build_loss,
    Scalar tolerance, Scalar step) {
  if (step <= 0.0) throw std::invalid_argument("step must be positive");

  // One reverse pass gives every analytic gradient at once.
  params.zero_grad();
  NodePtr loss = build_loss();
  if (!std::isfinite(loss->value(0, 0))) {
    throw std::runtime_error("non-finite loss");
  }
  backward(loss);
  std::map<std::string, Matrix> analytic;
  params.for_each([&analytic](const std::string& name, const NodePtr& node) {
    analytic[name] = node->grad.size() == 0
                         ? Matrix::Zero(node->value.rows(), node->value.cols())
                         : node->grad;
  });

  GradCheckReport report;
  report.tolerance = tolerance;

  params.for_each([&](const std::string& name, const NodePtr& node) {
    Matrix& value = node->value;
    const Matrix& grad = analytic[name];
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        const Scalar saved = value(i, j);
        value(i, j) = saved + step;
        const Scalar up = build_loss()->value(0, 0);
        value(i, j) = saved - step;
        const Scalar down = build_loss()->value(0, 0);
        value(i, j) = saved;

        const Scalar numeric = (up - down) / (2.0 * step);
        const Scalar a = grad(i, j);
        const Scalar rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1.0});
        ++report.checked_entries;
        if (rel > report.max_relative_error) {
          report.max_relative_error = rel;
          report.worst_parameter = name;
          report.worst_row = static_cast<int>(i);
          report.worst_col = static_cast<int>(j);
        }
      }
    }
  });

  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace alignlab::ad
