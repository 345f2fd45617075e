#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "alignlab/autodiff.hpp"
#include "alignlab/gradcheck.hpp"

using namespace alignlab;

namespace {

// An op whose value is x^2 but whose backward pass deliberately reports the
// gradient of 1.5*x^2. The checker must notice the lie.
ad::NodePtr square_with_wrong_gradient(const ad::NodePtr& a) {
  auto out = std::make_shared<ad::Node>();
  out->value = a->value.array().square();
  out->requires_grad = a->requires_grad;
  out->op = "square_with_wrong_gradient";
  out->parents = {a};
  out->backprop = [a](ad::Node& self) {
    a->ensure_grad();
    a->grad += 3.0 * a->value.cwiseProduct(self.grad);
  };
  return out;
}

}  // namespace

TEST_CASE("a correct graph passes well inside tolerance") {
  ad::ParamStore params(17);
  params.create("w", 3, 3, ad::InitKind::UniformFanIn);
  params.create("b", 1, 3, ad::InitKind::UniformFanIn);

  const ad::GradCheckReport report = ad::finite_difference_check(params, [&] {
    auto h = ad::tanh_(ad::add_row_broadcast(
        ad::matmul(params.at("w"), params.at("w")), params.at("b")));
    return ad::mean(ad::cwise_mul(h, h));
  });

  CHECK(report.passed);
  CHECK(report.max_relative_error < 1e-6);
  CHECK(report.checked_entries == 9 + 3);
  CHECK(report.tolerance == doctest::Approx(1e-4));
}

TEST_CASE("a corrupted backward pass is caught") {
  ad::ParamStore params(17);
  params.adopt("x", Matrix::Constant(2, 2, 0.8));

  const ad::GradCheckReport report = ad::finite_difference_check(
      params, [&] { return ad::sum(square_with_wrong_gradient(params.at("x"))); });

  CHECK_FALSE(report.passed);
  // analytic 3x vs numeric 2x at x=0.8: |2.4-1.6|/2.4 = 1/3
  CHECK(report.max_relative_error == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(report.worst_parameter == "x");
}

TEST_CASE("an untouched parameter contributes zero gradient, not a failure") {
  ad::ParamStore params(4);
  params.adopt("used", Matrix::Constant(1, 1, 0.3));
  params.adopt("unused", Matrix::Constant(1, 1, 2.0));

  const ad::GradCheckReport report = ad::finite_difference_check(params, [&] {
    return ad::sum(ad::cwise_mul(params.at("used"), params.at("used")));
  });
  CHECK(report.passed);
  CHECK(report.checked_entries == 2);
}

TEST_CASE("pathological inputs are reported loudly") {
  ad::ParamStore params(4);
  params.adopt("x", Matrix::Constant(1, 1, -1.0));

  SUBCASE("non-finite loss") {
    CHECK_THROWS_WITH_AS(
        ad::finite_difference_check(params,
                                [&] { return ad::log_(params.at("x")); }),
        "non-finite loss", std::runtime_error);
  }
  SUBCASE("bad probe step") {
    CHECK_THROWS_WITH_AS(
        ad::finite_difference_check(
            params, [&] { return ad::sum(params.at("x")); }, 1e-4, 0.0),
        "step must be positive", std::invalid_argument);
  }
}
