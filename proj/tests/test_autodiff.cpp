#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "alignlab/autodiff.hpp"
#include "alignlab/gradcheck.hpp"
#include "alignlab/types.hpp"

using namespace alignlab;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, Scalar lo, Scalar hi) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(lo, hi);
  return m;
}

// Runs the finite-difference checker on a one- or two-parameter scalar graph.
void check_op(const std::string& label,
              const std::function<ad::NodePtr(ad::ParamStore&)>& build,
              std::uint64_t seed = 11) {
  ad::ParamStore params(seed);
  const ad::GradCheckReport report =
      ad::finite_difference_check(params, [&] { return build(params); });
  INFO(label << " worst=" << report.worst_parameter
             << " rel=" << report.max_relative_error);
  CHECK(report.passed);
  CHECK(report.max_relative_error < 1e-4);
}

// The finite-difference checker re-invokes the graph builder for every probe,
// so adoption has to be idempotent: first call creates, later calls reuse.
ad::NodePtr adopt_random(ad::ParamStore& params, const std::string& name,
                         Rng& rng, int rows, int cols, Scalar lo = -1.0,
                         Scalar hi = 1.0) {
  if (params.contains(name)) return params.at(name);
  return params.adopt(name, random_matrix(rng, rows, cols, lo, hi));
}

ad::NodePtr adopt_fixed(ad::ParamStore& params, const std::string& name,
                        const Matrix& value) {
  if (params.contains(name)) return params.at(name);
  return params.adopt(name, value);
}

}  // namespace

TEST_CASE("every primitive op matches central differences") {
  Rng rng(99);

  check_op("add+sub+neg", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 3, 2);
    auto b = adopt_random(p, "b", rng, 3, 2);
    return ad::sum(ad::add(ad::sub(a, b), ad::neg(b)));
  });

  check_op("cwise_mul+scale+add_scalar", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 2, 4);
    auto b = adopt_random(p, "b", rng, 2, 4);
    return ad::mean(ad::add_scalar(ad::scale(ad::cwise_mul(a, b), 0.7), 0.3));
  });

  check_op("sub_from_scalar", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 2, 2);
    return ad::sum(ad::sub_from_scalar(1.5, a));
  });

  check_op("matmul+transpose", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 3, 4);
    auto b = adopt_random(p, "b", rng, 2, 4);
    return ad::sum(ad::matmul(a, ad::transpose(b)));
  });

  check_op("add_row_broadcast", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 4, 3);
    auto bias = adopt_random(p, "bias", rng, 1, 3);
    return ad::sum(ad::tanh_(ad::add_row_broadcast(a, bias)));
  });

  check_op("gather_rows with repeats", [&](ad::ParamStore& p) {
    auto table = adopt_random(p, "table", rng, 5, 3);
    return ad::sum(ad::gather_rows(table, {1, 4, 1, 0, 1}));
  });

  check_op("mix_rows", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 3, 4);
    auto b = adopt_random(p, "b", rng, 3, 4);
    Vector mix(3);
    mix << 0.0, 0.2, 0.9;
    return ad::sum(ad::cwise_mul(ad::mix_rows(a, b, mix),
                                 ad::mix_rows(b, a, mix)));
  });

  check_op("tanh+exp+log chain", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 2, 3);
    return ad::sum(ad::log_(ad::add_scalar(ad::exp_(ad::tanh_(a)), 0.5)));
  });

  check_op("log_sigmoid far into both tails", [&](ad::ParamStore& p) {
    Matrix wide(1, 4);
    wide << -30.0, -0.5, 0.5, 30.0;
    auto a = adopt_fixed(p, "a", wide);
    return ad::sum(ad::log_sigmoid_(a));
  });

  check_op("row_softmax", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 3, 5, -2.0, 2.0);
    return ad::mean(ad::cwise_mul(ad::row_softmax(a), a));
  });

  check_op("row_softmax causal", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 4, 4, -2.0, 2.0);
    return ad::mean(ad::cwise_mul(ad::row_softmax(a, true), a));
  });

  check_op("row_log_softmax", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 3, 5, -2.0, 2.0);
    return ad::mean(ad::pick_entries(ad::row_log_softmax(a),
                                     {{0, 1}, {1, 4}, {2, 0}}));
  });

  check_op("discounted_suffix_sum", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 5, 1);
    return ad::sum(ad::cwise_mul(ad::discounted_suffix_sum(a, 0.95), a));
  });

  check_op("scaled_suffix_sum", [&](ad::ParamStore& p) {
    auto a = adopt_random(p, "a", rng, 5, 1);
    return ad::sum(ad::cwise_mul(ad::scaled_suffix_sum(a, 0.9), a));
  });
}

TEST_CASE("suffix-weight transforms reproduce hand-computed tables") {
  SUBCASE("undiscounted three ones collapse to counts") {
    auto a = ad::constant(Matrix::Ones(3, 1));
    auto out = ad::discounted_suffix_sum(a, 1.0);
    CHECK(out->value(0, 0) == doctest::Approx(3.0));
    CHECK(out->value(1, 0) == doctest::Approx(2.0));
    CHECK(out->value(2, 0) == doctest::Approx(1.0));
    CHECK(ad::sum(out)->value(0, 0) == doctest::Approx(6.0));
  }
  SUBCASE("discounted pair") {
    Matrix in(2, 1);
    in << 2.0, 1.0;
    auto out = ad::discounted_suffix_sum(ad::constant(in), 0.95);
    CHECK(out->value(0, 0) == doctest::Approx(2.95).epsilon(1e-12));
    CHECK(out->value(1, 0) == doctest::Approx(1.0));
  }
  SUBCASE("scaled variant multiplies the plain suffix total") {
    Matrix in(2, 1);
    in << 2.0, 1.0;
    auto out = ad::scaled_suffix_sum(ad::constant(in), 0.95);
    CHECK(out->value(0, 0) == doctest::Approx(0.95 * 3.0).epsilon(1e-12));
    CHECK(out->value(1, 0) == doctest::Approx(1.0));
  }
  SUBCASE("single element passes through either way") {
    Matrix in(1, 1);
    in << 0.37;
    CHECK(ad::discounted_suffix_sum(ad::constant(in), 0.5)->value(0, 0) ==
          doctest::Approx(0.37));
    CHECK(ad::scaled_suffix_sum(ad::constant(in), 0.5)->value(0, 0) ==
          doctest::Approx(0.37));
  }
  SUBCASE("rows only") {
    auto a = ad::constant(Matrix::Ones(2, 3));
    CHECK_THROWS_AS(ad::discounted_suffix_sum(a, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(ad::scaled_suffix_sum(a, 0.9), std::invalid_argument);
  }
}

TEST_CASE("backward seeds ones and accumulates until zero_grad") {
  ad::ParamStore params(3);
  auto x = params.adopt("x", Matrix::Constant(2, 2, 0.5));

  ad::backward(ad::sum(x));
  CHECK(x->grad.isApprox(Matrix::Ones(2, 2)));

  // a second pass over a fresh graph stacks on top of the first
  ad::backward(ad::sum(x));
  CHECK(x->grad.isApprox(Matrix::Constant(2, 2, 2.0)));

  params.zero_grad();
  CHECK(x->grad.isZero(0.0));

  SUBCASE("scalar-only losses") {
    CHECK_THROWS_WITH_AS(ad::backward(x),
                         "backward requires a scalar loss",
                         std::invalid_argument);
  }
  SUBCASE("multiplying by a zero constant kills the gradient") {
    params.zero_grad();
    auto zero = ad::constant(Matrix::Zero(2, 2));
    ad::backward(ad::sum(ad::cwise_mul(zero, x)));
    CHECK(x->grad.isZero(0.0));
  }
}

TEST_CASE("shape and range errors carry their operation name") {
  auto a = ad::constant(Matrix::Zero(2, 3));
  auto b = ad::constant(Matrix::Zero(3, 2));
  CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("shape mismatch"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ad::matmul(a, a),
                       doctest::Contains("inner dimension mismatch"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ad::gather_rows(a, {0, 2}),
                       doctest::Contains("unknown token: 2"),
                       std::out_of_range);
  CHECK_THROWS_WITH_AS(ad::pick_entries(a, {{0, 3}}),
                       doctest::Contains("index out of range"),
                       std::out_of_range);
  CHECK_THROWS_WITH_AS(ad::row_softmax(a, true),
                       doctest::Contains("square"), std::invalid_argument);
}

TEST_CASE("parameter stores are seed-deterministic") {
  ad::ParamStore a(42);
  ad::ParamStore b(42);
  ad::ParamStore c(43);
  auto wa = a.create("w", 4, 3, ad::InitKind::UniformFanIn);
  auto wb = b.create("w", 4, 3, ad::InitKind::UniformFanIn);
  auto wc = c.create("w", 4, 3, ad::InitKind::UniformFanIn);
  CHECK(wa->value == wb->value);  // bit-for-bit
  CHECK(wa->value != wc->value);
  CHECK(wa->value.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(4.0));

  auto z = a.create("z", 2, 2, ad::InitKind::Zeros);
  CHECK(z->value.isZero(0.0));

  CHECK(a.contains("w"));
  CHECK_FALSE(a.contains("nope"));
  CHECK_THROWS_WITH_AS(a.at("nope"), doctest::Contains("unknown parameter"),
                       std::out_of_range);
  CHECK_THROWS_WITH_AS(a.create("w", 1, 1, ad::InitKind::Zeros),
                       doctest::Contains("duplicate parameter"),
                       std::invalid_argument);

  CHECK(a.names() == std::vector<std::string>{"w", "z"});
  CHECK(a.total_parameter_count() == 12 + 4);
}

TEST_CASE("checkpoints round-trip every bit and reject mismatches") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "alignlab_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "store.ckpt").string();

  ad::ParamStore original(7);
  original.create("w1", 3, 5, ad::InitKind::UniformFanIn);
  original.create("b1", 1, 5, ad::InitKind::Zeros);
  original.at("b1")->value(0, 2) = 0.1 + 0.2;  // a value with no short decimal
  original.save_checkpoint(path);

  ad::ParamStore restored(1234);  // different seed: values must come from disk
  restored.create("w1", 3, 5, ad::InitKind::UniformFanIn);
  restored.create("b1", 1, 5, ad::InitKind::Zeros);
  restored.load_checkpoint(path);
  CHECK(restored.at("w1")->value == original.at("w1")->value);
  CHECK(restored.at("b1")->value == original.at("b1")->value);

  SUBCASE("shape mismatch is refused") {
    ad::ParamStore wrong(7);
    wrong.create("w1", 5, 3, ad::InitKind::Zeros);
    wrong.create("b1", 1, 5, ad::InitKind::Zeros);
    CHECK_THROWS_WITH_AS(wrong.load_checkpoint(path),
                         doctest::Contains("shape mismatch"),
                         std::runtime_error);
  }
  SUBCASE("unknown names are refused") {
    ad::ParamStore wrong(7);
    wrong.create("other", 3, 5, ad::InitKind::Zeros);
    wrong.create("b1", 1, 5, ad::InitKind::Zeros);
    CHECK_THROWS_AS(wrong.load_checkpoint(path), std::runtime_error);
  }
  SUBCASE("garbage magic is refused") {
    const std::string bad = (dir / "bad.ckpt").string();
    FILE* f = std::fopen(bad.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("NOTACKPT________", f);
    std::fclose(f);
    CHECK_THROWS_WITH_AS(original.load_checkpoint(bad),
                         doctest::Contains("magic"), std::runtime_error);
  }

  fs::remove_all(dir);
}

TEST_CASE("clone copies values but not aliasing") {
  ad::ParamStore store(5);
  store.create("w", 2, 2, ad::InitKind::UniformFanIn);
  ad::ParamStore copy = store.clone();
  CHECK(copy.at("w")->value == store.at("w")->value);
  copy.at("w")->value(0, 0) += 1.0;
  CHECK(copy.at("w")->value != store.at("w")->value);
}

TEST_CASE("rmsprop applies the running-average update rule") {
  ad::ParamStore store(1);
  auto p = store.adopt("p", Matrix::Constant(1, 1, 1.0));
  p->ensure_grad();
  p->grad(0, 0) = 1.0;

  ad::RmsProp opt(1e-3, 0.99, 1e-8);
  opt.step(store);

  const Scalar s1 = 0.01 * 1.0;  // rho*0 + (1-rho)*g^2
  const Scalar expected1 = 1.0 - 1e-3 * 1.0 / (std::sqrt(s1) + 1e-8);
  CHECK(p->value(0, 0) == doctest::Approx(expected1).epsilon(1e-15));

  // second identical step: the accumulator decays toward g^2
  p->grad(0, 0) = 1.0;
  opt.step(store);
  const Scalar s2 = 0.99 * s1 + 0.01;
  const Scalar expected2 = expected1 - 1e-3 / (std::sqrt(s2) + 1e-8);
  CHECK(p->value(0, 0) == doctest::Approx(expected2).epsilon(1e-15));
}
