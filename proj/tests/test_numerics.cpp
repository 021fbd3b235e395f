// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "termprob/gradcheck.hpp"
#include "termprob/rng.hpp"
#include "termprob/tensor.hpp"

using namespace termprob;

namespace {

Tensor2d random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor2d t(r, c);
  for (auto& x : t.data()) x = standard_normal(rng);
  return t;
}

// Plain long-double loops used as the reference for every kernel below.
std::vector<long double> ref_matmul(const Tensor2d& a, const Tensor2d& b) {
  std::vector<long double> out(a.rows() * b.cols(), 0.0L);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) out[i * b.cols() + j] += static_cast<long double>(a(i, k)) * b(k, j);
  return out;
}

std::vector<long double> ref_softmax_row(const std::vector<double>& s, const Mask& m) {
  long double mx = -INFINITY;
  for (std::size_t j = 0; j < s.size(); ++j)
    if (m[j]) mx = std::max(mx, static_cast<long double>(s[j]));
  long double z = 0.0L;
  std::vector<long double> out(s.size(), 0.0L);
  for (std::size_t j = 0; j < s.size(); ++j)
    if (m[j]) z += out[j] = std::exp(static_cast<long double>(s[j]) - mx);
  for (auto& v : out) v /= z;
  return out;
}

}  // namespace

TEST_CASE("tensor construction checks shapes") {
  CHECK_THROWS_AS(Tensor2(2, 3, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor2::from_rows({{1, 2}, {3}}), DimensionError);
  const auto t = Tensor2::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t(1, 2) == 6.0f);
  CHECK(t.all_finite());
}

TEST_CASE("matmul matches hand values and shape errors") {
  const auto a = Tensor2::from_rows({{1, 2}, {3, 4}});
  const auto b = Tensor2::from_rows({{5, 6}, {7, 8}});
  const auto c = matmul(a, b);
  CHECK(c == Tensor2::from_rows({{19, 22}, {43, 50}}));
  CHECK_THROWS_AS(matmul(a, Tensor2(3, 2)), DimensionError);
}

TEST_CASE("matmul agrees with an extended-precision reference") {
  Rng rng = make_rng(11, "test/matmul");
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = uniform_int(rng, 1, 12), k = uniform_int(rng, 1, 40), m = uniform_int(rng, 1, 12);
    const auto a = random_tensor(rng, n, k), b = random_tensor(rng, k, m);
    const auto c = matmul(a, b);
    const auto ref = ref_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.data()[i] - static_cast<double>(ref[i])) < 1e-12);

    // Float path with double accumulation stays within float rounding of the reference.
    const auto cf = matmul(a.cast<float>(), b.cast<float>());
    const auto reff = ref_matmul(a.cast<float>().cast<double>(), b.cast<float>().cast<double>());
    for (std::size_t i = 0; i < reff.size(); ++i)
      CHECK(std::abs(cf.data()[i] - static_cast<double>(reff[i])) <= 1e-6 * (1.0 + std::abs(static_cast<double>(reff[i]))));
  }
}

TEST_CASE("matmul_backward matches central differences") {
  Rng rng = make_rng(12, "test/matmul-bwd");
  auto a = random_tensor(rng, 3, 4), b = random_tensor(rng, 4, 2);
  const auto w = random_tensor(rng, 3, 2);  // loss = sum(w * (a b))
  auto loss = [&] {
    const auto c = matmul(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += w.data()[i] * c.data()[i];
    return s;
  };
  Tensor2d ga(3, 4), gb(4, 2);
  matmul_backward(a, b, w, &ga, &gb);
  const auto r = finite_diff_check(loss, {{"a", &a, &ga}, {"b", &b, &gb}}, 1e-4);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.checked == 20);
}

TEST_CASE("masked softmax: masked entries are bit-zero and rows sum to one") {
  const auto s = Tensor2::from_rows({{5, 2, 9}});
  const auto p = masked_softmax_rows(s, Mask{1, 0, 1});
  CHECK(p(0, 1) == 0.0f);
  CHECK(std::signbit(p(0, 1)) == false);
  CHECK(p(0, 0) + p(0, 2) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(p(0, 2) == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))).epsilon(1e-6));

  Rng rng = make_rng(13, "test/softmax");
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = uniform_int(rng, 1, 6), c = uniform_int(rng, 1, 16);
    auto x = random_tensor(rng, r, c);
    for (auto& v : x.data()) v *= 20.0;
    Mask m(c, 0);
    for (auto& v : m) v = uniform01(rng) < 0.7;
    m[uniform_int(rng, 0, c - 1)] = 1;
    const auto pd = masked_softmax_rows(x, m);
    const auto pf = masked_softmax_rows(x.cast<float>(), m);
    for (std::size_t i = 0; i < r; ++i) {
      std::vector<double> row(x.row(i).begin(), x.row(i).end());
      const auto ref = ref_softmax_row(row, m);
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        sum += pf(i, j);
        CHECK(std::abs(pd(i, j) - static_cast<double>(ref[j])) < 1e-14);
        CHECK(std::abs(pf(i, j) - static_cast<double>(ref[j])) < 1e-6);
        if (!m[j]) CHECK(pf(i, j) == 0.0f);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("masked softmax is stable at extreme logits") {
  const auto p = masked_softmax_rows(Tensor2::from_rows({{1000.0f, -1000.0f, 999.0f}}), Mask{1, 1, 1});
  CHECK(p.all_finite());
  CHECK(p(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("masked softmax rejects an all-masked row and mismatched masks") {
  CHECK_THROWS_AS(masked_softmax_rows(Tensor2(1, 3), Mask{0, 0, 0}), DegenerateMaskError);
  CHECK_THROWS_AS(masked_softmax_rows(Tensor2(1, 3), Mask{1, 0}), DimensionError);
}

TEST_CASE("masked softmax backward matches central differences") {
  Rng rng = make_rng(14, "test/softmax-bwd");
  auto s = random_tensor(rng, 3, 5);
  const auto w = random_tensor(rng, 3, 5);
  const Mask m{1, 1, 0, 1, 0};
  auto loss = [&] {
    const auto p = masked_softmax_rows(s, m);
    double t = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) t += w.data()[i] * p.data()[i];
    return t;
  };
  const auto p = masked_softmax_rows(s, m);
  Tensor2d gs(3, 5);
  masked_softmax_rows_backward(p, w, gs);
  const auto r = finite_diff_check(loss, {{"s", &s, &gs}}, 1e-4);
  CHECK(r.max_rel_error < 1e-7);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(gs(i, 2) == 0.0);
    CHECK(gs(i, 4) == 0.0);
  }
}

TEST_CASE("sigmoid values and symmetry") {
  CHECK(sigmoid(0.0f) == 0.5f);
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(std::isfinite(sigmoid(-1000.0)));
  CHECK(sigmoid(-1000.0) >= 0.0);
  CHECK(sigmoid(1000.0) == 1.0);
  for (double x : {-30.0, -3.0, -0.1, 0.7, 5.0})
    CHECK(sigmoid(x) + sigmoid(-x) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("relative error uses the floor") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-3));
}

TEST_CASE("finite_diff_check guards its step and the loss") {
  Tensor2d x(1, 1, 1.0), g(1, 1, 2.0);
  auto sq = [&] { return x(0, 0) * x(0, 0); };
  CHECK_THROWS_AS(finite_diff_check(sq, {{"x", &x, &g}}, 1e-2), std::invalid_argument);
  CHECK(finite_diff_check(sq, {{"x", &x, &g}}, 1e-4).max_rel_error < 1e-9);
  CHECK(x(0, 0) == 1.0);  // restored after perturbation
  auto bad = [&] { return x(0, 0) > 1.0 ? NAN : 0.0; };
  CHECK_THROWS_AS(finite_diff_check(bad, {{"x", &x, &g}}, 1e-4), NumericError);
}

TEST_CASE("random substreams are reproducible and label-separated") {
  Rng a = make_rng(5, "x"), b = make_rng(5, "x"), c = make_rng(5, "y");
  const auto va = a(), vb = b(), vc = c();
  CHECK(va == vb);
  CHECK(va != vc);
  Rng r = make_rng(1, "range");
  for (int i = 0; i < 1000; ++i) {
    const auto v = uniform_int(r, 3, 7);
    CHECK(v >= 3);
    CHECK(v <= 7);
    const double u = uniform01(r);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}
