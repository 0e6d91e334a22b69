#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "dksd/linalg.hpp"
#include "dksd/program.hpp"
#include "support/fd_oracle.hpp"
#include "support/linear_oracle.hpp"

namespace dksd {
namespace {

using testing::compare_gradients;
using testing::gauss_solve;
using testing::Mats;
using testing::numeric_gradient;
using testing::random_matrix;

Matrix<double> scalar(double v) {
  Matrix<double> m(1, 1);
  m(0, 0) = v;
  return m;
}

TEST(EvaluateAndBackprop, SquareHasDerivativeTwoX) {
  Program p{{{"mul", {0, 0}}, {"sum", {1}}}};
  auto r = evaluate_and_backprop<double>(p, {scalar(3.0)});
  EXPECT_DOUBLE_EQ(r.output, 9.0);
  EXPECT_DOUBLE_EQ(r.grads[0](0, 0), 6.0);
}

TEST(EvaluateAndBackprop, ConstantFunctionHasZeroGradient) {
  Program p{{{"scale", {0}, 0.0}, {"add_scalar", {1}, 2.5}, {"sum", {2}}}};
  std::mt19937_64 rng(3);
  auto x = random_matrix(rng, 3, 2);
  auto r = evaluate_and_backprop<double>(p, {x});
  EXPECT_DOUBLE_EQ(r.output, 2.5 * 6);
  EXPECT_TRUE(r.grads[0].isZero(0.0));
}

TEST(EvaluateAndBackprop, TanhRegressionMatchesFiniteDifferences) {
  // mean((tanh(W x) - y)^2)
  Program p{{{"matmul", {0, 1}}, {"tanh", {3}}, {"sub", {4, 2}}, {"mul", {5, 5}}, {"mean", {6}}}};
  std::mt19937_64 rng(11);
  Mats in{random_matrix(rng, 4, 4), random_matrix(rng, 4, 1), random_matrix(rng, 4, 1)};
  auto r = evaluate_and_backprop<double>(p, in);
  auto f = [&](const Mats& m) { return evaluate_and_backprop<double>(p, m).output; };
  for (std::size_t i = 0; i < in.size(); ++i) {
    auto check = compare_gradients(r.grads[i], numeric_gradient(f, in, i), 1e-4, 1e-6);
    EXPECT_TRUE(check.ok) << "input " << i << ": " << check.detail;
  }
}

TEST(EvaluateAndBackprop, UnsupportedPrimitiveIsNamed) {
  Program p{{{"cosh", {0}}, {"sum", {1}}}};
  try {
    evaluate_and_backprop<double>(p, {scalar(1.0)});
    FAIL() << "expected UnsupportedPrimitiveError";
  } catch (const UnsupportedPrimitiveError& e) {
    EXPECT_EQ(e.primitive(), "cosh");
    EXPECT_NE(std::string(e.what()).find("cosh"), std::string::npos);
  }
}

TEST(EvaluateAndBackprop, NonScalarOutputRejected) {
  Program p{{{"tanh", {0}}}};
  std::mt19937_64 rng(1);
  EXPECT_THROW(evaluate_and_backprop<double>(p, {random_matrix(rng, 2, 2)}), ShapeError);
}

TEST(EvaluateAndBackprop, InputsWithoutGradReportZero) {
  Program p{{{"mul", {0, 1}}, {"sum", {2}}}};
  auto r = evaluate_and_backprop<double>(p, {scalar(2.0), scalar(5.0)}, {true, false});
  EXPECT_DOUBLE_EQ(r.grads[0](0, 0), 5.0);
  EXPECT_DOUBLE_EQ(r.grads[1](0, 0), 0.0);
}

// Every primitive, wrapped as sum(op(inputs) .* R) with a random weight R, is
// checked against central differences (step 1e-4, rel 1e-4, abs floor 1e-6).
struct PrimitiveCase {
  std::string name;
  Instruction ins;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  Eigen::Index out_rows;
  Eigen::Index out_cols;
  bool spd_first = false;  // first input is turned into a well-conditioned SPD matrix
};

void PrintTo(const PrimitiveCase& tc, std::ostream* os) { *os << tc.name; }

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const auto& tc = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(tc.name));
  Mats in;
  for (auto [r, c] : tc.shapes) in.push_back(random_matrix(rng, r, c));
  if (tc.spd_first) {
    const auto m = in[0];
    in[0] = m * m.transpose() + Matrix<double>::Identity(m.rows(), m.rows());
  }
  const int n = static_cast<int>(in.size());
  in.push_back(random_matrix(rng, tc.out_rows, tc.out_cols));  // weight R
  std::vector<bool> rg(in.size(), true);
  rg.back() = false;
  Program p;
  p.code.push_back(tc.ins);
  p.code.push_back({"mul", {n + 1, n}});
  p.code.push_back({"sum", {n + 2}});
  auto r = evaluate_and_backprop<double>(p, in, rg);
  auto f = [&](const Mats& m) { return evaluate_and_backprop<double>(p, m, rg).output; };
  for (int i = 0; i < n; ++i) {
    auto check = compare_gradients(r.grads[i], numeric_gradient(f, in, i), 1e-4, 1e-6);
    EXPECT_TRUE(check.ok) << tc.name << " input " << i << ": " << check.detail;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradient,
    ::testing::Values(
        PrimitiveCase{"add", {"add", {0, 1}}, {{3, 4}, {3, 4}}, 3, 4},
        PrimitiveCase{"sub", {"sub", {0, 1}}, {{3, 4}, {3, 4}}, 3, 4},
        PrimitiveCase{"mul", {"mul", {0, 1}}, {{3, 4}, {3, 4}}, 3, 4},
        PrimitiveCase{"scale", {"scale", {0}, -1.7}, {{2, 5}}, 2, 5},
        PrimitiveCase{"add_scalar", {"add_scalar", {0}, 0.3}, {{2, 5}}, 2, 5},
        PrimitiveCase{"matmul", {"matmul", {0, 1}}, {{3, 4}, {4, 2}}, 3, 2},
        PrimitiveCase{"transpose", {"transpose", {0}}, {{3, 4}}, 4, 3},
        PrimitiveCase{"add_row", {"add_row", {0, 1}}, {{3, 4}, {1, 4}}, 3, 4},
        PrimitiveCase{"tanh", {"tanh", {0}}, {{3, 4}}, 3, 4},
        PrimitiveCase{"sigmoid", {"sigmoid", {0}}, {{3, 4}}, 3, 4},
        PrimitiveCase{"mean", {"mean", {0}}, {{3, 4}}, 1, 1},
        PrimitiveCase{"sum", {"sum", {0}}, {{3, 4}}, 1, 1},
        PrimitiveCase{"sum_squares", {"sum_squares", {0}}, {{3, 4}}, 1, 1},
        PrimitiveCase{"squared_error", {"squared_error", {0, 1}}, {{3, 4}, {3, 4}}, 1, 1},
        PrimitiveCase{"concat_cols", {"concat_cols", {0, 1}}, {{3, 2}, {3, 3}}, 3, 5},
        PrimitiveCase{"concat_rows", {"concat_rows", {0, 1}}, {{2, 3}, {1, 3}}, 3, 3},
        PrimitiveCase{"slice_rows", {"slice_rows", {0}, 0.0, {1, 3}}, {{4, 3}}, 2, 3},
        PrimitiveCase{"slice_cols", {"slice_cols", {0}, 0.0, {2, 5}}, {{3, 5}}, 3, 3},
        PrimitiveCase{"gather_rows", {"gather_rows", {0}, 0.0, {3, 0, 3, 1}}, {{4, 2}}, 4, 2},
        PrimitiveCase{"solve_regularized", {"solve_regularized", {0, 1, 2}}, {{4, 4}, {4, 3}, {1, 1}}, 4, 3, true},
        PrimitiveCase{"eig_real", {"eig", {0}, 0.0}, {{5, 5}}, 5, 1},
        PrimitiveCase{"eig_imag", {"eig", {0}, 1.0}, {{5, 5}}, 5, 1},
        PrimitiveCase{"instance_norm", {"instance_norm", {0}, 1e-5}, {{3, 6}}, 3, 6},
        PrimitiveCase{"lstm", {"lstm", {0, 1, 2, 3}, 0.0, {2, 3}}, {{6, 3}, {3, 8}, {2, 8}, {1, 8}}, 6, 2}),
    [](const ::testing::TestParamInfo<PrimitiveCase>& info) { return info.param.name; });

TEST(SolveRegularized, IdentitySystem) {
  const MatrixD i = MatrixD::Identity(4, 4);
  EXPECT_TRUE(solve_regularized(i, i, 0.0).isApprox(i, 1e-15));
}

TEST(SolveRegularized, ScalarShrinkage) {
  const MatrixD i = MatrixD::Identity(3, 3);
  EXPECT_TRUE(solve_regularized(i, i, 1.0).isApprox(0.5 * i, 1e-15));
}

TEST(SolveRegularized, MatchesHighPrecisionOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_matrix(rng, 5, 5);
    const MatrixD a = m * m.transpose() + 0.1 * MatrixD::Identity(5, 5);
    const MatrixD b = random_matrix(rng, 5, 5);
    const double lambda = trial % 2 ? 0.0 : 0.3;
    Matrix<long double> c = a.cast<long double>();
    c.diagonal().array() += lambda;
    const MatrixD expect = gauss_solve(c, b.cast<long double>()).cast<double>();
    const MatrixD got = solve_regularized(a, b, lambda);
    EXPECT_LE((got - expect).norm() / expect.norm(), 1e-6);
  }
}

TEST(SolveRegularized, ZeroLambdaReproducesNormalEquations) {
  std::mt19937_64 rng(8);
  const auto z = random_matrix(rng, 12, 4);
  const auto y = random_matrix(rng, 12, 4);
  const MatrixD gram = z.transpose() * z;
  const MatrixD rhs = z.transpose() * y;
  const MatrixD expect = gauss_solve(gram.cast<long double>(), rhs.cast<long double>()).cast<double>();
  EXPECT_LE((solve_regularized(gram, rhs, 0.0) - expect).norm() / expect.norm(), 1e-10);
}

TEST(SolveRegularized, SingularSystemCarriesCondition) {
  MatrixD a = MatrixD::Zero(3, 3);
  a(0, 0) = 1.0;
  try {
    solve_regularized(a, MatrixD::Identity(3, 3), 0.0);
    FAIL() << "expected SingularSystemError";
  } catch (const SingularSystemError& e) {
    EXPECT_GT(e.condition(), 1e12);
  }
}

TEST(SolveRegularized, BackwardWrtBIsTransposedInverse) {
  // d sum(X) / dB = (A + lambda I)^{-T} 1
  std::mt19937_64 rng(21);
  const auto m = random_matrix(rng, 4, 4);
  const MatrixD a = m * m.transpose() + MatrixD::Identity(4, 4);
  const MatrixD b = random_matrix(rng, 4, 3);
  const double lambda = 0.25;
  ad::Graph<double> g;
  auto va = g.input(a), vb = g.input(b), vl = g.input(MatrixD::Constant(1, 1, lambda));
  auto out = ad::sum(ad::solve_regularized(va, vb, vl));
  g.backward(out);
  MatrixD c = a;
  c.diagonal().array() += lambda;
  const MatrixD expect = c.transpose().inverse() * MatrixD::Ones(4, 3);
  EXPECT_TRUE(vb.grad().isApprox(expect, 1e-12));
  auto f = [&](const Mats& in) { return solve_regularized(in[0], in[1], lambda).sum(); };
  auto check = compare_gradients(vb.grad(), numeric_gradient(f, {a, b}, 1), 1e-4, 1e-6);
  EXPECT_TRUE(check.ok) << check.detail;
}

// --- eigenvalues ----------------------------------------------------------

ComplexScalarList sorted(ComplexScalarList v) {
  std::sort(v.begin(), v.end(), [](auto a, auto b) {
    if (std::abs(a.real() - b.real()) > 1e-9) return a.real() < b.real();
    return a.imag() < b.imag();
  });
  return v;
}

TEST(EigValues, DiagonalMatrix) {
  MatrixD k = MatrixD::Zero(2, 2);
  k(0, 0) = 0.5;
  k(1, 1) = 1.0;
  auto ev = sorted(eig_values(k));
  EXPECT_NEAR(ev[0].real(), 0.5, 1e-15);
  EXPECT_NEAR(ev[1].real(), 1.0, 1e-15);
  EXPECT_EQ(ev[0].imag(), 0.0);
  EXPECT_EQ(ev[1].imag(), 0.0);
}

TEST(EigValues, RotationSpectrumOnUnitCircle) {
  const double theta = 0.7;
  MatrixD k(2, 2);
  k << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  auto ev = sorted(eig_values(k));
  EXPECT_NEAR(std::abs(ev[0] - std::polar(1.0, -theta)), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(ev[1] - std::polar(1.0, theta)), 0.0, 1e-12);
}

// Oracle: complex Schur (ComplexEigenSolver) in long double, a different
// algorithm and precision from the real-Schur path under test.
ComplexScalarList oracle_eigenvalues(const MatrixD& k) {
  using CM = Eigen::Matrix<std::complex<long double>, Eigen::Dynamic, Eigen::Dynamic>;
  Eigen::ComplexEigenSolver<CM> solver(k.cast<std::complex<long double>>(), false);
  ComplexScalarList out;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const auto v = solver.eigenvalues()[i];
    out.emplace_back(static_cast<double>(v.real()), static_cast<double>(v.imag()));
  }
  return out;
}

TEST(EigValues, MatchesHighPrecisionOracle) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto k = random_matrix(rng, 6, 6);
    auto got = sorted(eig_values(k));
    auto expect = sorted(oracle_eigenvalues(k));
    ASSERT_EQ(got.size(), 6u);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT(std::abs(got[i] - expect[i]), 1e-6);
  }
}

TEST(EigValues, ConjugatePairsForRealInput) {
  std::mt19937_64 rng(4);
  const auto k = random_matrix(rng, 7, 7);
  auto ev = eig_values(k);
  for (const auto& v : ev) {
    const bool has_partner = std::any_of(ev.begin(), ev.end(), [&](auto w) { return std::abs(w - std::conj(v)) < 1e-6; });
    EXPECT_TRUE(has_partner);
  }
}

TEST(EigValues, SimilarityInvariant) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto k = random_matrix(rng, 5, 5);
    const MatrixD p = random_matrix(rng, 5, 5) + 3.0 * MatrixD::Identity(5, 5);
    const MatrixD sim = p * k * p.inverse();
    auto a = sorted(eig_values(k));
    auto b = sorted(eig_values(sim));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(std::abs(a[i] - b[i]), 1e-5);
  }
}

TEST(EigBackward, DegenerateSpectrumIsJitteredAndLogged) {
  const long before = degenerate_spectrum_events();
  ad::Graph<double> g;
  auto k = g.input(MatrixD::Identity(3, 3) * 0.5);
  auto e = ad::eig(k);
  auto loss = ad::sum(ad::add(e.real, e.imag));
  g.backward(loss);
  EXPECT_GT(degenerate_spectrum_events(), before);
  EXPECT_TRUE(k.grad().allFinite());
  // d trace / dK = I for the real parts of any spectrum.
  EXPECT_TRUE(k.grad().isApprox(MatrixD::Identity(3, 3), 1e-6));
}

}  // namespace
}  // namespace dksd
