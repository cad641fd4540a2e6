#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "dlnet/matrix.hpp"
#include "oracles.hpp"

using namespace dlnet;

TEST(SpectralNorm, Identity) { EXPECT_NEAR(spectral_norm(identity(3)), 1.0, 1e-15); }

TEST(SpectralNorm, Diagonal) { EXPECT_NEAR(spectral_norm(diag({3, 1})), 3.0, 1e-14); }

TEST(SpectralNorm, MatchesJacobiOracle) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = oracle::gaussian(5, 4, rng);
    EXPECT_NEAR(spectral_norm(a), oracle::spectral_norm(a), 1e-9);
  }
}

TEST(SpectralNorm, EmptyThrows) {
  EXPECT_THROW(spectral_norm(Matrix(0, 0)), DimensionError);
  EXPECT_THROW(smallest_singular_value(Matrix(0, 3)), DimensionError);
}

TEST(FrobeniusNorm, Examples) {
  EXPECT_NEAR(frobenius_norm(identity(3)), std::sqrt(3.0), 1e-15);
  EXPECT_EQ(frobenius_norm(Matrix::Zero(2, 2)), 0.0);
  EXPECT_NEAR(frobenius_norm(make_matrix({{1, 2}, {3, 4}})), std::sqrt(30.0), 1e-14);
}

TEST(SmallestSingularValue, Examples) {
  EXPECT_NEAR(smallest_singular_value(identity(3)), 1.0, 1e-15);
  EXPECT_NEAR(smallest_singular_value(diag({3, 1})), 1.0, 1e-14);
  EXPECT_NEAR(smallest_singular_value(make_matrix({{1, 1}, {1, 1}})), 0.0, 1e-10);
}

TEST(SmallestSingularValue, WideMatrixUsesRowCount) {
  std::mt19937_64 rng(2);
  const Matrix a = oracle::gaussian(3, 7, rng);
  EXPECT_NEAR(smallest_singular_value(a), oracle::jacobi_singular_values(a).back(), 1e-10);
}

TEST(Svd, ReconstructsAndSorted) {
  std::mt19937_64 rng(5);
  for (auto [r, c] : {std::pair{6, 4}, std::pair{3, 8}, std::pair{5, 5}}) {
    const Matrix a = oracle::gaussian(r, c, rng);
    const SvdResult s = svd(a);
    const Matrix rec = s.u * s.singular_values.asDiagonal() * s.vt;
    EXPECT_LE((rec - a).norm(), 1e-10 * (1.0 + a.norm()));
    for (Eigen::Index i = 1; i < s.singular_values.size(); ++i) EXPECT_GE(s.singular_values(i - 1), s.singular_values(i));
    const auto ref = oracle::jacobi_singular_values(a);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(s.singular_values(static_cast<Eigen::Index>(i)), ref[i], 1e-10);
  }
}

TEST(NormProperty, SpectralFrobeniusSandwich) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int t = 0; t < 100; ++t) {
    const Matrix a = oracle::gaussian(dim(rng), dim(rng), rng);
    const double s = spectral_norm(a), f = frobenius_norm(a);
    EXPECT_LE(s, f * (1 + 1e-14));
    EXPECT_LE(f, std::sqrt(static_cast<double>(std::min(a.rows(), a.cols()))) * s * (1 + 1e-14));
  }
}

TEST(SymmetricSpectralNorm, MatchesSvd) {
  std::mt19937_64 rng(3);
  const Matrix b = oracle::gaussian(6, 6, rng);
  const Matrix s = b + b.transpose();
  EXPECT_NEAR(symmetric_spectral_norm(s), oracle::spectral_norm(s), 1e-10);
}

TEST(SpectralNormSq, MatchesSquareOfNorm) {
  std::mt19937_64 rng(4);
  for (auto [r, c] : {std::pair{2, 9}, std::pair{9, 2}, std::pair{4, 4}}) {
    const Matrix a = oracle::gaussian(r, c, rng);
    const double s = oracle::spectral_norm(a);
    EXPECT_NEAR(spectral_norm_sq(a), s * s, 1e-10 * s * s);
  }
}

TEST(FractionalPower, Examples) {
  EXPECT_LE((sym_fractional_power(identity(2), 0.5) - identity(2)).norm(), 1e-14);
  EXPECT_NEAR(sym_fractional_power(diag({16}), 0.5)(0, 0), 4.0, 1e-13);
  const Matrix c = sym_fractional_power(diag({8, 27}), 1.0 / 3.0);
  EXPECT_NEAR(c(0, 0), 2.0, 1e-13);
  EXPECT_NEAR(c(1, 1), 3.0, 1e-13);
  EXPECT_NEAR(c(0, 1), 0.0, 1e-13);
}

TEST(FractionalPower, ZeroExponentIsIdentity) {
  EXPECT_EQ(sym_fractional_power(Matrix::Zero(3, 3), 0.0), identity(3));
}

TEST(FractionalPower, SquareRootSquaredReconstructs) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 30; ++t) {
    const Matrix b = oracle::gaussian(5, 3, rng);  // rank-deficient PSD
    const Matrix a = b * b.transpose();
    const Matrix h = sym_fractional_power(a, 0.5);
    EXPECT_LE((h * h - a).norm(), 1e-8 * a.norm());
  }
}

TEST(FractionalPower, PowersCompose) {
  std::mt19937_64 rng(10);
  const Matrix b = oracle::gaussian(4, 4, rng);
  const Matrix a = b * b.transpose();
  const Matrix p = sym_fractional_power(a, 1.0 / 3.0);
  EXPECT_LE((p * p * p - a).norm(), 1e-9 * a.norm());
}

TEST(FractionalPower, Errors) {
  EXPECT_THROW(sym_fractional_power(make_matrix({{1, 2}, {0, 1}}), 0.5), ContractViolation);
  EXPECT_THROW(sym_fractional_power(diag({1, -0.5}), 0.5), ContractViolation);
  EXPECT_THROW(sym_fractional_power(Matrix::Zero(2, 3), 0.5), DimensionError);
  // Roundoff-sized negative eigenvalues are treated as zero.
  const Matrix c = sym_fractional_power(diag({1, -1e-12}), 0.5);
  EXPECT_NEAR(c(1, 1), 0.0, 1e-15);
}

TEST(RandomOrthogonal, OneByOne) {
  for (std::uint64_t s = 0; s < 10; ++s) EXPECT_EQ(std::abs(random_orthogonal(1, s)(0, 0)), 1.0);
}

TEST(RandomOrthogonal, OrthogonalOverManySeeds) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>((s * 37) % 200);
    const Matrix q = random_orthogonal(n, s);
    EXPECT_LE((q.transpose() * q - identity(n)).norm(), 1e-10) << "n=" << n;
  }
}

TEST(RandomOrthogonal, SeedsDifferAndRepeat) {
  EXPECT_GT((random_orthogonal(5, 1) - random_orthogonal(5, 2)).norm(), 1e-6);
  EXPECT_EQ(random_orthogonal(5, 1), random_orthogonal(5, 1));
}

TEST(RandomOrthogonal, FirstColumnUnbiased) {
  // Haar measure: E[Q_00] = 0 and E[Q_00^2] = 1/n.
  const int n = 4, trials = 4000;
  double mean = 0.0, sq = 0.0;
  for (int s = 0; s < trials; ++s) {
    const double v = random_orthogonal(n, static_cast<std::uint64_t>(s))(0, 0);
    mean += v;
    sq += v * v;
  }
  EXPECT_NEAR(mean / trials, 0.0, 0.03);
  EXPECT_NEAR(sq / trials, 1.0 / n, 0.02);
}

TEST(NumericalRank, Examples) {
  EXPECT_EQ(numerical_rank(identity(3), 1e-8), 3);
  EXPECT_EQ(numerical_rank(diag({1, 1e-15}), 1e-8), 1);
  std::mt19937_64 rng(12);
  const Matrix u = oracle::gaussian(5, 1, rng), v = oracle::gaussian(4, 1, rng);
  EXPECT_EQ(numerical_rank(u * v.transpose(), 1e-8), 1);
  EXPECT_EQ(numerical_rank(Matrix::Zero(3, 3)), 0);
  EXPECT_THROW(numerical_rank(identity(2), 0.0), ParameterError);
}

TEST(NumericalRank, InvariantUnderOrthogonalMultiplication) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> rk(0, 5);
  for (int t = 0; t < 100; ++t) {
    const int k = rk(rng);
    const Matrix a = oracle::gaussian(6, k, rng) * oracle::gaussian(k, 5, rng);
    const int r0 = numerical_rank(a);
    EXPECT_EQ(r0, k);
    const Matrix q1 = random_orthogonal(6, rng), q2 = random_orthogonal(5, rng);
    EXPECT_EQ(numerical_rank(q1 * a), r0);
    EXPECT_EQ(numerical_rank(a * q2), r0);
  }
}

TEST(MatrixConstruction, RowMajorEntries) {
  const std::vector<double> e{1, 2, 3, 4, 5, 6};
  const Matrix a = make_matrix(2, 3, e);
  EXPECT_EQ(a(0, 2), 3.0);
  EXPECT_EQ(a(1, 0), 4.0);
  EXPECT_THROW(make_matrix(2, 2, e), DimensionError);
  const std::vector<double> bad{1, std::nan("")};
  EXPECT_THROW(make_matrix(1, 2, bad), ContractViolation);
  EXPECT_THROW(make_matrix({{1, 2}, {3}}), DimensionError);
}

TEST(MatrixCsv, RoundTripIsExact) {
  std::mt19937_64 rng(14);
  const Matrix a = oracle::gaussian(3, 4, rng);
  std::stringstream ss;
  write_matrix_csv(ss, a);
  EXPECT_EQ(ss.str().rfind("# rows=3 cols=4\n", 0), 0u);
  const Matrix b = read_matrix_csv(ss);
  EXPECT_EQ(a, b);
}

TEST(MatrixCsv, MalformedInput) {
  std::stringstream no_header("1,2\n3,4\n");
  EXPECT_THROW(read_matrix_csv(no_header), ContractViolation);
  std::stringstream short_row("# rows=2 cols=2\n1,2\n3\n");
  EXPECT_THROW(read_matrix_csv(short_row), DimensionError);
  std::stringstream truncated("# rows=3 cols=1\n1\n2\n");
  EXPECT_THROW(read_matrix_csv(truncated), DimensionError);
  std::stringstream bad_number("# rows=1 cols=2\n1,abc\n");
  EXPECT_THROW(read_matrix_csv(bad_number), ContractViolation);
  EXPECT_THROW(load_matrix("/nonexistent/dir/m.csv"), IoError);
}
