#pragma once

// Dense real linear algebra used throughout the library. Matrices are plain
// Eigen::MatrixXd values; the free functions here add the norms,
// decompositions and samplers the training and flow code needs, with the
// tolerances pinned in one place.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dlnet/errors.hpp"

namespace dlnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

inline constexpr double kDefaultRankTol = 1e-8;
inline constexpr double kSymmetryTol = 1e-8;
inline constexpr double kNegativeEigenTol = 1e-8;

inline std::string shape_str(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

inline void require_finite(const Matrix& a, const char* what = "matrix") {
  if (!a.allFinite()) throw ContractViolation(std::string(what) + " has non-finite entries");
}

// Builds a matrix from row-major entries. Rejects size mismatches and
// non-finite values.
inline Matrix make_matrix(Eigen::Index rows, Eigen::Index cols, std::span<const double> row_major) {
  if (rows <= 0 || cols <= 0) throw DimensionError("matrix dimensions must be positive");
  if (static_cast<Eigen::Index>(row_major.size()) != rows * cols)
    throw DimensionError("entry count " + std::to_string(row_major.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  Matrix a(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) a(i, j) = row_major[static_cast<std::size_t>(i * cols + j)];
  require_finite(a);
  return a;
}

inline Matrix make_matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<Eigen::Index>(rows.size());
  const auto c = r == 0 ? 0 : static_cast<Eigen::Index>(rows.begin()->size());
  std::vector<double> flat;
  for (const auto& row : rows) {
    if (static_cast<Eigen::Index>(row.size()) != c) throw DimensionError("ragged row list");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return make_matrix(r, c, flat);
}

inline Matrix identity(Eigen::Index n) { return Matrix::Identity(n, n); }

inline Matrix diag(std::initializer_list<double> entries) {
  Vector v(static_cast<Eigen::Index>(entries.size()));
  Eigen::Index i = 0;
  for (double e : entries) v(i++) = e;
  return v.asDiagonal();
}

struct SvdResult {
  Matrix u;                // orthonormal columns
  Vector singular_values;  // nonincreasing
  Matrix vt;               // orthonormal rows
};

inline SvdResult svd(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("svd of an empty matrix");
  Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {dec.matrixU(), dec.singularValues(), dec.matrixV().transpose()};
}

inline Vector singular_values(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("singular values of an empty matrix");
  return Eigen::BDCSVD<Matrix>(a).singularValues();
}

inline double spectral_norm(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("spectral norm of an empty matrix");
  return singular_values(a)(0);
}

inline double frobenius_norm(const Matrix& a) { return a.norm(); }

inline double smallest_singular_value(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("smallest singular value of an empty matrix");
  const Vector s = singular_values(a);
  return s(s.size() - 1);
}

// Spectral norm of a symmetric matrix as max |eigenvalue|. Same value as
// spectral_norm, cheaper for the balancedness gaps evaluated every iterate.
inline double symmetric_spectral_norm(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("spectral norm of an empty matrix");
  if (a.rows() != a.cols()) throw DimensionError("symmetric_spectral_norm needs a square matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

// Largest eigenvalue of A A^T, i.e. ||A||^2, taken over the smaller Gram.
inline double spectral_norm_sq(const Matrix& a) {
  if (a.size() == 0) throw DimensionError("spectral norm of an empty matrix");
  const Matrix gram = a.rows() <= a.cols() ? Matrix(a * a.transpose()) : Matrix(a.transpose() * a);
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
  return std::max(0.0, es.eigenvalues().maxCoeff());
}

// A^p for symmetric positive semidefinite A via eigendecomposition.
// Eigenvalues are clamped at zero; those within the eigensolver's noise
// floor (dim * 64 eps * lambda_max) are treated as exact zeros so that
// rank-deficient inputs keep their null space under fractional exponents.
inline Matrix sym_fractional_power(const Matrix& a, double p) {
  if (a.rows() != a.cols()) throw DimensionError("fractional power needs a square matrix, got " + shape_str(a));
  if (!(p >= 0.0)) throw ContractViolation("fractional power exponent must be nonnegative");
  const auto n = a.rows();
  if (p == 0.0) return identity(n);
  const double fro = a.norm();
  if ((a - a.transpose()).norm() > kSymmetryTol * fro)
    throw ContractViolation("fractional power input is not symmetric");
  if (fro == 0.0) return Matrix::Zero(n, n);

  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
  const Vector& lam = es.eigenvalues();
  const double lam_max = lam.cwiseAbs().maxCoeff();
  if (lam.minCoeff() < -kNegativeEigenTol * lam_max)
    throw ContractViolation("fractional power input has a negative eigenvalue " + std::to_string(lam.minCoeff()));
  const double floor = static_cast<double>(n) * 64.0 * std::numeric_limits<double>::epsilon() * lam_max;
  Vector powered(n);
  for (Eigen::Index i = 0; i < n; ++i) powered(i) = lam(i) <= floor ? 0.0 : std::pow(lam(i), p);
  return es.eigenvectors() * powered.asDiagonal() * es.eigenvectors().transpose();
}

// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
// the signs of R's diagonal folded into Q.
inline Matrix random_orthogonal(Eigen::Index n, Rng& rng) {
  if (n < 1) throw DimensionError("random_orthogonal needs n >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix g(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * identity(n);
  const Matrix& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

inline Matrix random_orthogonal(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return random_orthogonal(n, rng);
}

// Number of singular values strictly above rel_tol * sigma_max.
inline int numerical_rank(const Matrix& a, double rel_tol = kDefaultRankTol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw ParameterError("rank tolerance must lie in (0, 1)");
  if (a.size() == 0) return 0;
  const Vector s = singular_values(a);
  if (s(0) == 0.0) return 0;
  const double cut = rel_tol * s(0);
  return static_cast<int>((s.array() > cut).count());
}

// ---------------------------------------------------------------------------
// Text serialization: "# rows=<r> cols=<c>" followed by one CSV line per row.

inline void write_matrix_csv(std::ostream& os, const Matrix& a) {
  os << "# rows=" << a.rows() << " cols=" << a.cols() << '\n';
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (j) os << ',';
      os << a(i, j);
    }
    os << '\n';
  }
}

namespace detail {

inline bool parse_header_field(const std::string& line, const std::string& key, long& out) {
  const auto pos = line.find(key + "=");
  if (pos == std::string::npos) return false;
  try {
    out = std::stol(line.substr(pos + key.size() + 1));
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

inline bool next_nonempty_line(std::istream& is, std::string& line) {
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) return true;
  }
  return false;
}

inline Matrix read_matrix_body(std::istream& is, long rows, long cols) {
  if (rows <= 0 || cols <= 0) throw DimensionError("matrix header has nonpositive dimensions");
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(rows * cols));
  std::string line;
  for (long i = 0; i < rows; ++i) {
    if (!next_nonempty_line(is, line)) throw DimensionError("matrix CSV ended after " + std::to_string(i) + " rows");
    std::stringstream ss(line);
    std::string cell;
    long count = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        flat.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ContractViolation("unparsable matrix entry '" + cell + "'");
      }
      ++count;
    }
    if (count != cols)
      throw DimensionError("row " + std::to_string(i) + " has " + std::to_string(count) + " entries, expected " +
                           std::to_string(cols));
  }
  return make_matrix(rows, cols, flat);
}

}  // namespace detail

inline Matrix read_matrix_csv(std::istream& is) {
  std::string line;
  if (!detail::next_nonempty_line(is, line)) throw DimensionError("empty matrix CSV");
  long rows = 0, cols = 0;
  if (line.rfind('#', 0) != 0 || !detail::parse_header_field(line, "rows", rows) ||
      !detail::parse_header_field(line, "cols", cols))
    throw ContractViolation("matrix CSV must start with '# rows=<r> cols=<c>', got '" + line + "'");
  return detail::read_matrix_body(is, rows, cols);
}

inline void save_matrix(const std::string& path, const Matrix& a) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_matrix_csv(os, a);
  if (!os) throw IoError(path, "write failed");
}

inline Matrix load_matrix(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_matrix_csv(is);
}

}  // namespace dlnet
