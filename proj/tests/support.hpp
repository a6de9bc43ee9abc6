#pragma once

// Test-only helpers. The numerical oracles here deliberately avoid Eigen's
// decompositions so they check the library along an independent route.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "elorax/adapter_store.hpp"
#include "elorax/linalg.hpp"
#include "elorax/rng.hpp"

namespace testing {

using elorax::RowMatrix;
using elorax::Vector;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("elorax_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as rows.
struct EigenPairs {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};

inline EigenPairs jacobi_eigen(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p];
          const double akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k];
          const double aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p];
          const double vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  EigenPairs out;
  for (std::size_t i : order) {
    out.values.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    out.vectors.push_back(std::move(col));
  }
  return out;
}

/// Squared singular values of `m` (descending) from the Jacobi oracle on the
/// smaller Gram matrix.
inline std::vector<double> squared_singular_values(const RowMatrix& m) {
  const bool use_cols = m.cols() <= m.rows();
  const Eigen::Index k = use_cols ? m.cols() : m.rows();
  std::vector<std::vector<double>> g(k, std::vector<double>(k, 0.0));
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) {
      double s = 0.0;
      if (use_cols)
        for (Eigen::Index r = 0; r < m.rows(); ++r) s += m(r, i) * m(r, j);
      else
        for (Eigen::Index c = 0; c < m.cols(); ++c) s += m(i, c) * m(j, c);
      g[i][j] = s;
    }
  auto vals = jacobi_eigen(std::move(g)).values;
  for (auto& v : vals) v = std::max(v, 0.0);
  return vals;
}

/// Solves a x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> gauss_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

/// Least squares min ||target - coef^T basis||_F per target row via normal
/// equations, returning coef (K x rows(target)).
inline RowMatrix normal_equations_fit(const RowMatrix& basis, const RowMatrix& target) {
  const Eigen::Index k = basis.rows();
  std::vector<std::vector<double>> g(k, std::vector<double>(k, 0.0));
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) g[i][j] = basis.row(i).dot(basis.row(j));
  RowMatrix coef(k, target.rows());
  for (Eigen::Index t = 0; t < target.rows(); ++t) {
    std::vector<double> rhs(k);
    for (Eigen::Index i = 0; i < k; ++i) rhs[i] = basis.row(i).dot(target.row(t));
    const auto x = gauss_solve(g, rhs);
    for (Eigen::Index i = 0; i < k; ++i) coef(i, t) = x[i];
  }
  return coef;
}

inline double rel_diff(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

inline RowMatrix random_matrix(elorax::Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  return elorax::gaussian_matrix(rows, cols, rng);
}

/// Adapter bundle with one A and one B matrix per site; values rounded to
/// f32 so the on-disk form is exact.
inline elorax::AdapterBundle random_bundle(elorax::Rng& rng, const std::string& id,
                                           const std::vector<std::string>& sites, Eigen::Index m,
                                           Eigen::Index n, Eigen::Index r) {
  elorax::AdapterBundle b;
  b.adapter_id = id;
  b.base_model_id = "base";
  b.rank_hint = static_cast<std::uint64_t>(r);
  for (const auto& s : sites) {
    RowMatrix a = random_matrix(rng, r, n).cast<float>().cast<double>();
    RowMatrix bm = random_matrix(rng, m, r).cast<float>().cast<double>();
    b.sites.emplace(elorax::SiteId{s, elorax::Role::A}, elorax::SiteMatrix(a, elorax::DType::F32));
    b.sites.emplace(elorax::SiteId{s, elorax::Role::B}, elorax::SiteMatrix(bm, elorax::DType::F32));
  }
  return b;
}

}  // namespace testing
