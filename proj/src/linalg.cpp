#include "ftl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftl/errors.hpp"

namespace ftl::linalg {

namespace {

std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_square(const Matrix& a, const char* op) {
  if (a.rows() != a.cols()) {
    throw std::invalid_argument(std::string(op) + ": matrix must be square, got " + shape_of(a));
  }
}

// Off-diagonal Frobenius norm, the Jacobi convergence measure.
double offdiag_norm(const Matrix& s) {
  double acc = 0.0;
  for (Index p = 0; p < s.rows(); ++p) {
    for (Index q = p + 1; q < s.cols(); ++q) {
      acc += 2.0 * s(p, q) * s(p, q);
    }
  }
  return std::sqrt(acc);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch " + shape_of(a) + " * " + shape_of(b));
  }
  return a * b;
}

Eigh jacobi_eigh(const Matrix& a, int max_sweeps) {
  require_square(a, "jacobi_eigh");
  const Index n = a.rows();
  if (n == 0) return {Vector(0), Matrix(0, 0)};

  double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if (asym > 1e-9 * scale) {
    warn("jacobi_eigh: input asymmetry " + std::to_string(asym) + " exceeds tolerance, symmetrizing");
  }
  Matrix s = 0.5 * (a + a.transpose());
  Matrix v = Matrix::Identity(n, n);

  const double norm = std::max(s.norm(), std::numeric_limits<double>::min());
  const double tol = 1e-14 * norm;

  double off = offdiag_norm(s);
  int sweep = 0;
  while (off > tol && sweep < max_sweeps) {
    // Rotations below this threshold are skipped within the sweep.
    const double small = off / (static_cast<double>(n) * static_cast<double>(n));
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        if (std::abs(s(p, q)) <= small * 1e-3) continue;
        Eigen::JacobiRotation<double> rot;
        rot.makeJacobi(s(p, p), s(p, q), s(q, q));
        s.applyOnTheLeft(p, q, rot.adjoint());
        s.applyOnTheRight(p, q, rot);
        s(p, q) = 0.0;
        s(q, p) = 0.0;
        v.applyOnTheRight(p, q, rot);
      }
    }
    off = offdiag_norm(s);
    ++sweep;
  }
  if (off > tol) {
    throw std::runtime_error("jacobi_eigh: no convergence after " + std::to_string(max_sweeps) +
                             " sweeps, off-diagonal residual " + std::to_string(off));
  }

  // Stable descending sort; ties keep original diagonal order.
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return s(i, i) > s(j, j); });

  Eigh out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    out.values(k) = s(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

Matrix cholesky_factor(const Matrix& a) {
  require_square(a, "cholesky_factor");
  const Index n = a.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0)) {
      throw NotPositiveDefinite(static_cast<int>(j));
    }
    l(j, j) = std::sqrt(d);
    for (Index i = j + 1; i < n; ++i) {
      double s = a(i, j) - l.row(i).head(j).dot(l.row(j).head(j));
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Matrix cholesky_solve(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("cholesky_solve: shape mismatch " + shape_of(a) + " vs " + shape_of(b));
  }
  Matrix l = cholesky_factor(a);
  Matrix y = l.triangularView<Eigen::Lower>().solve(b);
  return l.transpose().triangularView<Eigen::Upper>().solve(y);
}

GeneralizedEigh generalized_eigh(const Matrix& a, const Matrix& b, Index m) {
  require_square(a, "generalized_eigh");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("generalized_eigh: A is " + shape_of(a) + " but B is " + shape_of(b));
  }
  if (m < 0 || m > a.rows()) {
    throw std::invalid_argument("generalized_eigh: m = " + std::to_string(m) + " out of range for n = " +
                                std::to_string(a.rows()));
  }
  Matrix l = cholesky_factor(b);
  // C = L^-1 A L^-T, kept symmetric against accumulated round-off.
  Matrix c = l.triangularView<Eigen::Lower>().solve(a);
  c = l.triangularView<Eigen::Lower>().solve(Matrix(c.transpose()));
  c = 0.5 * (c + c.transpose());
  Eigh e = jacobi_eigh(c);
  Matrix y = e.vectors.leftCols(m);
  GeneralizedEigh out;
  out.values = e.values.head(m);
  out.vectors = l.transpose().triangularView<Eigen::Upper>().solve(y);
  return out;
}

}  // namespace ftl::linalg
