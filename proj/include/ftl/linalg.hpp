#pragma once

#include "ftl/types.hpp"

namespace ftl::linalg {

// Descending eigenvalues with matching orthonormal eigenvector columns.
struct Eigh {
  Vector values;
  Matrix vectors;
};

// Dimension-checked product; throws std::invalid_argument naming both shapes.
Matrix matmul(const Matrix& a, const Matrix& b);

// Symmetric eigendecomposition by cyclic Jacobi sweeps. The input is
// symmetrized as (A + A^T)/2 first; asymmetry beyond 1e-9 raises a warning.
// Eigenvalues are sorted descending, ties broken by original diagonal index.
// Throws std::runtime_error with the off-diagonal residual if the sweeps do
// not converge.
Eigh jacobi_eigh(const Matrix& a, int max_sweeps = 100);

// Lower-triangular Cholesky factor of an SPD matrix.
// Throws NotPositiveDefinite with the failing pivot index.
Matrix cholesky_factor(const Matrix& a);

// Solves A X = B for SPD A via the Cholesky factorization.
Matrix cholesky_solve(const Matrix& a, const Matrix& b);

// Top-m solutions of A w = lambda B w for symmetric A and SPD B, computed as
// B = L L^T, eigendecomposition of L^-1 A L^-T, back-map w = L^-T y.
// Columns are B-orthonormal and ordered by descending eigenvalue.
struct GeneralizedEigh {
  Vector values;   // m entries
  Matrix vectors;  // n x m
};
GeneralizedEigh generalized_eigh(const Matrix& a, const Matrix& b, Index m);

}  // namespace ftl::linalg
