// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "gtrelax/matrix.hpp"
#include "gtrelax/tensor.hpp"

namespace gtrelax::spectral {

/// Ascending eigenvalues and orthonormal eigenvectors (columns of `vectors`).
struct EigenDecomposition {
  std::vector<double> values;
  Matrix vectors;
};

/// Symmetric eigendecomposition. Each eigenvector is signed so that its
/// largest-magnitude entry is positive (ties: lowest index).
/// Throws std::invalid_argument when |L - L^T| exceeds 1e-9.
EigenDecomposition eig_sym(const Matrix& l);

/// Cyclic Jacobi reference solver, same output conventions as eig_sym.
EigenDecomposition eig_sym_jacobi(const Matrix& l, double off_tol = 1e-11);

/// Applies the sign convention in place.
void canonicalize_signs(Matrix& vectors);

/// Tolerance under which two eigenvalues count as repeated.
double degeneracy_tol(double lambda);

/// Maximal runs [begin, end) of numerically equal eigenvalues with at least
/// two members.
std::vector<std::pair<std::size_t, std::size_t>> degenerate_groups(
    const std::vector<double>& values);

struct PerturbationOperator {
  /// Pi_ij = 1 / (lambda_i - lambda_j), zero inside degenerate groups and on
  /// the diagonal, clamped to +-1e6 for gaps below 1e-6.
  Matrix pi;
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  std::size_t clamped = 0;
};

PerturbationOperator perturbation_operator(const EigenDecomposition& base);

/// Rotates eigenvectors inside each degenerate group so that U^T dL U is
/// diagonal on the group block. Outside groups the basis is unchanged.
EigenDecomposition degenerate_alignment(const EigenDecomposition& base,
                                        const Matrix& dl);

/// lambda + diag(U^T dL U).
std::vector<double> perturb_eigenvalues(const EigenDecomposition& base,
                                        const Matrix& dl);
/// U - U (Pi ⊙ U^T dL U).
Matrix perturb_eigenvectors(const EigenDecomposition& base, const Matrix& dl);

/// Differentiable first-order update of the k lowest eigenpairs, computed in
/// O(n^2 k). `dl` is an [n, n] tensor; returns values [k] and vectors [n, k].
struct PerturbedPairs {
  ad::Tensor values;
  ad::Tensor vectors;
};
PerturbedPairs perturb_lowest(const EigenDecomposition& base,
                              const PerturbationOperator& op,
                              const ad::Tensor& dl, std::size_t k);

/// L_sym = I - D^{-1/2} A D^{-1/2} on an autodiff tensor (isolated rows are
/// identity rows).
ad::Tensor laplacian_sym(const ad::Tensor& adjacency);

}  // namespace gtrelax::spectral
