// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/spectral.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace gtrelax::spectral {

namespace {

constexpr double kPiClamp = 1e6;
constexpr double kMinGap = 1e-6;

void check_symmetric(const Matrix& l) {
  if (l.rows != l.cols) throw std::invalid_argument("eig_sym: matrix is not square");
  for (std::size_t i = 0; i < l.rows; ++i)
    for (std::size_t j = i + 1; j < l.cols; ++j)
      if (std::abs(l(i, j) - l(j, i)) > 1e-9) {
        throw std::invalid_argument("eig_sym: matrix is not symmetric at (" + std::to_string(i) + ", " +
                                    std::to_string(j) + ")");
      }
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) e(i, j) = m(i, j);
  return e;
}

// Sort eigenpairs ascending (stable on index) and canonicalize signs.
EigenDecomposition finish(std::vector<double> values, Matrix vectors) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  EigenDecomposition out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = values[order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = vectors(r, order[c]);
  }
  canonicalize_signs(out.vectors);
  return out;
}

}  // namespace

void canonicalize_signs(Matrix& u) {
  for (std::size_t c = 0; c < u.cols; ++c) {
    double mx = 0.0;
    for (std::size_t r = 0; r < u.rows; ++r) mx = std::max(mx, std::abs(u(r, c)));
    // Entries within rounding of the maximum count as ties.
    const double cut = mx * (1.0 - 1e-9);
    for (std::size_t r = 0; r < u.rows; ++r) {
      if (std::abs(u(r, c)) >= cut) {
        if (u(r, c) < 0.0)
          for (std::size_t k = 0; k < u.rows; ++k) u(k, c) = -u(k, c);
        break;
      }
    }
  }
}

EigenDecomposition eig_sym(const Matrix& l) {
  check_symmetric(l);
  if (l.rows == 0) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(l));
  if (solver.info() != Eigen::Success) throw std::runtime_error("eig_sym: eigensolver did not converge");
  const std::size_t n = l.rows;
  std::vector<double> values(n);
  Matrix vectors(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    values[c] = solver.eigenvalues()(c);
    for (std::size_t r = 0; r < n; ++r) vectors(r, c) = solver.eigenvectors()(r, c);
  }
  return finish(std::move(values), std::move(vectors));
}

EigenDecomposition eig_sym_jacobi(const Matrix& l, double off_tol) {
  check_symmetric(l);
  const std::size_t n = l.rows;
  Matrix a = l;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (l(i, j) + l(j, i));
  Matrix v = Matrix::identity(n);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  for (int sweep = 0; sweep < 100 && off_norm() > off_tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  return finish(std::move(values), std::move(v));
}

double degeneracy_tol(double lambda) { return 1e-8 * std::max(1.0, std::abs(lambda)); }

std::vector<std::pair<std::size_t, std::size_t>> degenerate_groups(const std::vector<double>& values) {
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= values.size(); ++i) {
    const bool breaks = i == values.size() || values[i] - values[i - 1] > degeneracy_tol(values[i]);
    if (breaks) {
      if (i - begin >= 2) groups.emplace_back(begin, i);
      begin = i;
    }
  }
  return groups;
}

PerturbationOperator perturbation_operator(const EigenDecomposition& base) {
  const std::size_t n = base.values.size();
  PerturbationOperator op;
  op.groups = degenerate_groups(base.values);
  op.pi = Matrix(n, n);
  std::vector<std::size_t> group_id(n);
  std::iota(group_id.begin(), group_id.end(), 0);
  for (const auto& [b, e] : op.groups)
    for (std::size_t i = b; i < e; ++i) group_id[i] = b;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || group_id[i] == group_id[j]) continue;
      const double gap = base.values[i] - base.values[j];
      if (std::abs(gap) < kMinGap) {
        op.pi(i, j) = gap > 0.0 ? kPiClamp : -kPiClamp;
        ++op.clamped;
      } else {
        op.pi(i, j) = 1.0 / gap;
      }
    }
  }
  if (op.clamped > 0) {
    std::clog << "warning: " << op.clamped / 2 << " eigen-gap(s) below " << kMinGap
              << " outside degenerate groups; perturbation weights clamped to " << kPiClamp << "\n";
  }
  return op;
}

EigenDecomposition degenerate_alignment(const EigenDecomposition& base, const Matrix& dl) {
  EigenDecomposition out = base;
  const std::size_t n = base.values.size();
  for (const auto& [b, e] : degenerate_groups(base.values)) {
    const std::size_t g = e - b;
    Eigen::MatrixXd ug(n, g);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < g; ++c) ug(r, c) = base.vectors(r, b + c);
    const Eigen::MatrixXd block = ug.transpose() * to_eigen(dl) * ug;
    const Eigen::MatrixXd sym = 0.5 * (block + block.transpose());
    if (sym.cwiseAbs().maxCoeff() == 0.0) continue;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
    Matrix rot(g, g);
    for (std::size_t r = 0; r < g; ++r)
      for (std::size_t c = 0; c < g; ++c) rot(r, c) = solver.eigenvectors()(r, c);
    canonicalize_signs(rot);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < g; ++c) {
        double s = 0.0;
        for (std::size_t t = 0; t < g; ++t) s += ug(r, t) * rot(t, c);
        out.vectors(r, b + c) = s;
      }
    }
  }
  return out;
}

std::vector<double> perturb_eigenvalues(const EigenDecomposition& base, const Matrix& dl) {
  const Matrix c = matmul(transpose(base.vectors), matmul(dl, base.vectors));
  std::vector<double> out = base.values;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c(i, i);
  return out;
}

Matrix perturb_eigenvectors(const EigenDecomposition& base, const Matrix& dl) {
  const auto op = perturbation_operator(base);
  Matrix c = matmul(transpose(base.vectors), matmul(dl, base.vectors));
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= op.pi.data[i];
  Matrix du = matmul(base.vectors, c);
  Matrix out = base.vectors;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= du.data[i];
  return out;
}

PerturbedPairs perturb_lowest(const EigenDecomposition& base, const PerturbationOperator& op,
                              const ad::Tensor& dl, std::size_t k) {
  const std::size_t n = base.values.size();
  if (dl.rank() != 2 || dl.dim(0) != n || dl.dim(1) != n) {
    ad::shape_error("perturb_lowest", dl.shape(), {n, n});
  }
  k = std::min(k, n);
  Matrix uk(n, k), pik(n, k);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) {
      uk(r, c) = base.vectors(r, c);
      pik(r, c) = op.pi(r, c);
    }
  const auto u = ad::Tensor::from_matrix(base.vectors);
  const auto ukt = ad::Tensor::from_matrix(uk);
  // C = U^T dL U_k, [n, k]
  const auto c = ad::matmul(ad::Tensor::from_matrix(transpose(base.vectors)), ad::matmul(dl, ukt));
  std::vector<std::size_t> diag_idx(k);
  for (std::size_t t = 0; t < k; ++t) diag_idx[t] = t * k + t;
  const auto lam = ad::Tensor::constant({k}, std::vector<double>(base.values.begin(), base.values.begin() + k));
  PerturbedPairs out;
  out.values = ad::add(lam, ad::gather(c, diag_idx));
  const auto du = ad::matmul(u, ad::mul(ad::Tensor::from_matrix(pik), c));
  out.vectors = ad::sub(ukt, du);
  return out;
}

ad::Tensor laplacian_sym(const ad::Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) ad::shape_error("laplacian_sym", a.shape(), a.shape());
  const std::size_t n = a.dim(0);
  const auto s = ad::rsqrt_or_zero(ad::sum_last(a));
  const auto norm = ad::mul_col(ad::mul_row(a, s), s);
  return ad::sub(ad::Tensor::from_matrix(Matrix::identity(n)), norm);
}

}  // namespace gtrelax::spectral
