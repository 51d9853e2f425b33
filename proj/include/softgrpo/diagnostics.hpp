#pragma once

// Geometry of mixed embeddings: distinct distributions that collide in
// embedding space, and the distance from a point to the nearest convex hull of
// k embedding rows (how far a noisy input is from any realizable soft token).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "softgrpo/autodiff.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/rng.hpp"

namespace softgrpo::diagnostics {

using autodiff::Tensor;

struct CollisionWitness {
  std::vector<double> p1, p2;
  double residual = 0.0;    // ||E^T (p1 - p2)||_2
  double separation = 0.0;  // ||p1 - p2||_1
};

namespace detail {
inline Eigen::MatrixXd to_eigen(const Tensor& E) {
  if (E.rank() != 2) throw DimensionError("diagnostics: E must be a matrix");
  Eigen::MatrixXd M(E.rows(), E.cols());
  for (std::size_t i = 0; i < E.rows(); ++i)
    for (std::size_t j = 0; j < E.cols(); ++j) M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = E.at(i, j);
  return M;
}
}  // namespace detail

// p1 = uniform, p2 = p1 + t*v with v a random unit vector in the null space of [E^T; 1^T].
inline CollisionWitness embedding_kernel_collision(const Tensor& E, RngStream& rng) {
  const Eigen::MatrixXd M = detail::to_eigen(E);
  const Eigen::Index V = M.rows(), d = M.cols();
  if (V <= d + 1)
    throw ContractError("embedding_kernel_collision: need |T| > d + 1, got |T|=" + std::to_string(V) +
                        " d=" + std::to_string(d));
  Eigen::MatrixXd A(d + 1, V);
  A.topRows(d) = M.transpose();
  A.row(d).setOnes();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Index rank = svd.rank();
  const Eigen::MatrixXd null = svd.matrixV().rightCols(V - rank);

  Eigen::VectorXd coef(null.cols());
  for (Eigen::Index i = 0; i < coef.size(); ++i) coef(i) = rng.normal();
  Eigen::VectorXd v = null * coef;
  const double nv = v.norm();
  if (!(nv > 0.0)) throw NumericError("embedding_kernel_collision: degenerate null-space draw");
  v /= nv;

  const double u = 1.0 / static_cast<double>(V);
  double t_max = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < V; ++i)
    if (v(i) < 0.0) t_max = std::min(t_max, u / -v(i));
  const double t = 0.5 * t_max;  // stay strictly inside the simplex

  CollisionWitness w;
  w.p1.assign(static_cast<std::size_t>(V), u);
  w.p2.resize(static_cast<std::size_t>(V));
  Eigen::VectorXd diff(V);
  for (Eigen::Index i = 0; i < V; ++i) {
    w.p2[static_cast<std::size_t>(i)] = u + t * v(i);
    diff(i) = w.p1[static_cast<std::size_t>(i)] - w.p2[static_cast<std::size_t>(i)];
  }
  w.residual = (M.transpose() * diff).norm();
  w.separation = diff.lpNorm<1>();
  if (w.separation < 1e-3) throw NumericError("embedding_kernel_collision: separation below 1e-3");
  return w;
}

// Euclidean distance from x to the convex hull of the columns of P (d x m).
// Exact: the nearest point lies in the relative interior of some face, so every
// face's affine projection is tried and infeasible ones (negative weights) skipped.
inline double hull_distance(const Eigen::MatrixXd& P, const Eigen::VectorXd& x) {
  const Eigen::Index m = P.cols();
  if (m == 0 || m > 20) throw ContractError("hull_distance: 1..20 points required");
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < (1U << m); ++mask) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < m; ++j)
      if (mask & (1U << j)) idx.push_back(j);
    const Eigen::VectorXd p0 = P.col(idx[0]);
    Eigen::VectorXd proj = p0;
    bool feasible = true;
    if (idx.size() > 1) {
      Eigen::MatrixXd D(P.rows(), static_cast<Eigen::Index>(idx.size() - 1));
      for (std::size_t j = 1; j < idx.size(); ++j) D.col(static_cast<Eigen::Index>(j - 1)) = P.col(idx[j]) - p0;
      const Eigen::VectorXd lam = D.completeOrthogonalDecomposition().solve(x - p0);
      const double w0 = 1.0 - lam.sum();
      feasible = w0 >= -1e-12 && (lam.array() >= -1e-12).all();
      proj = p0 + D * lam;
    }
    if (feasible) best = std::min(best, (x - proj).norm());
  }
  return best;
}

// Minimum over all k-subsets of embedding rows of the distance from v to their hull.
inline double top_k_hull_residual(std::span<const double> v, const Tensor& E, std::size_t k) {
  const Eigen::MatrixXd M = detail::to_eigen(E);
  const std::size_t V = E.rows(), d = E.cols();
  if (v.size() != d) throw DimensionError("top_k_hull_residual: v has wrong dimension");
  if (k == 0 || k > V) throw ContractError("top_k_hull_residual: need 1 <= k <= |T|");
  if (V > 16) throw CapacityError("top_k_hull_residual: exhaustive search refused for |T| > 16");
  Eigen::VectorXd x(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) x(static_cast<Eigen::Index>(i)) = v[i];

  // Every hull of a k-subset is the union of its faces, and every face is a
  // subset of size <= k, so walking all subsets of size <= k covers each once.
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> sel;
  auto rec = [&](auto&& self, std::size_t start) -> void {
    if (!sel.empty()) {
      const Eigen::VectorXd p0 = M.row(static_cast<Eigen::Index>(sel[0])).transpose();
      Eigen::VectorXd proj = p0;
      bool feasible = true;
      if (sel.size() > 1) {
        Eigen::MatrixXd D(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(sel.size() - 1));
        for (std::size_t j = 1; j < sel.size(); ++j)
          D.col(static_cast<Eigen::Index>(j - 1)) = M.row(static_cast<Eigen::Index>(sel[j])).transpose() - p0;
        const Eigen::VectorXd lam = D.completeOrthogonalDecomposition().solve(x - p0);
        feasible = 1.0 - lam.sum() >= -1e-12 && (lam.array() >= -1e-12).all();
        proj = p0 + D * lam;
      }
      if (feasible) best = std::min(best, (x - proj).norm());
    }
    if (sel.size() == k) return;
    for (std::size_t i = start; i < V; ++i) {
      sel.push_back(i);
      self(self, i + 1);
      sel.pop_back();
    }
  };
  rec(rec, 0);
  return best;
}

}  // namespace softgrpo::diagnostics
