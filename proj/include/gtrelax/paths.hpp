// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shortest paths over reciprocal edge weights R = 1/Ã, used by the relaxed
// Graphormer. Distances are computed on plain matrices; their gradients are
// taken along one frozen shortest path per pair.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "gtrelax/matrix.hpp"
#include "gtrelax/tensor.hpp"

namespace gtrelax::paths {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
/// Entries of Ã below this are treated as absent edges.
inline constexpr double kAbsentBelow = 1e-9;

/// R_ij = 1/Ã_ij; +inf where Ã_ij < kAbsentBelow and on the diagonal.
Matrix reciprocal_weights(const Matrix& a);

struct ShortestPathResult {
  std::size_t n = 0;
  /// dist(i, j); +inf when unreachable.
  Matrix dist;
  /// pred[i * n + j]: node before j on the chosen path from i, -1 if none.
  std::vector<std::int32_t> pred;

  bool reachable(std::size_t i, std::size_t j) const { return dist(i, j) != kInf; }
  /// Node sequence i, ..., j of the chosen path. Empty when unreachable.
  std::vector<std::size_t> path(std::size_t i, std::size_t j) const;
};

/// Dijkstra from every source on weights R (off-diagonal entries >= 0 or inf).
/// Among equal-length paths the one with the lexicographically smallest node
/// sequence is kept. Sources run in parallel.
ShortestPathResult all_pairs_shortest(const Matrix& r);
/// Same result computed one source at a time; reference for the parallel path.
ShortestPathResult all_pairs_shortest_serial(const Matrix& r);

/// Hop distances by BFS over entries > 0; +inf when unreachable.
Matrix bfs_hops(const Matrix& a);

/// Σ 1/Ã over the frozen path edges between i and j, differentiable in `a`.
/// Throws std::invalid_argument when j is unreachable from i.
ad::Tensor path_sum_proxy(const ad::Tensor& a, const ShortestPathResult& res,
                          std::size_t i, std::size_t j);

/// All-pairs rspd as an [n, n] tensor with gradients along the frozen paths.
/// Unreachable pairs hold 0; use `res.reachable` to tell them apart.
ad::Tensor rspd_tensor(const ad::Tensor& a, const ShortestPathResult& res);

/// Interpolated bias of one distance: η·b[s+1] + (1-η)·b[s], s = floor(rspd),
/// clamped to b[S_max] at and beyond S_max = table.size() - 1. `rspd` is a
/// single-element tensor; an unreachable pair returns `unreachable`.
ad::Tensor spd_bias(const ad::Tensor& rspd, bool reachable, const ad::Tensor& table,
                    const ad::Tensor& unreachable);

/// Per-head bias for every pair. `rspd` [n, n], `table` [S_max + 1, H],
/// `unreachable` [H]. When `virtual_bias` [H] is defined, a virtual node is
/// appended as index n and every pair touching it gets virtual_bias.
/// Returns [H, m * m] with m = n or n + 1.
ad::Tensor spd_bias_heads(const ad::Tensor& rspd, std::span<const std::uint8_t> reachable,
                          const ad::Tensor& table, const ad::Tensor& unreachable,
                          const ad::Tensor& virtual_bias = {});

}  // namespace gtrelax::paths
