#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "mrsnet/nn.hpp"

namespace mrsnet {

/// Row-normalized 8-connected pixel-grid adjacency in CSR form.
/// Self loops are excluded; every row of a grid with more than one pixel
/// sums to 1. A 1x1 grid has a single all-zero row.
struct AdjacencyMatrix {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int64_t> row_offsets;
  std::vector<std::int64_t> columns;
  std::vector<double> values;

  std::int64_t size() const { return height * width; }
  std::int64_t nonzeros() const { return static_cast<std::int64_t>(values.size()); }
  double at(std::int64_t row, std::int64_t col) const;
  double row_sum(std::int64_t row) const;
};

AdjacencyMatrix build_adjacency(std::int64_t height, std::int64_t width);

// Process-wide cache keyed by (height, width); concurrent readers, single writer.
std::shared_ptr<const AdjacencyMatrix> cached_adjacency(std::int64_t height, std::int64_t width);

// C_context = X_flat * A^T for X_flat (B, C, N): each pixel receives the
// normalized average of its neighbours.
Tensor aggregate_context(const Tensor& x_flat, const AdjacencyMatrix& adjacency);
Tensor aggregate_context(const Tensor& x_flat, std::shared_ptr<const AdjacencyMatrix> adjacency);

/// One graph-convolution layer (shared per-node linear map + ReLU) followed by
/// a 1x1 convolution: F_relationship = Conv(ReLU(W_g * C_context)).
class GraphRefine : public Module {
 public:
  GraphRefine(std::int64_t dim, Rng& rng);
  Tensor forward(const Tensor& context) const;

  Pointwise gcn;
  Pointwise output;
};

/// Context-aware spatial relation modelling on a (B, dim, H, W) map.
class SpatialRelationModule : public Module {
 public:
  SpatialRelationModule(std::int64_t dim, Rng& rng);
  Tensor forward(const Tensor& x2d) const;

  GraphRefine refine;

 private:
  std::int64_t dim_;
};

}  // namespace mrsnet
