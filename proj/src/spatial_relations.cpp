#include "mrsnet/spatial_relations.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <string>

#include "mrsnet/errors.hpp"

namespace mrsnet {

double AdjacencyMatrix::at(std::int64_t row, std::int64_t col) const {
  const auto begin = columns.begin() + row_offsets[row];
  const auto end = columns.begin() + row_offsets[row + 1];
  const auto it = std::lower_bound(begin, end, col);
  if (it == end || *it != col) return 0.0;
  return values[static_cast<std::size_t>(it - columns.begin())];
}

double AdjacencyMatrix::row_sum(std::int64_t row) const {
  double s = 0.0;
  for (auto k = row_offsets[row]; k < row_offsets[row + 1]; ++k) s += values[k];
  return s;
}

AdjacencyMatrix build_adjacency(std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1)
    throw ShapeError("adjacency needs a non-empty grid, got " + std::to_string(height) + "x" + std::to_string(width));
  AdjacencyMatrix a;
  a.height = height;
  a.width = width;
  a.row_offsets.reserve(static_cast<std::size_t>(height * width + 1));
  a.row_offsets.push_back(0);
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const auto first = static_cast<std::int64_t>(a.columns.size());
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const auto ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < height && nx >= 0 && nx < width) a.columns.push_back(ny * width + nx);
        }
      const auto count = static_cast<std::int64_t>(a.columns.size()) - first;
      a.values.insert(a.values.end(), static_cast<std::size_t>(count), 1.0 / static_cast<double>(count));
      a.row_offsets.push_back(static_cast<std::int64_t>(a.columns.size()));
    }
  return a;
}

std::shared_ptr<const AdjacencyMatrix> cached_adjacency(std::int64_t height, std::int64_t width) {
  static std::shared_mutex mutex;
  static std::map<std::pair<std::int64_t, std::int64_t>, std::shared_ptr<const AdjacencyMatrix>> cache;
  const auto key = std::make_pair(height, width);
  {
    std::shared_lock lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto built = std::make_shared<const AdjacencyMatrix>(build_adjacency(height, width));
  std::unique_lock lock(mutex);
  return cache.try_emplace(key, std::move(built)).first->second;
}

Tensor aggregate_context(const Tensor& x_flat, const AdjacencyMatrix& adjacency) {
  return aggregate_context(x_flat, std::make_shared<const AdjacencyMatrix>(adjacency));
}

Tensor aggregate_context(const Tensor& x_flat, std::shared_ptr<const AdjacencyMatrix> a) {
  const AdjacencyMatrix& adjacency = *a;
  if (x_flat.rank() != 3 || x_flat.dim(2) != adjacency.size())
    throw ShapeError("aggregate_context: features " + shape_str(x_flat.shape()) + " vs adjacency of " +
                     std::to_string(adjacency.size()) + " nodes");
  const auto rows = x_flat.dim(0) * x_flat.dim(1), n = adjacency.size();
  std::vector<double> out(static_cast<std::size_t>(rows * n), 0.0);
  const auto xd = x_flat.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = xd.data() + r * n;
    double* dst = out.data() + r * n;
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (auto k = adjacency.row_offsets[i]; k < adjacency.row_offsets[i + 1]; ++k)
        acc += adjacency.values[k] * src[adjacency.columns[k]];
      dst[i] = acc;
    }
  }
  return detail::make_result(x_flat.shape(), std::move(out), {&x_flat}, [x_flat, a, rows, n](const detail::TensorImpl& self) {
    auto& g = x_flat.impl()->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* go = self.grad.data() + r * n;
      double* gi = g.data() + r * n;
      for (std::int64_t i = 0; i < n; ++i)
        for (auto k = a->row_offsets[i]; k < a->row_offsets[i + 1]; ++k) gi[a->columns[k]] += a->values[k] * go[i];
    }
  });
}

GraphRefine::GraphRefine(std::int64_t dim, Rng& rng) : gcn(dim, dim, rng), output(dim, dim, rng) {
  register_module("gcn", gcn);
  register_module("output", output);
}

Tensor GraphRefine::forward(const Tensor& context) const {
  if (context.rank() != 3) throw ShapeError("graph refine expects (B, dim, N), got " + shape_str(context.shape()));
  return output.forward(ops::relu(gcn.forward(context)));
}

SpatialRelationModule::SpatialRelationModule(std::int64_t dim, Rng& rng) : refine(dim, rng), dim_(dim) {
  register_module("refine", refine);
}

Tensor SpatialRelationModule::forward(const Tensor& x2d) const {
  if (x2d.rank() != 4 || x2d.dim(1) != dim_)
    throw ConfigError("spatial relation module configured for " + std::to_string(dim_) + " channels, got " +
                      shape_str(x2d.shape()));
  const auto b = x2d.dim(0), h = x2d.dim(2), w = x2d.dim(3);
  const auto adjacency = cached_adjacency(h, w);
  auto flat = ops::reshape(x2d, {b, dim_, h * w});
  auto relationship = refine.forward(aggregate_context(flat, adjacency));
  return ops::reshape(relationship, {b, dim_, h, w});
}

}  // namespace mrsnet
