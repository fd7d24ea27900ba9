#include <cmath>
#include <thread>

#include "doctest.h"
#include "mrsnet/errors.hpp"
#include "mrsnet/spatial_relations.hpp"
#include "support/gradcheck.hpp"

using namespace mrsnet;

namespace {

// Dense reference: 1/deg for each 8-connected neighbour, no self loop.
std::vector<double> dense_adjacency(std::int64_t h, std::int64_t w) {
  const auto n = h * w;
  std::vector<double> a(n * n, 0.0);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      std::vector<std::int64_t> nb;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!dy && !dx) continue;
          const auto yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) nb.push_back(yy * w + xx);
        }
      for (auto j : nb) a[(y * w + x) * n + j] = 1.0 / static_cast<double>(nb.size());
    }
  return a;
}

}  // namespace

TEST_CASE("2x2 adjacency is 1/3 between every distinct pair") {
  const auto a = build_adjacency(2, 2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(a.at(i, j) == doctest::Approx(i == j ? 0.0 : 1.0 / 3.0));
}

TEST_CASE("3x3 adjacency degrees") {
  const auto a = build_adjacency(3, 3);
  auto row_entries = [&](std::int64_t r) { return a.row_offsets[r + 1] - a.row_offsets[r]; };
  CHECK(row_entries(4) == 8);
  for (auto c : {0, 2, 6, 8}) CHECK(row_entries(c) == 3);
  for (auto e : {1, 3, 5, 7}) CHECK(row_entries(e) == 5);
  for (std::int64_t k = a.row_offsets[4]; k < a.row_offsets[5]; ++k) CHECK(a.values[k] == doctest::Approx(1.0 / 8));
  for (std::int64_t k = a.row_offsets[0]; k < a.row_offsets[1]; ++k) CHECK(a.values[k] == doctest::Approx(1.0 / 3));
  for (std::int64_t k = a.row_offsets[1]; k < a.row_offsets[2]; ++k) CHECK(a.values[k] == doctest::Approx(1.0 / 5));
}

TEST_CASE("1x1 grid has a single zero row") {
  const auto a = build_adjacency(1, 1);
  CHECK(a.size() == 1);
  CHECK(a.nonzeros() == 0);
  CHECK(a.row_sum(0) == 0.0);
}

TEST_CASE("adjacency matches a dense reference and rows sum to one up to 32x32") {
  for (auto [h, w] : std::vector<std::pair<int, int>>{{1, 5}, {2, 7}, {5, 3}, {8, 8}, {17, 4}, {32, 32}}) {
    const auto a = build_adjacency(h, w);
    const auto n = a.size();
    for (std::int64_t r = 0; r < n; ++r) CHECK(std::abs(a.row_sum(r) - 1.0) <= 1e-6);
    if (n <= 64) {
      const auto ref = dense_adjacency(h, w);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) CHECK(a.at(i, j) == doctest::Approx(ref[i * n + j]));
    }
  }
  CHECK_THROWS(build_adjacency(0, 3));
}

TEST_CASE("aggregation averages neighbours") {
  const auto a = build_adjacency(2, 2);
  Tensor x({1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  const auto y = aggregate_context(x, a);
  CHECK(y.at({0, 0, 0}) == doctest::Approx(3.0));
  CHECK(y.at({0, 0, 3}) == doctest::Approx(2.0));

  const auto c = aggregate_context(Tensor({2, 3, 9}, 5.0), build_adjacency(3, 3));
  for (double v : c.data()) CHECK(v == doctest::Approx(5.0));
  const auto z = aggregate_context(Tensor({1, 2, 9}, 0.0), build_adjacency(3, 3));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("aggregation is linear") {
  Rng rng(4);
  const auto a = build_adjacency(4, 5);
  auto u = uniform_tensor({2, 3, 20}, -1, 1, rng), v = uniform_tensor({2, 3, 20}, -1, 1, rng);
  const auto lhs = aggregate_context(ops::add(ops::scale(u, 2.0), ops::scale(v, -3.0)), a);
  const auto rhs = ops::add(ops::scale(aggregate_context(u, a), 2.0), ops::scale(aggregate_context(v, a), -3.0));
  for (std::size_t i = 0; i < lhs.data().size(); ++i) CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-6);
  CHECK_THROWS_AS(aggregate_context(Tensor({1, 3, 19}), a), ShapeError);
}

TEST_CASE("adjacency cache returns one shared instance under concurrency") {
  std::vector<std::shared_ptr<const AdjacencyMatrix>> got(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&, i] { got[i] = cached_adjacency(6, 7); });
  for (auto& t : threads) t.join();
  for (int i = 1; i < 4; ++i) CHECK(got[i].get() == got[0].get());
  CHECK(cached_adjacency(7, 6).get() != got[0].get());
}

TEST_CASE("graph refine with zero weights outputs zeros and preserves shape") {
  Rng rng(5);
  GraphRefine g(64, rng);
  const auto y = g.forward(uniform_tensor({2, 64, 49}, -1, 1, rng));
  CHECK(y.shape() == Shape{2, 64, 49});
  for (auto& [name, p] : g.named_parameters()) {
    Tensor t = p;
    fill(t, 0.0);
  }
  const auto z = g.forward(uniform_tensor({2, 64, 49}, -1, 1, rng));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("graph refine gradients on (1,8,9)") {
  Rng rng(6);
  GraphRefine g(8, rng);
  auto x = testing::leaf({1, 8, 9}, rng);
  const auto a = build_adjacency(3, 3);
  auto probe = testing::probe_weights({1, 8, 9}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(g.forward(aggregate_context(x, a)), probe); },
                              testing::with_params(g, {{"x", x}}));
  CHECK_MESSAGE(r.ok, r.summary());
}

TEST_CASE("relation module keeps the map shape and is differentiable") {
  Rng rng(7);
  SpatialRelationModule m(8, rng);
  auto x = testing::leaf({1, 8, 4, 4}, rng);
  CHECK(m.forward(x).shape() == Shape{1, 8, 4, 4});
  auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(m.forward(x), probe); }, testing::with_params(m, {{"x", x}}));
  CHECK_MESSAGE(r.ok, r.summary());
  CHECK_THROWS_AS(m.forward(Tensor({1, 4, 4, 4})), ConfigError);
}
