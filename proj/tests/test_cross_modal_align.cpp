#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mrsnet/attention.hpp"
#include "mrsnet/cross_modal_align.hpp"
#include "mrsnet/errors.hpp"
#include "support/gradcheck.hpp"

using namespace mrsnet;

namespace {

LanguageSequence make_language(Rng& rng, std::int64_t batch, std::int64_t dim, const std::vector<int>& valid_counts,
                               std::int64_t tokens) {
  LanguageSequence l;
  l.features = uniform_tensor({batch, dim, tokens}, -1, 1, rng);
  l.mask = Tensor({batch, tokens}, 0.0);
  for (std::int64_t b = 0; b < batch; ++b)
    for (int j = 0; j < valid_counts[b]; ++j) l.mask.data_mut()[b * tokens + j] = 1.0;
  return l;
}

// Append `extra` padding tokens filled with junk.
LanguageSequence pad(const LanguageSequence& l, std::int64_t extra, Rng& rng) {
  LanguageSequence out;
  const auto b = l.batch(), d = l.embed_dim(), n = l.tokens();
  out.features = uniform_tensor({b, d, n + extra}, -9, 9, rng);
  out.mask = Tensor({b, n + extra}, 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t c = 0; c < d; ++c)
      for (std::int64_t j = 0; j < n; ++j)
        out.features.data_mut()[(i * d + c) * (n + extra) + j] = l.features.data()[(i * d + c) * n + j];
    for (std::int64_t j = 0; j < n; ++j) out.mask.data_mut()[i * (n + extra) + j] = l.mask.data()[i * n + j];
  }
  return out;
}

}  // namespace

TEST_CASE("attention matches a direct softmax and gives padding zero weight") {
  Rng rng(1);
  auto q = uniform_tensor({2, 3, 4}, -1, 1, rng), k = uniform_tensor({2, 5, 4}, -1, 1, rng),
       v = uniform_tensor({2, 5, 2}, -1, 1, rng);
  Tensor mask({2, 5}, std::vector<double>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
  const auto att = multihead_attention(q, k, v, 1, mask);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 3; ++i) {
      std::vector<double> logits;
      for (std::int64_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::int64_t d = 0; d < 4; ++d) s += q.at({b, i, d}) * k.at({b, j, d});
        logits.push_back(mask.at({b, j}) ? s / 2.0 : -INFINITY);
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      double row = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) {
        const double w = att.weights.at({b, 0, i, j});
        row += w;
        CHECK(w == doctest::Approx(logits[j] / z));
        if (!mask.at({b, j})) CHECK(w == 0.0);
      }
      CHECK(std::abs(row - 1.0) <= 1e-6);
    }
}

TEST_CASE("multi-head attention splits the feature axis") {
  Rng rng(2);
  auto q = uniform_tensor({1, 2, 4}, -1, 1, rng), k = uniform_tensor({1, 3, 4}, -1, 1, rng),
       v = uniform_tensor({1, 3, 4}, -1, 1, rng);
  const auto two = multihead_attention(q, k, v, 2);
  const auto h0 = multihead_attention(ops::slice(q, 2, 0, 2), ops::slice(k, 2, 0, 2), ops::slice(v, 2, 0, 2), 1);
  CHECK(two.weights.shape() == Shape{1, 2, 2, 3});
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t d = 0; d < 2; ++d) CHECK(two.output.at({0, i, d}) == doctest::Approx(h0.output.at({0, i, d})));
  CHECK_THROWS_AS(multihead_attention(q, k, v, 3), ConfigError);
}

TEST_CASE("zero gate parameters halve the language features") {
  Rng rng(3);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  fill(cma.language_gate.weight, 0.0);
  fill(cma.language_gate.bias, 0.0);
  const auto l = make_language(rng, 2, 6, {4, 2}, 4);
  const auto g = cma.gate_language(l);
  for (double v : g.gate.data()) CHECK(v == 0.5);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 6; ++c)
      for (std::int64_t j = 0; j < 4; ++j) {
        const double expected = l.mask.at({b, j}) ? l.features.at({b, c, j}) / 2 : 0.0;
        CHECK(g.gated.at({b, c, j}) == expected);
      }
}

TEST_CASE("gate values lie strictly inside (0, 1) and single token gate is (B,1,1)") {
  Rng rng(4);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  const auto g = cma.gate_language(make_language(rng, 3, 6, {1, 1, 1}, 1));
  CHECK(g.gate.shape() == Shape{3, 1, 1});
  for (double v : g.gate.data()) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("single valid token receives all attention") {
  Rng rng(5);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  const auto l = make_language(rng, 1, 6, {1}, 3);
  const auto visual = cma.project_visual(uniform_tensor({1, 4, 3, 3}, -1, 1, rng));
  const auto att = cma.cross_attend(visual, cma.gate_language(l), l.mask);
  for (std::int64_t i = 0; i < 9; ++i) {
    CHECK(att.attention.at({0, 0, i, 0}) == 1.0);
    CHECK(att.attention.at({0, 0, i, 1}) == 0.0);
    CHECK(att.attention.at({0, 0, i, 2}) == 0.0);
  }
  // Every pixel receives the same attended vector.
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 1; i < 9; ++i) CHECK(att.attended.at({0, c, i}) == doctest::Approx(att.attended.at({0, c, 0})));
}

TEST_CASE("two identical tokens split attention evenly") {
  Rng rng(6);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  LanguageSequence l;
  l.features = Tensor({1, 6, 2});
  for (std::int64_t c = 0; c < 6; ++c) {
    const double v = rng.uniform(-1, 1);
    l.features.data_mut()[c * 2] = v;
    l.features.data_mut()[c * 2 + 1] = v;
  }
  l.mask = Tensor({1, 2}, 1.0);
  const auto att = cma.cross_attend(cma.project_visual(uniform_tensor({1, 4, 2, 2}, -1, 1, rng)),
                                    cma.gate_language(l), l.mask);
  for (double w : att.attention.data()) CHECK(w == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fusion gate saturation selects one branch") {
  Rng rng(7);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  auto v = uniform_tensor({1, 4, 5}, -1, 1, rng), a = uniform_tensor({1, 4, 5}, -1, 1, rng);
  fill(cma.fusion_gate.weight, 0.0);
  fill(cma.fusion_gate.bias, 20.0);
  auto hi = cma.fuse(v, a);
  for (std::size_t i = 0; i < v.data().size(); ++i) CHECK(std::abs(hi.blended.data()[i] - v.data()[i]) < 1e-6);
  fill(cma.fusion_gate.bias, -20.0);
  auto lo = cma.fuse(v, a);
  for (std::size_t i = 0; i < v.data().size(); ++i) CHECK(std::abs(lo.blended.data()[i] - a.data()[i]) < 1e-6);
}

TEST_CASE("fusion is convex") {
  Rng rng(8);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  auto v = uniform_tensor({2, 4, 7}, -3, 3, rng);
  const auto same = cma.fuse(v, v);
  for (std::size_t i = 0; i < v.data().size(); ++i) CHECK(same.blended.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-14));
  for (int trial = 0; trial < 20; ++trial) {
    auto a = uniform_tensor({2, 4, 7}, -3, 3, rng), b = uniform_tensor({2, 4, 7}, -3, 3, rng);
    const auto f = cma.fuse(a, b);
    for (std::size_t i = 0; i < a.data().size(); ++i) {
      const double lo = std::min(a.data()[i], b.data()[i]), hi = std::max(a.data()[i], b.data()[i]);
      CHECK(f.blended.data()[i] >= lo - 1e-12);
      CHECK(f.blended.data()[i] <= hi + 1e-12);
      CHECK((f.gate.data()[i] > 0.0 && f.gate.data()[i] < 1.0));
    }
  }
  CHECK_THROWS_AS(cma.fuse(v, uniform_tensor({2, 4, 6}, -1, 1, rng)), ShapeError);
}

TEST_CASE("output is invariant to appended padding") {
  Rng rng(9);
  CrossModalAlign cma({4, 6, std::nullopt, 2}, rng);
  const auto l = make_language(rng, 2, 6, {3, 1}, 3);
  const auto x = uniform_tensor({2, 4, 3, 3}, -1, 1, rng);
  const auto base = cma.forward(x, l);
  const auto padded = cma.forward(x, pad(l, 5, rng));
  CHECK(base.shape() == Shape{2, 4, 3, 3});
  for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(std::abs(base.data()[i] - padded.data()[i]) < 1e-5);
}

TEST_CASE("invalid language and configuration are rejected") {
  Rng rng(10);
  CrossModalAlign cma({4, 6, std::nullopt, 1}, rng);
  auto l = make_language(rng, 2, 6, {2, 0}, 3);
  CHECK_THROWS_AS(cma.gate_language(l), ValidationError);
  CHECK_THROWS_AS(cma.forward(uniform_tensor({2, 4, 2, 2}, -1, 1, rng), l), ValidationError);
  CHECK_THROWS_AS(CrossModalAlign({4, 6, 0, 1}, rng), ConfigError);
  CHECK_THROWS_AS(CrossModalAlign({4, 6, 6, 4}, rng), ConfigError);
  auto ok = make_language(rng, 1, 5, {1}, 2);
  CHECK_THROWS_AS(cma.gate_language(ok), ConfigError);
}

TEST_CASE("attention and fusion gradients match central differences") {
  Rng rng(11);
  CrossModalAlign cma({8, 6, std::nullopt, 2}, rng);
  auto x = testing::leaf({1, 8, 2, 2}, rng);
  auto l = make_language(rng, 1, 6, {3}, 4);
  l.features.set_requires_grad(true);
  auto probe = testing::probe_weights({1, 8, 2, 2}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(cma.forward(x, l), probe); },
                              testing::with_params(cma, {{"x", x}, {"language", l.features}}));
  CHECK_MESSAGE(r.ok, r.summary());
}
