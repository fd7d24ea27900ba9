#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mrsnet/errors.hpp"
#include "mrsnet/hfim.hpp"
#include "support/gradcheck.hpp"

using namespace mrsnet;

namespace {

void zero_all(Module& m) {
  for (auto& [name, p] : m.named_parameters()) {
    Tensor t = p;
    fill(t, 0.0);
  }
}

// Weight (out, in) of a 1x1 layer selecting input channels [offset, offset + out).
void set_selection(Pointwise& layer, std::int64_t offset) {
  fill(layer.weight, 0.0);
  if (layer.bias.defined()) fill(layer.bias, 0.0);
  const auto in = layer.in_channels();
  for (std::int64_t o = 0; o < layer.out_channels(); ++o) layer.weight.data_mut()[o * in + offset + o] = 1.0;
}

}  // namespace

TEST_CASE("space_to_depth round trip is exact") {
  Tensor x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data_mut()[i] = i;
  const auto p = space_to_depth(x, 2);
  CHECK(p.shape() == Shape{1, 4, 2, 2});
  // Channel i*f + j holds pixel (2y + i, 2x + j).
  CHECK(p.at({0, 0, 0, 0}) == 0);
  CHECK(p.at({0, 1, 0, 0}) == 1);
  CHECK(p.at({0, 2, 0, 0}) == 4);
  CHECK(p.at({0, 3, 1, 1}) == 15);
  const auto back = depth_to_space(p, 2);
  CHECK(back.shape() == x.shape());
  for (int i = 0; i < 16; ++i) CHECK(back.data()[i] == x.data()[i]);
  CHECK(space_to_depth(x, 1).data()[5] == 5);
  CHECK_THROWS_AS(space_to_depth(Tensor({1, 1, 6, 4}), 4), ShapeError);
}

TEST_CASE("space_to_depth is a bit-exact permutation on random data") {
  Rng rng(1);
  for (int f : {2, 4, 8}) {
    auto x = normal_tensor({2, 3, 16, 8}, 1e3, rng);
    const auto p = space_to_depth(x, f);
    const auto back = depth_to_space(p, f);
    double s_in = 0.0, s_out = 0.0;
    std::vector<double> a(x.data().begin(), x.data().end()), b(p.data().begin(), p.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    for (std::size_t i = 0; i < a.size(); ++i) {
      s_in += a[i];
      s_out += b[i];
    }
    CHECK(s_in == s_out);
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(back.data()[i] == x.data()[i]);
  }
}

TEST_CASE("stage packing ledger") {
  Rng rng(2);
  std::vector<Tensor> stages{uniform_tensor({1, 8, 16, 16}, -1, 1, rng), uniform_tensor({1, 16, 8, 8}, -1, 1, rng),
                             uniform_tensor({1, 32, 4, 4}, -1, 1, rng)};
  const auto u = pack_stages(stages);
  CHECK(u.fused.shape() == Shape{1, 224, 4, 4});
  REQUIRE(u.ledger.size() == 3);
  CHECK(u.ledger[0].factor == 4);
  CHECK(u.ledger[0].packed_channels == 128);
  CHECK(u.ledger[1].packed_channels == 64);
  CHECK(u.ledger[2].packed_channels == 32);
  const auto back = unpack_stages(u.fused, u.ledger);
  for (int s = 0; s < 3; ++s) {
    CHECK(back[s].shape() == stages[s].shape());
    for (std::size_t i = 0; i < stages[s].data().size(); ++i) CHECK(back[s].data()[i] == stages[s].data()[i]);
  }
}

TEST_CASE("identical stage shapes pack as a plain concat") {
  Rng rng(3);
  auto a = uniform_tensor({2, 3, 4, 4}, -1, 1, rng), b = uniform_tensor({2, 5, 4, 4}, -1, 1, rng);
  const auto u = pack_stages({a, b});
  const auto c = ops::concat({a, b}, 1);
  for (const auto& e : u.ledger) CHECK(e.factor == 1);
  for (std::size_t i = 0; i < c.data().size(); ++i) CHECK(u.fused.data()[i] == c.data()[i]);
}

TEST_CASE("non power-of-two ratios are rejected") {
  CHECK_THROWS_AS(pack_stages({Tensor({1, 1, 12, 12}), Tensor({1, 1, 4, 4})}), ShapeError);
  CHECK_THROWS_AS(pack_stages({Tensor({1, 1, 8, 4}), Tensor({1, 1, 4, 4})}), ShapeError);
  CHECK_THROWS_AS(pack_stages({Tensor({1, 1, 4, 4})}), ShapeError);
  HfimConfig bad{{4, 4}, {3, 1}, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(HfimConfig::pyramid({4, 4}, 7).validate(), ConfigError);
}

TEST_CASE("local branch is non-negative and reduces to ReLU under identity settings") {
  Rng rng(4);
  LocalBranch local(4, rng);
  auto x = uniform_tensor({2, 4, 5, 5}, -2, 2, rng);
  const auto y = local.forward(x);
  CHECK(y.shape() == x.shape());
  for (double v : y.data()) CHECK(v >= 0.0);

  fill(local.depthwise.weight, 0.0);
  for (int c = 0; c < 4; ++c) local.depthwise.weight.data_mut()[c * 9 + 4] = 1.0;
  set_identity(local.pointwise);
  fill(local.norm.state.running_mean, 0.0);
  fill(local.norm.state.running_var, 1.0);
  local.set_training(false);
  const auto r = local.forward(x);
  const double s = 1.0 / std::sqrt(1.0 + local.norm.state.eps);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(r.data()[i] == doctest::Approx(std::max(0.0, x.data()[i]) * s));
}

TEST_CASE("spatial attention rows") {
  Rng rng(5);
  SpatialAttentionBranch att(8, 4, rng);
  const auto one = att.forward_detail(uniform_tensor({1, 8, 1, 1}, -1, 1, rng));
  for (double w : one.weights.data()) CHECK(w == 1.0);

  const auto uni = att.forward_detail(Tensor({1, 8, 3, 3}, 0.7));
  for (double w : uni.weights.data()) CHECK(w == doctest::Approx(1.0 / 9));

  const auto d = att.forward_detail(uniform_tensor({2, 8, 3, 3}, -1, 1, rng));
  CHECK(d.weights.shape() == Shape{2, 4, 9, 9});
  for (std::int64_t r = 0; r < 2 * 4 * 9; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 9; ++j) s += d.weights.data()[r * 9 + j];
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("frequency attention with identity projections round-trips a single token") {
  Rng rng(6);
  FrequencyAttentionBranch fa(6, 2, rng);
  set_identity(fa.value);
  set_identity(fa.output);
  auto x = uniform_tensor({2, 6, 1, 1}, -1, 1, rng);
  const auto d = fa.forward_detail(x);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(std::abs(d.output.data()[i] - x.data()[i]) < 1e-5);
  CHECK(d.max_abs_imag < 1e-4);
}

TEST_CASE("uniform frequency attention collapses the map onto its origin pixel") {
  // The mean of all spectral bins is x[0,0], so the inverse transform is an impulse at the origin.
  Rng rng(7);
  FrequencyAttentionBranch fa(3, 1, rng);
  fill(fa.query.weight, 0.0);
  fill(fa.query.bias, 0.0);
  set_identity(fa.value);
  set_identity(fa.output);
  auto x = uniform_tensor({1, 3, 4, 4}, -1, 1, rng);
  const auto d = fa.forward_detail(x);
  CHECK(d.max_abs_imag < 1e-4);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < 16; ++i) {
      const double expected = i == 0 ? x.at({0, c, 0, 0}) : 0.0;
      CHECK(std::abs(d.output.data()[c * 16 + i] - expected) < 1e-12);
    }
  for (std::int64_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 16; ++j) s += d.weights.data()[r * 16 + j];
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("integration with identity-equivalent branches reproduces its inputs") {
  Rng rng(8);
  HierarchicalIntegration hfim(HfimConfig::pyramid({2, 4, 8}, 2), rng);
  const auto c = hfim.config().packed_channels();
  CHECK(c == 2 * 16 + 4 * 4 + 8);
  set_identity(hfim.frequency.value);
  set_identity(hfim.frequency.output);
  set_selection(hfim.fuse, 2 * c);
  std::vector<Tensor> stages{uniform_tensor({1, 2, 4, 4}, -1, 1, rng), uniform_tensor({1, 4, 2, 2}, -1, 1, rng),
                             uniform_tensor({1, 8, 1, 1}, -1, 1, rng)};
  const auto out = hfim.forward(stages);
  for (int s = 0; s < 3; ++s) {
    REQUIRE(out[s].shape() == stages[s].shape());
    for (std::size_t i = 0; i < stages[s].data().size(); ++i)
      CHECK(std::abs(out[s].data()[i] - stages[s].data()[i]) < 1e-5);
  }
  CHECK_THROWS_AS(hfim.forward({stages[0], stages[1]}), ConfigError);
  CHECK_THROWS_AS(hfim.forward({stages[1], stages[1], stages[2]}), ConfigError);
}

TEST_CASE("every integration parameter receives a nonzero gradient") {
  Rng rng(9);
  HierarchicalIntegration hfim(HfimConfig::pyramid({2, 4, 8, 16}, 4), rng);
  std::vector<Tensor> stages{uniform_tensor({2, 2, 16, 16}, -1, 1, rng), uniform_tensor({2, 4, 8, 8}, -1, 1, rng),
                             uniform_tensor({2, 8, 4, 4}, -1, 1, rng), uniform_tensor({2, 16, 2, 2}, -1, 1, rng)};
  const auto out = hfim.forward(stages);
  Tensor loss = Tensor::scalar(0.0);
  for (int s = 0; s < 4; ++s) loss = ops::add(loss, ops::weighted_sum(out[s], testing::probe_weights(out[s].shape(), rng)));
  loss.backward();
  for (const auto& [name, p] : hfim.named_parameters()) {
    REQUIRE_MESSAGE(p.has_grad(), name);
    bool nonzero = false;
    for (double g : p.grad()) nonzero = nonzero || g != 0.0;
    CHECK_MESSAGE(nonzero, name);
  }
}

TEST_CASE("spatial attention gradients on (1,8,3,3)") {
  Rng rng(10);
  SpatialAttentionBranch att(8, 4, rng);
  auto x = testing::leaf({1, 8, 3, 3}, rng);
  auto probe = testing::probe_weights({1, 8, 3, 3}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(att.forward(x), probe); }, testing::with_params(att, {{"x", x}}));
  CHECK_MESSAGE(r.ok, r.summary());
}

TEST_CASE("frequency attention gradients on (1,8,4,4)") {
  Rng rng(11);
  FrequencyAttentionBranch fa(8, 4, rng);
  auto x = testing::leaf({1, 8, 4, 4}, rng);
  auto probe = testing::probe_weights({1, 8, 4, 4}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(fa.forward(x), probe); }, testing::with_params(fa, {{"x", x}}));
  CHECK_MESSAGE(r.ok, r.summary());
}

TEST_CASE("local branch gradients in training mode") {
  Rng rng(12);
  LocalBranch local(4, rng);
  auto x = testing::leaf({2, 4, 3, 3}, rng);
  auto probe = testing::probe_weights({2, 4, 3, 3}, rng);
  auto r = testing::gradcheck([&] { return ops::weighted_sum(local.forward(x), probe); }, testing::with_params(local, {{"x", x}}));
  CHECK_MESSAGE(r.ok, r.summary());
}
