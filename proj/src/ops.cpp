#include "mrsnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mrsnet/errors.hpp"

namespace mrsnet::ops {

using detail::TensorImpl;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Index = std::int64_t;

namespace {

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

struct Broadcast {
  Shape out;
  std::vector<Index> sa, sb;  // per-axis input strides, 0 on broadcast axes
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  const auto st_a = strides_of(a), st_b = strides_of(b);
  p.out.resize(a.size());
  p.sa.resize(a.size());
  p.sb.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[i] = std::max(a[i], b[i]);
    p.sa[i] = a[i] == 1 ? 0 : st_a[i];
    p.sb[i] = b[i] == 1 ? 0 : st_b[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <class Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const Index n = numel_of(p.out);
  if (p.same) {
    for (Index i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++idx[d] < p.out[d]) {
        ia += p.sa[d];
        ib += p.sb[d];
        break;
      }
      ia -= p.sa[d] * (p.out[d] - 1);
      ib -= p.sb[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Dfa, class Dfb>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Dfa dfa, Dfb dfb) {
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<std::size_t>(numel_of(plan.out)));
  const auto ad = a.data(), bd = b.data();
  for_each_broadcast(plan, [&](Index o, Index i, Index j) { out[o] = fwd(ad[i], bd[j]); });
  return detail::make_result(plan.out, std::move(out), {&a, &b}, [a, b, plan, dfa, dfb](const TensorImpl& self) {
    const auto& g = self.grad;
    const auto ad = a.data(), bd = b.data();
    if (a.requires_grad()) {
      auto& ga = a.impl()->grad_buffer();
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { ga[i] += g[o] * dfa(ad[i], bd[j]); });
    }
    if (b.requires_grad()) {
      auto& gb = b.impl()->grad_buffer();
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { gb[j] += g[o] * dfb(ad[i], bd[j]); });
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return detail::make_result(a.shape(), std::move(out), {&a}, [a, deriv](const TensorImpl& self) {
    const auto& g = self.grad;
    const auto ad = a.data();
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(ad[i], self.data[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor one_minus(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Tensor sum(const Tensor& a) {
  const auto ad = a.data();
  const double s = std::accumulate(ad.begin(), ad.end(), 0.0);
  return detail::make_result({}, {s}, {&a}, [a](const TensorImpl& self) {
    auto& ga = a.impl()->grad_buffer();
    for (auto& v : ga) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor weighted_sum(const Tensor& a, const Tensor& weights) {
  if (a.shape() != weights.shape())
    throw ShapeError("weighted_sum: " + shape_str(a.shape()) + " vs " + shape_str(weights.shape()));
  const auto ad = a.data(), wd = weights.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * wd[i];
  return detail::make_result({}, {s}, {&a}, [a, weights](const TensorImpl& self) {
    auto& ga = a.impl()->grad_buffer();
    const auto wd = weights.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0] * wd[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {&a},
                             [a](const TensorImpl& self) { a.impl()->accumulate(self.grad); });
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: perm size mismatch");
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  const auto in_st = strides_of(a.shape());
  // stride into the input for each output axis
  std::vector<Index> src_st(r);
  for (int i = 0; i < r; ++i) src_st[i] = in_st[perm[i]];
  const Index n = a.numel();
  std::vector<Index> gather(static_cast<std::size_t>(n));
  {
    std::vector<Index> idx(r, 0);
    Index src = 0;
    for (Index o = 0; o < n; ++o) {
      gather[o] = src;
      for (int d = r - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) {
          src += src_st[d];
          break;
        }
        src -= src_st[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto ad = a.data();
  for (Index o = 0; o < n; ++o) out[o] = ad[gather[o]];
  return detail::make_result(std::move(out_shape), std::move(out), {&a},
                             [a, gather = std::move(gather)](const TensorImpl& self) {
                               auto& ga = a.impl()->grad_buffer();
                               for (std::size_t o = 0; o < gather.size(); ++o) ga[gather[o]] += self.grad[o];
                             });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  const int ax = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != ax && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  Index outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[d];
  for (int d = ax + 1; d < r; ++d) inner *= out_shape[d];
  const Index out_chunk = out_shape[ax] * inner;
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index chunk = p.shape()[ax] * inner;
    const auto pd = p.data();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + o * chunk, chunk, out.begin() + o * out_chunk + off);
    off += chunk;
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [parts, offsets, outer, inner, out_chunk, ax](const TensorImpl& self) {
                               for (std::size_t k = 0; k < parts.size(); ++k) {
                                 if (!parts[k].requires_grad()) continue;
                                 auto& g = parts[k].impl()->grad_buffer();
                                 const Index chunk = parts[k].shape()[ax] * inner;
                                 for (Index o = 0; o < outer; ++o)
                                   for (Index i = 0; i < chunk; ++i)
                                     g[o * chunk + i] += self.grad[o * out_chunk + offsets[k] + i];
                               }
                             });
}

Tensor slice(const Tensor& a, int axis, Index start, Index length) {
  const int r = a.rank();
  const int ax = normalize_axis(axis, r);
  if (start < 0 || length < 0 || start + length > a.shape()[ax])
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  Index outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[d];
  for (int d = ax + 1; d < r; ++d) inner *= out_shape[d];
  const Index in_chunk = a.shape()[ax] * inner, chunk = length * inner, off = start * inner;
  std::vector<double> out(static_cast<std::size_t>(outer * chunk));
  const auto ad = a.data();
  for (Index o = 0; o < outer; ++o) std::copy_n(ad.begin() + o * in_chunk + off, chunk, out.begin() + o * chunk);
  return detail::make_result(std::move(out_shape), std::move(out), {&a},
                             [a, outer, in_chunk, chunk, off](const TensorImpl& self) {
                               auto& g = a.impl()->grad_buffer();
                               for (Index o = 0; o < outer; ++o)
                                 for (Index i = 0; i < chunk; ++i) g[o * in_chunk + off + i] += self.grad[o * chunk + i];
                             });
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<Index>& sizes) {
  std::vector<Tensor> out;
  Index start = 0;
  for (Index s : sizes) {
    out.push_back(slice(a, axis, start, s));
    start += s;
  }
  if (start != a.dim(axis)) throw ShapeError("split sizes do not cover axis of " + shape_str(a.shape()));
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 3 || (b.rank() != 3 && b.rank() != 2))
    throw ShapeError("matmul expects (B,M,K) x (B,K,N) or (K,N); got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const Index batch = a.dim(0);
  const bool shared_b = b.rank() == 2;
  if (!shared_b && b.dim(0) != batch) throw ShapeError("matmul batch mismatch");
  const Index ar = a.dim(1), ac = a.dim(2);
  const Index br = b.dim(-2), bc = b.dim(-1);
  const Index m = ta ? ac : ar, k = ta ? ar : ac;
  const Index kb = tb ? bc : br, n = tb ? br : bc;
  if (k != kb)
    throw ShapeError("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    CMapMat A(a.data().data() + i * ar * ac, ar, ac);
    CMapMat B(b.data().data() + (shared_b ? 0 : i * br * bc), br, bc);
    MapMat C(out.data() + i * m * n, m, n);
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return detail::make_result(Shape{batch, m, n}, std::move(out), {&a, &b},
                             [a, b, ta, tb, batch, shared_b, ar, ac, br, bc, m, n](const TensorImpl& self) {
                               for (Index i = 0; i < batch; ++i) {
                                 CMapMat G(self.grad.data() + i * m * n, m, n);
                                 CMapMat A(a.data().data() + i * ar * ac, ar, ac);
                                 CMapMat B(b.data().data() + (shared_b ? 0 : i * br * bc), br, bc);
                                 if (a.requires_grad()) {
                                   MapMat GA(a.impl()->grad_buffer().data() + i * ar * ac, ar, ac);
                                   // dA' = G B'^T, with A' = op(A), B' = op(B)
                                   if (!ta && !tb) GA.noalias() += G * B.transpose();
                                   else if (!ta && tb) GA.noalias() += G * B;
                                   else if (ta && !tb) GA.noalias() += B * G.transpose();
                                   else GA.noalias() += B.transpose() * G.transpose();
                                 }
                                 if (b.requires_grad()) {
                                   MapMat GB(b.impl()->grad_buffer().data() + (shared_b ? 0 : i * br * bc), br, bc);
                                   // dB' = A'^T G
                                   if (!ta && !tb) GB.noalias() += A.transpose() * G;
                                   else if (ta && !tb) GB.noalias() += A * G;
                                   else if (!ta && tb) GB.noalias() += G.transpose() * A;
                                   else GB.noalias() += G.transpose() * A.transpose();
                                 }
                               }
                             });
}

Tensor pointwise(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1))
    throw ShapeError("pointwise: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  const Index batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    throw ShapeError("pointwise: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  const Index n = x.numel() / (batch * cin);
  Shape out_shape = x.shape();
  out_shape[1] = cout;
  std::vector<double> out(static_cast<std::size_t>(batch * cout * n));
  CMapMat W(weight.data().data(), cout, cin);
  for (Index i = 0; i < batch; ++i) {
    CMapMat X(x.data().data() + i * cin * n, cin, n);
    MapMat Y(out.data() + i * cout * n, cout, n);
    Y.noalias() = W * X;
    if (bias.defined())
      for (Index c = 0; c < cout; ++c) Y.row(c).array() += bias.data()[c];
  }
  return detail::make_result(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                             [x, weight, bias, batch, cin, cout, n](const TensorImpl& self) {
                               CMapMat W(weight.data().data(), cout, cin);
                               for (Index i = 0; i < batch; ++i) {
                                 CMapMat G(self.grad.data() + i * cout * n, cout, n);
                                 if (x.requires_grad()) {
                                   MapMat GX(x.impl()->grad_buffer().data() + i * cin * n, cin, n);
                                   GX.noalias() += W.transpose() * G;
                                 }
                                 if (weight.requires_grad()) {
                                   CMapMat X(x.data().data() + i * cin * n, cin, n);
                                   MapMat GW(weight.impl()->grad_buffer().data(), cout, cin);
                                   GW.noalias() += G * X.transpose();
                                 }
                                 if (bias.defined() && bias.requires_grad()) {
                                   auto& gb = bias.impl()->grad_buffer();
                                   for (Index c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                                 }
                               }
                             });
}

namespace {

struct ConvGeometry {
  Index batch, cin, h, w, cout, kh, kw, oh, ow, groups, cin_g, cout_g;
  int stride, pad;
  Index rows() const { return cin_g * kh * kw; }
  Index cols() const { return oh * ow; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const double* plane = x + c * g.h * g.w;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            row[oy * g.ow + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        double* plane = x + c * g.h * g.w;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_str(x.shape()) + ", " +
                     shape_str(weight.shape()));
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.groups = opts.groups;
  g.stride = opts.stride;
  g.pad = opts.padding;
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0)
    throw ConfigError("conv2d: channels not divisible by groups");
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) throw ShapeError("conv2d: bias shape");
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));

  if (g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1)
    return pointwise(x, reshape(weight, {g.cout, g.cin}), bias);

  std::vector<double> out(static_cast<std::size_t>(g.batch * g.cout * g.oh * g.ow));
  std::vector<double> col(static_cast<std::size_t>(g.rows() * g.cols()));
  for (Index b = 0; b < g.batch; ++b)
    for (Index gr = 0; gr < g.groups; ++gr) {
      im2col(x.data().data() + (b * g.cin + gr * g.cin_g) * g.h * g.w, g, col.data());
      CMapMat W(weight.data().data() + gr * g.cout_g * g.rows(), g.cout_g, g.rows());
      CMapMat C(col.data(), g.rows(), g.cols());
      MapMat Y(out.data() + (b * g.cout + gr * g.cout_g) * g.cols(), g.cout_g, g.cols());
      Y.noalias() = W * C;
      if (bias.defined())
        for (Index c = 0; c < g.cout_g; ++c) Y.row(c).array() += bias.data()[gr * g.cout_g + c];
    }
  return detail::make_result(Shape{g.batch, g.cout, g.oh, g.ow}, std::move(out), {&x, &weight, &bias},
                             [x, weight, bias, g](const TensorImpl& self) {
                               std::vector<double> col(static_cast<std::size_t>(g.rows() * g.cols()));
                               std::vector<double> dcol(col.size());
                               for (Index b = 0; b < g.batch; ++b)
                                 for (Index gr = 0; gr < g.groups; ++gr) {
                                   CMapMat G(self.grad.data() + (b * g.cout + gr * g.cout_g) * g.cols(), g.cout_g,
                                             g.cols());
                                   CMapMat W(weight.data().data() + gr * g.cout_g * g.rows(), g.cout_g, g.rows());
                                   if (weight.requires_grad()) {
                                     im2col(x.data().data() + (b * g.cin + gr * g.cin_g) * g.h * g.w, g, col.data());
                                     CMapMat C(col.data(), g.rows(), g.cols());
                                     MapMat GW(weight.impl()->grad_buffer().data() + gr * g.cout_g * g.rows(),
                                               g.cout_g, g.rows());
                                     GW.noalias() += G * C.transpose();
                                   }
                                   if (x.requires_grad()) {
                                     MapMat DC(dcol.data(), g.rows(), g.cols());
                                     DC.noalias() = W.transpose() * G;
                                     col2im_add(dcol.data(), g,
                                                x.impl()->grad_buffer().data() + (b * g.cin + gr * g.cin_g) * g.h * g.w);
                                   }
                                   if (bias.defined() && bias.requires_grad()) {
                                     auto& gb = bias.impl()->grad_buffer();
                                     for (Index c = 0; c < g.cout_g; ++c) gb[gr * g.cout_g + c] += G.row(c).sum();
                                   }
                                 }
                             });
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects (B,C,H,W), got " + shape_str(x.shape()));
  if (factor < 1) throw ConfigError("avg_pool2d factor must be >= 1");
  if (factor == 1) return x;
  const Index bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor || w % factor)
    throw ShapeError("avg_pool2d: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  const Index oh = h / factor, ow = w / factor;
  const double inv = 1.0 / (factor * factor);
  std::vector<double> out(static_cast<std::size_t>(bc * oh * ow), 0.0);
  const auto xd = x.data();
  for (Index p = 0; p < bc; ++p)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) out[(p * oh + y / factor) * ow + xx / factor] += inv * xd[(p * h + y) * w + xx];
  return detail::make_result(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                             [x, bc, h, w, oh, ow, factor, inv](const TensorImpl& self) {
                               auto& g = x.impl()->grad_buffer();
                               for (Index p = 0; p < bc; ++p)
                                 for (Index y = 0; y < h; ++y)
                                   for (Index xx = 0; xx < w; ++xx)
                                     g[(p * h + y) * w + xx] += inv * self.grad[(p * oh + y / factor) * ow + xx / factor];
                             });
}

namespace {
struct AxisInterp {
  std::vector<Index> i0, i1;
  std::vector<double> l1;  // weight of i1
};

AxisInterp axis_interp(Index in, Index out) {
  AxisInterp a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.l1.resize(out);
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    const double src = std::max(sc * (static_cast<double>(o) + 0.5) - 0.5, 0.0);
    const Index lo = std::min(static_cast<Index>(src), in - 1);
    a.i0[o] = lo;
    a.i1[o] = lo < in - 1 ? lo + 1 : lo;
    a.l1[o] = lo < in - 1 ? src - static_cast<double>(lo) : 0.0;
  }
  return a;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& x, Index out_h, Index out_w) {
  if (x.rank() != 4) throw ShapeError("upsample_bilinear expects (B,C,H,W), got " + shape_str(x.shape()));
  const Index h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  const Index planes = x.dim(0) * x.dim(1);
  const auto ay = axis_interp(h, out_h), ax = axis_interp(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
  const auto xd = x.data();
  for (Index p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const double wy1 = ay.l1[oy], wy0 = 1.0 - wy1;
      const double* r0 = src + ay.i0[oy] * w;
      const double* r1 = src + ay.i1[oy] * w;
      for (Index ox = 0; ox < out_w; ++ox) {
        const double wx1 = ax.l1[ox], wx0 = 1.0 - wx1;
        out[(p * out_h + oy) * out_w + ox] = wy0 * (wx0 * r0[ax.i0[ox]] + wx1 * r0[ax.i1[ox]]) +
                                              wy1 * (wx0 * r1[ax.i0[ox]] + wx1 * r1[ax.i1[ox]]);
      }
    }
  }
  return detail::make_result(Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {&x},
                             [x, ay, ax, planes, h, w, out_h, out_w](const TensorImpl& self) {
                               auto& g = x.impl()->grad_buffer();
                               for (Index p = 0; p < planes; ++p) {
                                 double* dst = g.data() + p * h * w;
                                 for (Index oy = 0; oy < out_h; ++oy) {
                                   const double wy1 = ay.l1[oy], wy0 = 1.0 - wy1;
                                   for (Index ox = 0; ox < out_w; ++ox) {
                                     const double wx1 = ax.l1[ox], wx0 = 1.0 - wx1;
                                     const double go = self.grad[(p * out_h + oy) * out_w + ox];
                                     dst[ay.i0[oy] * w + ax.i0[ox]] += go * wy0 * wx0;
                                     dst[ay.i0[oy] * w + ax.i1[ox]] += go * wy0 * wx1;
                                     dst[ay.i1[oy] * w + ax.i0[ox]] += go * wy1 * wx0;
                                     dst[ay.i1[oy] * w + ax.i1[ox]] += go * wy1 * wx1;
                                   }
                                 }
                               }
                             });
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  Index outer = 1, inner = 1;
  const Index len = x.shape()[ax];
  for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (int d = ax + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const auto xd = x.data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      if (!std::isfinite(mx)) throw NumericError("softmax over a slice with no finite logits");
      double s = 0.0;
      for (Index k = 0; k < len; ++k) s += (out[base + k * inner] = std::exp(xd[base + k * inner] - mx));
      for (Index k = 0; k < len; ++k) out[base + k * inner] /= s;
    }
  return detail::make_result(x.shape(), std::move(out), {&x}, [x, outer, inner, len](const TensorImpl& self) {
    auto& g = x.impl()->grad_buffer();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        double dot = 0.0;
        for (Index k = 0; k < len; ++k) dot += y[base + k * inner] * gy[base + k * inner];
        for (Index k = 0; k < len; ++k) g[base + k * inner] += y[base + k * inner] * (gy[base + k * inner] - dot);
      }
  });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d expects (B,C,H,W), got " + shape_str(x.shape()));
  const Index batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != ch || beta.numel() != ch || state.running_mean.numel() != ch ||
      state.running_var.numel() != ch)
    throw ShapeError("batch_norm2d: parameter size does not match " + std::to_string(ch) + " channels");
  const Index n = batch * hw;
  std::vector<double> mean_c(ch), inv_std(ch);
  const auto xd = x.data();
  if (training) {
    auto rm = state.running_mean.data_mut();
    auto rv = state.running_var.data_mut();
    for (Index c = 0; c < ch; ++c) {
      double s = 0.0;
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < hw; ++i) s += xd[(b * ch + c) * hw + i];
      const double mu = s / n;
      double v = 0.0;
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < hw; ++i) {
          const double d = xd[(b * ch + c) * hw + i] - mu;
          v += d * d;
        }
      const double var = v / n;
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = n > 1 ? v / (n - 1) : var;
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
    }
  } else {
    for (Index c = 0; c < ch; ++c) {
      mean_c[c] = state.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var.data()[c] + state.eps);
    }
  }
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < ch; ++c)
      for (Index i = 0; i < hw; ++i) {
        const Index k = (b * ch + c) * hw + i;
        out[k] = gamma.data()[c] * (xd[k] - mean_c[c]) * inv_std[c] + beta.data()[c];
      }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, mean_c, inv_std, training, batch, ch, hw, n](const TensorImpl& self) {
        const auto xd = x.data();
        const auto& g = self.grad;
        for (Index c = 0; c < ch; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (Index b = 0; b < batch; ++b)
            for (Index i = 0; i < hw; ++i) {
              const Index k = (b * ch + c) * hw + i;
              const double xhat = (xd[k] - mean_c[c]) * inv_std[c];
              sum_g += g[k];
              sum_gx += g[k] * xhat;
            }
          if (gamma.requires_grad()) gamma.impl()->grad_buffer()[c] += sum_gx;
          if (beta.requires_grad()) beta.impl()->grad_buffer()[c] += sum_g;
          if (!x.requires_grad()) continue;
          auto& gx = x.impl()->grad_buffer();
          const double gm = gamma.data()[c];
          for (Index b = 0; b < batch; ++b)
            for (Index i = 0; i < hw; ++i) {
              const Index k = (b * ch + c) * hw + i;
              if (training) {
                const double xhat = (xd[k] - mean_c[c]) * inv_std[c];
                gx[k] += gm * inv_std[c] * (g[k] - sum_g / n - xhat * sum_gx / n);
              } else {
                gx[k] += gm * inv_std[c] * g[k];
              }
            }
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target, double clamp) {
  if (logits.shape() != target.shape())
    throw ShapeError("loss: prediction " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  const auto z = logits.data(), t = target.data();
  const double n = static_cast<double>(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = std::clamp(stable_sigmoid(z[i]), clamp, 1.0 - clamp);
    total -= t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p);
  }
  // The clamp bounds the reported value; the gradient is the exact logit-space p - t.
  return detail::make_result({}, {total / n}, {&logits}, [logits, target, n](const TensorImpl& self) {
    auto& g = logits.impl()->grad_buffer();
    const auto z = logits.data(), t = target.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (stable_sigmoid(z[i]) - t[i]) / n;
  });
}

Tensor soft_dice_loss(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape())
    throw ShapeError("dice: prediction " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  const Index batch = logits.dim(0), per = logits.numel() / batch;
  std::vector<double> p(static_cast<std::size_t>(logits.numel()));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = stable_sigmoid(logits.data()[i]);
  std::vector<double> inter(batch), denom(batch);
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    double it = 0.0, sp = 0.0, st = 0.0;
    for (Index i = 0; i < per; ++i) {
      it += p[b * per + i] * target.data()[b * per + i];
      sp += p[b * per + i];
      st += target.data()[b * per + i];
    }
    inter[b] = 2.0 * it + 1.0;
    denom[b] = sp + st + 1.0;
    total += 1.0 - inter[b] / denom[b];
  }
  return detail::make_result({}, {total / batch}, {&logits},
                             [logits, target, p, inter, denom, batch, per](const TensorImpl& self) {
                               auto& g = logits.impl()->grad_buffer();
                               for (Index b = 0; b < batch; ++b)
                                 for (Index i = 0; i < per; ++i) {
                                   const Index k = b * per + i;
                                   const double d_dp =
                                       -(2.0 * target.data()[k] * denom[b] - inter[b]) / (denom[b] * denom[b]);
                                   g[k] += self.grad[0] * d_dp * p[k] * (1.0 - p[k]) / batch;
                                 }
                             });
}

}  // namespace mrsnet::ops
