#include "mrsnet/fft.hpp"

#include <unsupported/Eigen/FFT>
#include <cmath>
#include <complex>

#include "mrsnet/errors.hpp"

namespace mrsnet {

namespace {

using Complex = std::complex<double>;
using Index = std::int64_t;

// Eigen's kissfft backend faults on length 1, where the DFT is the identity.
void transform1d(Eigen::FFT<double>& fft, std::vector<Complex>& out, const std::vector<Complex>& in, bool inverse) {
  if (in.size() == 1) out = in;
  else if (inverse) fft.inv(out, in);
  else fft.fwd(out, in);
}

// Transforms every trailing (H, W) plane of (re, im); im may be empty.
void transform2d(std::span<const double> re, std::span<const double> im, std::vector<double>& out_re,
                 std::vector<double>& out_im, Index h, Index w, bool inverse) {
  const Index planes = static_cast<Index>(re.size()) / (h * w);
  out_re.assign(re.size(), 0.0);
  out_im.assign(re.size(), 0.0);
  Eigen::FFT<double> fft;
  std::vector<Complex> row_in(w), row_out(w), col_in(h), col_out(h), plane(h * w);
  for (Index p = 0; p < planes; ++p) {
    const Index base = p * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x)
        row_in[x] = Complex(re[base + y * w + x], im.empty() ? 0.0 : im[base + y * w + x]);
      transform1d(fft, row_out, row_in, inverse);
      for (Index x = 0; x < w; ++x) plane[y * w + x] = row_out[x];
    }
    for (Index x = 0; x < w; ++x) {
      for (Index y = 0; y < h; ++y) col_in[y] = plane[y * w + x];
      transform1d(fft, col_out, col_in, inverse);
      for (Index y = 0; y < h; ++y) {
        out_re[base + y * w + x] = col_out[y].real();
        out_im[base + y * w + x] = col_out[y].imag();
      }
    }
  }
}

void check_operands(const Tensor& real, const Tensor& imag) {
  if (!real.defined() || real.rank() < 2) throw ShapeError("fft2 expects at least a 2-D tensor");
  if (imag.defined() && imag.shape() != real.shape())
    throw ShapeError("fft2: real " + shape_str(real.shape()) + " vs imag " + shape_str(imag.shape()));
}

// Adjoints: forward F has F^H = HW * inverse; inverse (1/HW) F^H has adjoint F / HW.
ComplexTensor dft(const Tensor& real, const Tensor& imag, bool inverse) {
  check_operands(real, imag);
  const Index h = real.dim(-2), w = real.dim(-1);
  std::vector<double> out_re, out_im;
  transform2d(real.data(), imag.defined() ? imag.data() : std::span<const double>{}, out_re, out_im, h, w, inverse);
  const double adj_scale = inverse ? 1.0 / static_cast<double>(h * w) : static_cast<double>(h * w);

  auto backprop = [real, imag, h, w, inverse, adj_scale](std::span<const double> g_re, std::span<const double> g_im) {
    std::vector<double> a_re, a_im;
    transform2d(g_re, g_im, a_re, a_im, h, w, !inverse);
    if (real.requires_grad()) {
      auto& gr = real.impl()->grad_buffer();
      for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += adj_scale * a_re[i];
    }
    if (imag.defined() && imag.requires_grad()) {
      auto& gi = imag.impl()->grad_buffer();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += adj_scale * a_im[i];
    }
  };

  ComplexTensor out;
  out.real = detail::make_result(real.shape(), std::move(out_re), {&real, &imag},
                                 [backprop](const detail::TensorImpl& self) {
                                   const std::vector<double> zeros(self.grad.size(), 0.0);
                                   backprop(self.grad, zeros);
                                 });
  out.imag = detail::make_result(real.shape(), std::move(out_im), {&real, &imag},
                                 [backprop](const detail::TensorImpl& self) {
                                   const std::vector<double> zeros(self.grad.size(), 0.0);
                                   backprop(zeros, self.grad);
                                 });
  return out;
}

}  // namespace

ComplexTensor fft2(const Tensor& real, const Tensor& imag) { return dft(real, imag, false); }
ComplexTensor ifft2(const Tensor& real, const Tensor& imag) { return dft(real, imag, true); }

Tensor complex_abs(const ComplexTensor& z) {
  if (z.real.shape() != z.imag.shape()) throw ShapeError("complex_abs: part shapes differ");
  const auto re = z.real.data(), im = z.imag.data();
  std::vector<double> out(re.size());
  for (std::size_t i = 0; i < re.size(); ++i) out[i] = std::hypot(re[i], im[i]);
  return detail::make_result(z.real.shape(), std::move(out), {&z.real, &z.imag},
                             [z](const detail::TensorImpl& self) {
                               const auto re = z.real.data(), im = z.imag.data();
                               const bool gr = z.real.requires_grad(), gi = z.imag.requires_grad();
                               for (std::size_t i = 0; i < re.size(); ++i) {
                                 const double r = self.data[i];
                                 if (r == 0.0) continue;
                                 if (gr) z.real.impl()->grad_buffer()[i] += self.grad[i] * re[i] / r;
                                 if (gi) z.imag.impl()->grad_buffer()[i] += self.grad[i] * im[i] / r;
                               }
                             });
}

Tensor complex_angle(const ComplexTensor& z) {
  if (z.real.shape() != z.imag.shape()) throw ShapeError("complex_angle: part shapes differ");
  const auto re = z.real.data(), im = z.imag.data();
  std::vector<double> out(re.size());
  for (std::size_t i = 0; i < re.size(); ++i) out[i] = std::atan2(im[i], re[i]);
  return detail::make_result(z.real.shape(), std::move(out), {&z.real, &z.imag},
                             [z](const detail::TensorImpl& self) {
                               const auto re = z.real.data(), im = z.imag.data();
                               const bool gr = z.real.requires_grad(), gi = z.imag.requires_grad();
                               for (std::size_t i = 0; i < re.size(); ++i) {
                                 const double r2 = re[i] * re[i] + im[i] * im[i];
                                 if (r2 == 0.0) continue;
                                 if (gr) z.real.impl()->grad_buffer()[i] -= self.grad[i] * im[i] / r2;
                                 if (gi) z.imag.impl()->grad_buffer()[i] += self.grad[i] * re[i] / r2;
                               }
                             });
}

}  // namespace mrsnet
