#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "canopy/autodiff.hpp"

// Differentiable ops for the HR-SFANet graph. Layout is N,H,W,C throughout.
// Convolution is cross-correlation with "same" zero padding and stride 1.
// Sums and means accumulate in double regardless of T.

namespace canopy {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Pixels per GEMM call. Every call uses exactly this many rows (the last
// chunk is zero-padded), so a pixel's result never depends on the image
// size. Multiple of the GEMM kernel row blocking for float and double.
inline constexpr std::size_t kConvChunk = 480;

// Optional observer of how close the current forward pass comes to a
// non-differentiable point: a ReLU input at zero or a tie for a positive
// maximum inside a pooling window. Used by finite-difference checks.
struct KinkProbe {
  double min_relu_input = std::numeric_limits<double>::infinity();
  double min_pool_gap = std::numeric_limits<double>::infinity();
};

inline KinkProbe*& kink_probe() {
  thread_local KinkProbe* probe = nullptr;
  return probe;
}

struct ConvGeom {
  std::size_t n, h, w, cin, cout, k;
  std::size_t pixels() const { return n * h * w; }
  std::size_t patch() const { return k * k * cin; }
};

// Fills `cols` (kConvChunk x patch) with the receptive patches of global
// pixels [first, first + count). Rows past `count` are zero.
template <class T>
void im2col_chunk(const T* x, const ConvGeom& g, std::size_t first,
                  std::size_t count, T* cols) {
  const std::size_t patch = g.patch();
  const std::size_t row_span = g.k * g.cin;  // one kernel row of taps
  const long pad = static_cast<long>(g.k / 2);
  const long w = static_cast<long>(g.w);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t p = first + r;
    const std::size_t n = p / (g.h * g.w);
    const long y = static_cast<long>((p / g.w) % g.h);
    const long xx = static_cast<long>(p % g.w);
    T* row = cols + r * patch;
    const bool x_inside = xx - pad >= 0 && xx + pad < w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      T* dst = row + ky * row_span;
      const long sy = y + static_cast<long>(ky) - pad;
      if (sy < 0 || sy >= static_cast<long>(g.h)) {
        std::memset(dst, 0, sizeof(T) * row_span);
        continue;
      }
      const T* src_row = x + (n * g.h + static_cast<std::size_t>(sy)) * g.w * g.cin;
      if (x_inside) {
        std::memcpy(dst, src_row + static_cast<std::size_t>(xx - pad) * g.cin, sizeof(T) * row_span);
        continue;
      }
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const long sx = xx + static_cast<long>(kx) - pad;
        T* d = dst + kx * g.cin;
        if (sx < 0 || sx >= w) {
          std::memset(d, 0, sizeof(T) * g.cin);
        } else {
          std::memcpy(d, src_row + static_cast<std::size_t>(sx) * g.cin, sizeof(T) * g.cin);
        }
      }
    }
  }
  if (count < kConvChunk) {
    std::memset(cols + count * patch, 0, sizeof(T) * (kConvChunk - count) * patch);
  }
}

// Scatter-adds patch gradients back to the input gradient.
template <class T>
void col2im_chunk(const T* dcols, const ConvGeom& g, std::size_t first,
                  std::size_t count, T* dx) {
  const std::size_t patch = g.patch();
  const std::size_t row_span = g.k * g.cin;
  const long pad = static_cast<long>(g.k / 2);
  const long w = static_cast<long>(g.w);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t p = first + r;
    const std::size_t n = p / (g.h * g.w);
    const long y = static_cast<long>((p / g.w) % g.h);
    const long xx = static_cast<long>(p % g.w);
    const T* row = dcols + r * patch;
    const bool x_inside = xx - pad >= 0 && xx + pad < w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const long sy = y + static_cast<long>(ky) - pad;
      if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
      T* dst_row = dx + (n * g.h + static_cast<std::size_t>(sy)) * g.w * g.cin;
      const T* src = row + ky * row_span;
      if (x_inside) {
        T* d = dst_row + static_cast<std::size_t>(xx - pad) * g.cin;
        for (std::size_t i = 0; i < row_span; ++i) d[i] += src[i];
        continue;
      }
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const long sx = xx + static_cast<long>(kx) - pad;
        if (sx < 0 || sx >= w) continue;
        T* d = dst_row + static_cast<std::size_t>(sx) * g.cin;
        const T* s = src + kx * g.cin;
        for (std::size_t c = 0; c < g.cin; ++c) d[c] += s[c];
      }
    }
  }
}

template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& b, const ConvGeom& g) {
  Tensor<T> out({g.n, g.h, g.w, g.cout});
  const std::size_t patch = g.patch();
  std::vector<T> cols(kConvChunk * patch);
  RowMat<T> y_chunk(kConvChunk, g.cout);
  Eigen::Map<const RowMat<T>> wm(w.ptr(), patch, g.cout);
  const std::size_t total = g.pixels();
  for (std::size_t first = 0; first < total; first += kConvChunk) {
    const std::size_t count = std::min(kConvChunk, total - first);
    im2col_chunk(x.ptr(), g, first, count, cols.data());
    Eigen::Map<const RowMat<T>> cm(cols.data(), kConvChunk, patch);
    y_chunk.noalias() = cm * wm;
    T* dst = out.ptr() + first * g.cout;
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t c = 0; c < g.cout; ++c) {
        dst[r * g.cout + c] = y_chunk(r, c) + b[c];
      }
    }
  }
  return out;
}

}  // namespace detail

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 4, "conv2d input");
  require_rank(wv, 4, "conv2d kernel");
  if (wv.dim(0) != wv.dim(1) || wv.dim(0) % 2 == 0) {
    throw InvalidArgument("conv2d: kernel must be square with odd size, got " +
                          shape_str(wv.shape()));
  }
  if (wv.dim(2) != xv.dim(3)) {
    throw InvalidArgument("conv2d: input has " + std::to_string(xv.dim(3)) +
                          " channels but kernel expects " +
                          std::to_string(wv.dim(2)));
  }
  if (b.value().size() != wv.dim(3)) {
    throw InvalidArgument("conv2d: bias length does not match output channels");
  }
  if (xv.dim(1) == 0 || xv.dim(2) == 0) {
    throw InvalidArgument("conv2d: empty spatial extent");
  }
  const detail::ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2),
                           xv.dim(3), wv.dim(3), wv.dim(0)};
  auto out = detail::conv_forward(xv, wv, b.value(), g);

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_result(std::move(out), {xn, wn, bn}, [xn, wn, bn, g](const Tensor<T>& gy) {
    using detail::kConvChunk;
    using detail::RowMat;
    const std::size_t patch = g.patch();
    const std::size_t total = g.pixels();
    std::vector<T> cols(kConvChunk * patch);
    RowMat<T> dcols(kConvChunk, patch);
    RowMat<T> dy_chunk = RowMat<T>::Zero(kConvChunk, g.cout);
    Eigen::Map<const RowMat<T>> wm(wn->value.ptr(), patch, g.cout);
    RowMat<T> dw = RowMat<T>::Zero(patch, g.cout);
    std::vector<double> db(g.cout, 0.0);
    T* dx = xn->requires_grad ? xn->grad_buffer().ptr() : nullptr;
    for (std::size_t first = 0; first < total; first += kConvChunk) {
      const std::size_t count = std::min(kConvChunk, total - first);
      dy_chunk.setZero();
      std::memcpy(dy_chunk.data(), gy.ptr() + first * g.cout,
                  sizeof(T) * count * g.cout);
      if (bn->requires_grad) {
        for (std::size_t r = 0; r < count; ++r)
          for (std::size_t c = 0; c < g.cout; ++c) db[c] += dy_chunk(r, c);
      }
      if (wn->requires_grad) {
        detail::im2col_chunk(xn->value.ptr(), g, first, count, cols.data());
        Eigen::Map<const RowMat<T>> cm(cols.data(), kConvChunk, patch);
        dw.noalias() += cm.transpose() * dy_chunk;
      }
      if (dx) {
        dcols.noalias() = dy_chunk * wm.transpose();
        detail::col2im_chunk(dcols.data(), g, first, count, dx);
      }
    }
    if (wn->requires_grad) {
      Tensor<T> gw(wn->value.shape());
      std::memcpy(gw.ptr(), dw.data(), sizeof(T) * gw.size());
      wn->accumulate(gw);
    }
    if (bn->requires_grad) {
      Tensor<T> gb(bn->value.shape());
      for (std::size_t c = 0; c < g.cout; ++c) gb[c] = static_cast<T>(db[c]);
      bn->accumulate(gb);
    }
  });
}

// 2x2 max pooling, stride 2. Gradient goes to the first maximum in
// row-major order within each window.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  const auto& xv = x.value();
  require_rank(xv, 4, "maxpool2 input");
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (h % 2 || w % 2) {
    throw InvalidArgument("maxpool2: spatial dims must be even, got " +
                          shape_str(xv.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, oh, ow, c});
  std::vector<std::uint8_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch, ++o) {
          T best = xv.at(b, 2 * y, 2 * xx, ch);
          std::uint8_t bi = 0;
          for (std::uint8_t k = 1; k < 4; ++k) {
            const T v = xv.at(b, 2 * y + k / 2, 2 * xx + k % 2, ch);
            if (v > best) {
              best = v;
              bi = k;
            }
          }
          out[o] = best;
          arg[o] = bi;
          if (detail::KinkProbe* pr = detail::kink_probe(); pr && best > T{0}) {
            for (std::uint8_t k = 0; k < 4; ++k) {
              if (k == bi) continue;
              const T v = xv.at(b, 2 * y + k / 2, 2 * xx + k % 2, ch);
              pr->min_pool_gap = std::min(pr->min_pool_gap, static_cast<double>(best - v));
            }
          }
        }
  auto xn = x.node();
  return make_result(std::move(out), {xn},
                     [xn, arg = std::move(arg), n, oh, ow, c](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            const std::uint8_t k = arg[o];
            gx.at(b, 2 * y + k / 2, 2 * xx + k % 2, ch) += gy[o];
          }
  });
}

namespace detail {

// Source taps for 2x bilinear upsampling with half-pixel centers
// (align_corners = false), clamped at the borders.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline Taps upsample_taps(std::size_t in) {
  Taps t;
  const std::size_t out = 2 * in;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * 0.5 - 0.5);
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[o] = std::min(lo, in - 1);
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

template <class T>
Var<T> upsample2(const Var<T>& x) {
  const auto& xv = x.value();
  require_rank(xv, 4, "upsample2 input");
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (h == 0 || w == 0) throw InvalidArgument("upsample2: empty spatial extent");
  auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
  Tensor<T> out({n, 2 * h, 2 * w, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T* a = &xv.at(b, ty.lo[oy], tx.lo[ox], 0);
        const T* bb = &xv.at(b, ty.lo[oy], tx.hi[ox], 0);
        const T* cc = &xv.at(b, ty.hi[oy], tx.lo[ox], 0);
        const T* d = &xv.at(b, ty.hi[oy], tx.hi[ox], 0);
        T* dst = &out.at(b, oy, ox, 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T top = a[ch] + fx * (bb[ch] - a[ch]);
          const T bot = cc[ch] + fx * (d[ch] - cc[ch]);
          dst[ch] = top + fy * (bot - top);
        }
      }
    }
  auto xn = x.node();
  return make_result(std::move(out), {xn},
                     [xn, ty = std::move(ty), tx = std::move(tx), n, h, w, c](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oy = 0; oy < 2 * h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        for (std::size_t ox = 0; ox < 2 * w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T* g = &gy.at(b, oy, ox, 0);
          T* a = &gx.at(b, ty.lo[oy], tx.lo[ox], 0);
          T* bb = &gx.at(b, ty.lo[oy], tx.hi[ox], 0);
          T* cc = &gx.at(b, ty.hi[oy], tx.lo[ox], 0);
          T* d = &gx.at(b, ty.hi[oy], tx.hi[ox], 0);
          const T wa = (1 - fy) * (1 - fx), wb = (1 - fy) * fx;
          const T wc = fy * (1 - fx), wd = fy * fx;
          for (std::size_t ch = 0; ch < c; ++ch) {
            a[ch] += wa * g[ch];
            bb[ch] += wb * g[ch];
            cc[ch] += wc * g[ch];
            d[ch] += wd * g[ch];
          }
        }
      }
  });
}

enum class Mode { kTrain, kInfer };

// Batch normalization over N,H,W per channel. Training mode normalizes with
// the biased batch variance and folds batch stats into the running buffers:
// running = momentum * running + (1 - momentum) * batch.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                 double momentum, double eps) {
  const auto& xv = x.value();
  const std::size_t c = xv.shape().back();
  if (gamma.value().size() != c || beta.value().size() != c ||
      running_mean.size() != c || running_var.size() != c) {
    throw InvalidArgument("batchnorm: parameter length does not match " +
                          std::to_string(c) + " channels");
  }
  const std::size_t m = xv.size() / std::max<std::size_t>(c, 1);
  if (m == 0) throw InvalidArgument("batchnorm: no elements to normalize");

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (mode == Mode::kTrain) {
    const T* p = xv.ptr();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += p[i * c + ch];
    for (auto& v : mean) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = p[i * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(m);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running_mean[ch] = static_cast<T>(momentum * running_mean[ch] +
                                        (1.0 - momentum) * mean[ch]);
      running_var[ch] = static_cast<T>(momentum * running_var[ch] +
                                       (1.0 - momentum) * var[ch]);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      var[ch] = running_var[ch];
    }
  }

  std::vector<T> inv_std(c), shift(c), scale(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double is = 1.0 / std::sqrt(var[ch] + eps);
    inv_std[ch] = static_cast<T>(is);
    scale[ch] = static_cast<T>(gamma.value()[ch] * is);
    shift[ch] = static_cast<T>(beta.value()[ch] - gamma.value()[ch] * mean[ch] * is);
  }
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  {
    const T* p = xv.ptr();
    T* o = out.ptr();
    T* xh = xhat.ptr();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = i * c + ch;
        xh[k] = static_cast<T>((p[k] - mean[ch]) * inv_std[ch]);
        o[k] = p[k] * scale[ch] + shift[ch];
      }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool train = mode == Mode::kTrain;
  return make_result(std::move(out), {xn, gn, bn},
                     [xn, gn, bn, xhat = std::move(xhat), inv_std, m, c, train](const Tensor<T>& gy) {
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    const T* g = gy.ptr();
    const T* xh = xhat.ptr();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = i * c + ch;
        sum_dy[ch] += g[k];
        sum_dy_xhat[ch] += static_cast<double>(g[k]) * xh[k];
      }
    if (gn->requires_grad) {
      Tensor<T> gg(gn->value.shape());
      for (std::size_t ch = 0; ch < c; ++ch) gg[ch] = static_cast<T>(sum_dy_xhat[ch]);
      gn->accumulate(gg);
    }
    if (bn->requires_grad) {
      Tensor<T> gb(bn->value.shape());
      for (std::size_t ch = 0; ch < c; ++ch) gb[ch] = static_cast<T>(sum_dy[ch]);
      bn->accumulate(gb);
    }
    if (xn->requires_grad) {
      auto& gx = xn->grad_buffer();
      T* dx = gx.ptr();
      const double inv_m = 1.0 / static_cast<double>(m);
      std::vector<T> a(c), b1(c), b2(c);
      for (std::size_t ch = 0; ch < c; ++ch) {
        a[ch] = static_cast<T>(gn->value[ch] * inv_std[ch]);
        b1[ch] = train ? static_cast<T>(sum_dy[ch] * inv_m) : T{0};
        b2[ch] = train ? static_cast<T>(sum_dy_xhat[ch] * inv_m) : T{0};
      }
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t k = i * c + ch;
          dx[k] += a[ch] * (g[k] - b1[ch] - xh[k] * b2[ch]);
        }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.value().ptr();
  T* o = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = p[i] > T{0} ? p[i] : T{0};
  if (detail::KinkProbe* pr = detail::kink_probe()) {
    for (std::size_t i = 0; i < out.size(); ++i)
      pr->min_relu_input = std::min(pr->min_relu_input, std::abs(static_cast<double>(p[i])));
  }
  auto xn = x.node();
  return make_result(std::move(out), {xn}, [xn](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    const T* p = xn->value.ptr();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (p[i] > T{0}) gx[i] += gy[i];
  });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.value()[i]);
  auto xn = x.node();
  Tensor<T> saved = out;
  return make_result(std::move(out), {xn}, [xn, saved = std::move(saved)](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] += gy[i] * saved[i] * (T{1} - saved[i]);
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av, 4, "concat_channels lhs");
  require_rank(bv, 4, "concat_channels rhs");
  if (av.dim(0) != bv.dim(0) || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw InvalidArgument("concat_channels: N/H/W mismatch " +
                          shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t ca = av.dim(3), cb = bv.dim(3), m = av.size() / std::max<std::size_t>(ca, 1);
  Tensor<T> out({av.dim(0), av.dim(1), av.dim(2), ca + cb});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.ptr() + i * ca, ca, out.ptr() + i * (ca + cb));
    std::copy_n(bv.ptr() + i * cb, cb, out.ptr() + i * (ca + cb) + ca);
  }
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn, ca, cb, m](const Tensor<T>& gy) {
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < ca; ++k) ga[i * ca + k] += gy[i * (ca + cb) + k];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < cb; ++k) gb[i * cb + k] += gy[i * (ca + cb) + ca + k];
    }
  });
}

// Elementwise product. Shapes must match, except that a single-channel
// operand is broadcast across the other's channels (attention gating).
template <class T>
Var<T> multiply(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    return make_result(std::move(out), {an, bn}, [an, bn](const Tensor<T>& gy) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * an->value[i];
      }
    });
  }
  const bool a_narrow = av.rank() == bv.rank() && av.rank() > 0 && av.shape().back() == 1;
  const bool b_narrow = av.rank() == bv.rank() && bv.rank() > 0 && bv.shape().back() == 1;
  if (!a_narrow && !b_narrow) {
    throw InvalidArgument("multiply: shapes not broadcast-compatible " +
                          shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const Var<T>& narrow = a_narrow ? a : b;
  const Var<T>& wide = a_narrow ? b : a;
  const auto& nv = narrow.value();
  const auto& wv = wide.value();
  for (std::size_t i = 0; i + 1 < nv.rank(); ++i) {
    if (nv.dim(i) != wv.dim(i)) {
      throw InvalidArgument("multiply: leading dims differ " +
                            shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
  }
  const std::size_t c = wv.shape().back(), m = nv.size();
  Tensor<T> out(wv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = nv[i] * wv[i * c + k];
  auto nn = narrow.node(), wn = wide.node();
  return make_result(std::move(out), {nn, wn}, [nn, wn, c, m](const Tensor<T>& gy) {
    if (nn->requires_grad) {
      auto& gn = nn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += static_cast<double>(gy[i * c + k]) * wn->value[i * c + k];
        gn[i] += static_cast<T>(s);
      }
    }
    if (wn->requires_grad) {
      auto& gw = wn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < c; ++k) gw[i * c + k] += gy[i * c + k] * nn->value[i];
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  auto xn = x.node();
  return make_result(Tensor<T>({1}, static_cast<T>(s)), {xn}, [xn](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0];
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument("add: shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Tensor<T>& gy) {
    if (an->requires_grad) an->accumulate(gy);
    if (bn->requires_grad) bn->accumulate(gy);
  });
}

template <class T>
Var<T> scale(const Var<T>& x, double s) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(x.value()[i] * s);
  auto xn = x.node();
  return make_result(std::move(out), {xn}, [xn, s](const Tensor<T>& gy) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(gy[i] * s);
  });
}

// Mean squared error against a constant target.
template <class T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw InvalidArgument("mse_loss: shape mismatch " + shape_str(pred.shape()) +
                          " vs " + shape_str(target.shape()));
  }
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    s += d * d;
  }
  auto pn = pred.node();
  return make_result(Tensor<T>({1}, static_cast<T>(s / static_cast<double>(n))), {pn},
                     [pn, target, n](const Tensor<T>& gy) {
    auto& gp = pn->grad_buffer();
    const double k = 2.0 * gy[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      gp[i] += static_cast<T>(k * (static_cast<double>(pn->value[i]) - target[i]));
  });
}

inline constexpr double kBceClamp = 1e-7;

// Binary cross-entropy against a constant mask. Predictions are clamped to
// [clamp, 1 - clamp] before the logs; clamped entries get zero gradient.
template <class T>
Var<T> bce_loss(const Var<T>& att, const Tensor<T>& mask, double clamp = kBceClamp) {
  if (att.shape() != mask.shape()) {
    throw InvalidArgument("bce_loss: shape mismatch " + shape_str(att.shape()) +
                          " vs " + shape_str(mask.shape()));
  }
  const std::size_t n = mask.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(att.value()[i]), clamp, 1.0 - clamp);
    const double a = mask[i];
    s -= a * std::log(p) + (1.0 - a) * std::log(1.0 - p);
  }
  auto an = att.node();
  return make_result(Tensor<T>({1}, static_cast<T>(s / static_cast<double>(n))), {an},
                     [an, mask, n, clamp](const Tensor<T>& gy) {
    auto& ga = an->grad_buffer();
    const double k = gy[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = an->value[i];
      if (raw < clamp || raw > 1.0 - clamp) continue;
      const double a = mask[i];
      ga[i] += static_cast<T>(k * (-(a / raw) + (1.0 - a) / (1.0 - raw)));
    }
  });
}

}  // namespace canopy
