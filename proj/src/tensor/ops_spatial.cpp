// Feature-map primitives: convolution, resampling and local attention.

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "chart/error.hpp"
#include "ops_internal.hpp"

namespace chart {

using detail::make_result;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t plane = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            dst[oy * g.w_out + ox] = inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t plane = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += src[oy * g.w_out + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw InputError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c_out = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.c_in) {
    throw InputError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, map has " +
                     std::to_string(g.c_in));
  }
  if (kernel.dim(3) != g.k) throw InputError("conv2d: kernel must be square");
  if (g.k > g.h + 2 * padding || g.k > g.w + 2 * padding) {
    throw InputError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != g.c_out) throw InputError("conv2d: bias length must equal output channels");
  g.h_out = (g.h + 2 * padding - g.k) / stride + 1;
  g.w_out = (g.w + 2 * padding - g.k) / stride + 1;

  const std::size_t patch = g.c_in * g.k * g.k;
  const std::size_t plane = g.h_out * g.w_out;
  std::vector<double> cols(patch * plane);
  im2col(x.data().data(), g, cols.data());
  std::vector<double> out(g.c_out * plane);
  MutMap(out.data(), g.c_out, plane).noalias() =
      ConstMap(kernel.data().data(), g.c_out, patch) * ConstMap(cols.data(), patch, plane);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t o = 0; o < g.c_out; ++o)
      for (std::size_t p = 0; p < plane; ++p) out[o * plane + p] += bd[o];
  }
  auto px = x.impl_ptr();
  auto pk = kernel.impl_ptr();
  std::vector<Tensor> inputs{x, kernel};
  std::shared_ptr<TensorImpl> pb;
  if (bias.defined()) {
    inputs.push_back(bias);
    pb = bias.impl_ptr();
  }
  // Input-only gradients do not need the patch matrix; drop it early when possible.
  const bool keep_cols = kernel.requires_grad();
  if (!keep_cols) cols.clear();
  return make_result(
      {g.c_out, g.h_out, g.w_out}, std::move(out), "conv2d", std::move(inputs),
      [px, pk, pb, g, patch, plane, cols = std::move(cols)](const TensorImpl& o) {
        ConstMap dout(o.grad.data(), g.c_out, plane);
        if (pk->requires_grad) {
          MutMap(pk->grad_buffer().data(), g.c_out, patch).noalias() += dout * ConstMap(cols.data(), patch, plane).transpose();
        }
        if (pb && pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          for (std::size_t c = 0; c < g.c_out; ++c) gb[c] += dout.row(static_cast<Eigen::Index>(c)).sum();
        }
        if (px->requires_grad) {
          RowMat dcols = ConstMap(pk->data.data(), g.c_out, patch).transpose() * dout;
          col2im(dcols.data(), g, px->grad_buffer().data());
        }
      });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 3, "upsample_nearest");
  if (factor == 0) throw InputError("upsample_nearest: factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = h * factor, wo = w * factor;
  std::vector<double> out(c * ho * wo);
  const auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(ch * ho + y) * wo + xx] = xd[(ch * h + y / factor) * w + xx / factor];
  auto px = x.impl_ptr();
  return make_result({c, ho, wo}, std::move(out), "upsample_nearest", {x}, [px, c, h, w, ho, wo, factor](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) g[(ch * h + y / factor) * w + xx / factor] += o.grad[(ch * ho + y) * wo + xx];
  });
}

namespace {

// Clamped cell lookup for one continuous coordinate on an axis of length n.
struct AxisSample {
  std::size_t lo, hi;
  double frac;
  bool clamped;  // coordinate left the valid range; derivative is zero
};

AxisSample axis_sample(double coord, std::size_t n) {
  const double top = static_cast<double>(n - 1);
  AxisSample s{};
  s.clamped = coord < 0.0 || coord > top;
  const double c = std::clamp(coord, 0.0, top);
  if (n == 1) return {0, 0, 0.0, true};
  std::size_t lo = static_cast<std::size_t>(std::floor(c));
  if (lo >= n - 1) lo = n - 2;
  s.lo = lo;
  s.hi = lo + 1;
  s.frac = c - static_cast<double>(lo);
  return s;
}

}  // namespace

Tensor bilinear_sample(const Tensor& x, const Tensor& points) {
  detail::require_rank(x, 3, "bilinear_sample");
  detail::require_rank(points, 2, "bilinear_sample points");
  if (points.dim(1) != 2) throw InputError("bilinear_sample: points must be [P, 2]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), np = points.dim(0);
  const auto xd = x.data();
  const auto pd = points.data();
  std::vector<double> out(np * c);
  std::vector<AxisSample> sx(np), sy(np);
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < np; ++p) {
    sx[p] = axis_sample(pd[2 * p], w);
    sy[p] = axis_sample(pd[2 * p + 1], h);
    const double fx = sx[p].frac, fy = sy[p].frac;
    const std::size_t i00 = sy[p].lo * w + sx[p].lo, i01 = sy[p].lo * w + sx[p].hi;
    const std::size_t i10 = sy[p].hi * w + sx[p].lo, i11 = sy[p].hi * w + sx[p].hi;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* m = xd.data() + ch * plane;
      out[p * c + ch] = (1.0 - fy) * ((1.0 - fx) * m[i00] + fx * m[i01]) + fy * ((1.0 - fx) * m[i10] + fx * m[i11]);
    }
  }
  auto px = x.impl_ptr();
  auto pp = points.impl_ptr();
  return make_result({np, c}, std::move(out), "bilinear_sample", {x, points},
                     [px, pp, sx = std::move(sx), sy = std::move(sy), c, w, plane, np](const TensorImpl& o) {
                       for (std::size_t p = 0; p < np; ++p) {
                         const double fx = sx[p].frac, fy = sy[p].frac;
                         const std::size_t i00 = sy[p].lo * w + sx[p].lo, i01 = sy[p].lo * w + sx[p].hi;
                         const std::size_t i10 = sy[p].hi * w + sx[p].lo, i11 = sy[p].hi * w + sx[p].hi;
                         const double* go = o.grad.data() + p * c;
                         if (px->requires_grad) {
                           auto& gx = px->grad_buffer();
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double* m = gx.data() + ch * plane;
                             m[i00] += go[ch] * (1.0 - fy) * (1.0 - fx);
                             m[i01] += go[ch] * (1.0 - fy) * fx;
                             m[i10] += go[ch] * fy * (1.0 - fx);
                             m[i11] += go[ch] * fy * fx;
                           }
                         }
                         if (pp->requires_grad) {
                           auto& gp = pp->grad_buffer();
                           double dx = 0.0, dy = 0.0;
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             const double* m = px->data.data() + ch * plane;
                             dx += go[ch] * ((1.0 - fy) * (m[i01] - m[i00]) + fy * (m[i11] - m[i10]));
                             dy += go[ch] * ((1.0 - fx) * (m[i10] - m[i00]) + fx * (m[i11] - m[i01]));
                           }
                           if (!sx[p].clamped) gp[2 * p] += dx;
                           if (!sy[p].clamped) gp[2 * p + 1] += dy;
                         }
                       }
                     });
}

Tensor local_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t height, std::size_t width,
                       std::size_t window, std::size_t heads) {
  detail::require_rank(q, 2, "local_attention");
  detail::require_same_shape(q, k, "local_attention");
  detail::require_same_shape(q, v, "local_attention");
  const std::size_t n = q.dim(0), ch = q.dim(1);
  if (n != height * width) throw InputError("local_attention: token count does not match the grid");
  if (window == 0 || window % 2 == 0) throw InputError("local_attention: window must be odd");
  if (window > std::min(height, width)) {
    throw ConfigError("local_attention: window " + std::to_string(window) + " larger than map " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  if (heads == 0 || ch % heads != 0) throw ConfigError("local_attention: channels must split evenly across heads");
  const std::size_t d = ch / heads;
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(window / 2);
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(d));

  // Neighbour lists (clipped windows) shared by all heads.
  std::vector<std::size_t> nb_begin(n + 1, 0);
  std::vector<std::size_t> nb;
  nb.reserve(n * window * window);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
          const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(height) || xx >= static_cast<std::ptrdiff_t>(width))
            continue;
          nb.push_back(static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx));
        }
      nb_begin[y * width + x + 1] = nb.size();
    }

  const auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> attn(nb.size() * heads);  // [neighbour slot, head]
  std::vector<double> out(n * ch, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t b = nb_begin[p], e = nb_begin[p + 1];
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const double* qp = qd.data() + p * ch + hd * d;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = b; s < e; ++s) {
        const double* kn = kd.data() + nb[s] * ch + hd * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += qp[j] * kn[j];
        attn[s * heads + hd] = dot * scale_f;
        mx = std::max(mx, attn[s * heads + hd]);
      }
      double z = 0.0;
      for (std::size_t s = b; s < e; ++s) z += (attn[s * heads + hd] = std::exp(attn[s * heads + hd] - mx));
      double* op = out.data() + p * ch + hd * d;
      for (std::size_t s = b; s < e; ++s) {
        const double a = (attn[s * heads + hd] /= z);
        const double* vn = vd.data() + nb[s] * ch + hd * d;
        for (std::size_t j = 0; j < d; ++j) op[j] += a * vn[j];
      }
    }
  }
  auto pq = q.impl_ptr(), pk = k.impl_ptr(), pv = v.impl_ptr();
  return make_result(
      {n, ch}, std::move(out), "local_attention", {q, k, v},
      [pq, pk, pv, nb = std::move(nb), nb_begin = std::move(nb_begin), attn = std::move(attn), n, ch, d, heads,
       scale_f](const TensorImpl& o) {
        std::vector<double> da(attn.size());
        for (std::size_t p = 0; p < n; ++p) {
          const std::size_t b = nb_begin[p], e = nb_begin[p + 1];
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const double* go = o.grad.data() + p * ch + hd * d;
            double dot = 0.0;
            for (std::size_t s = b; s < e; ++s) {
              const double* vn = pv->data.data() + nb[s] * ch + hd * d;
              double g = 0.0;
              for (std::size_t j = 0; j < d; ++j) g += go[j] * vn[j];
              da[s * heads + hd] = g;
              dot += g * attn[s * heads + hd];
            }
            for (std::size_t s = b; s < e; ++s) {
              const double a = attn[s * heads + hd];
              const double dl = a * (da[s * heads + hd] - dot) * scale_f;  // d(loss)/d(raw dot)
              if (pv->requires_grad) {
                double* gv = pv->grad_buffer().data() + nb[s] * ch + hd * d;
                for (std::size_t j = 0; j < d; ++j) gv[j] += a * go[j];
              }
              if (pq->requires_grad) {
                double* gq = pq->grad_buffer().data() + p * ch + hd * d;
                const double* kn = pk->data.data() + nb[s] * ch + hd * d;
                for (std::size_t j = 0; j < d; ++j) gq[j] += dl * kn[j];
              }
              if (pk->requires_grad) {
                double* gk = pk->grad_buffer().data() + nb[s] * ch + hd * d;
                const double* qp = pq->data.data() + p * ch + hd * d;
                for (std::size_t j = 0; j < d; ++j) gk[j] += dl * qp[j];
              }
            }
          }
        }
      });
}

}  // namespace chart
