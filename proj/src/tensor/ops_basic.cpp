// Elementwise, shape and reduction primitives.

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "chart/error.hpp"
#include "ops_internal.hpp"

namespace chart {

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node->inputs.push_back(t.impl_ptr());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw InputError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, std::string_view op) {
  if (a.rank() != rank) {
    throw InputError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

}  // namespace detail

using detail::make_result;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

template <typename Fwd, typename GradA, typename GradB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, Fwd fwd, GradA ga, GradB gb) {
  detail::require_same_shape(a, b, op);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result(a.shape(), std::move(out), op, {a, b}, [pa, pb, ga, gb](const TensorImpl& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga(o.grad[i], pa->data[i], pb->data[i]);
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb(o.grad[i], pa->data[i], pb->data[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; }, [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto pa = a.impl_ptr();
  return make_result(a.shape(), std::move(out), "scale", {a}, [pa, factor](const TensorImpl& o) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  auto pa = a.impl_ptr();
  return make_result(a.shape(), std::move(out), "add_scalar", {a}, [pa](const TensorImpl& o) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& bias, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  if (bias.numel() != l.extent) {
    throw InputError("add_broadcast: bias length " + std::to_string(bias.numel()) + " does not match axis extent " +
                     std::to_string(l.extent));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t e = 0; e < l.extent; ++e) {
      double* row = out.data() + (o * l.extent + e) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) row[i] += bd[e];
    }
  auto px = x.impl_ptr();
  auto pb = bias.impl_ptr();
  return make_result(x.shape(), std::move(out), "add_broadcast", {x, bias}, [px, pb, l](const TensorImpl& o) {
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t a = 0; a < l.outer; ++a)
        for (std::size_t e = 0; e < l.extent; ++e) {
          const double* row = o.grad.data() + (a * l.extent + e) * l.inner;
          double s = 0.0;
          for (std::size_t i = 0; i < l.inner; ++i) s += row[i];
          g[e] += s;
        }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw InputError("matmul: inner extents disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [pa, pb, m, k, n](const TensorImpl& o) {
    ConstMap dc(o.grad.data(), m, n);
    if (pa->requires_grad) {
      MutMap(pa->grad_buffer().data(), m, k).noalias() += dc * ConstMap(pb->data.data(), k, n).transpose();
    }
    if (pb->requires_grad) {
      MutMap(pb->grad_buffer().data(), k, n).noalias() += ConstMap(pa->data.data(), m, k).transpose() * dc;
    }
  });
}

Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
  auto pa = a.impl_ptr();
  return make_result({n, m}, std::move(out), "transpose", {a}, [pa, m, n](const TensorImpl& o) {
    MutMap(pa->grad_buffer().data(), m, n) += ConstMap(o.grad.data(), n, m).transpose();
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw InputError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto pa = a.impl_ptr();
  return make_result(std::move(shape), std::move(out), "reshape", {a}, [pa](const TensorImpl& o) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InputError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw InputError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size()) throw InputError("concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.dim(i) != shape[i]) throw InputError("concat: extents disagree off the concat axis");
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto l = detail::axis_layout(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> extents;
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    const std::size_t e = p.dim(axis);
    extents.push_back(e);
    const auto pd = p.data();
    for (std::size_t o = 0; o < l.outer; ++o) {
      std::copy_n(pd.data() + o * e * l.inner, e * l.inner, out.data() + (o * total + at) * l.inner);
    }
    at += e;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
  return make_result(shape, std::move(out), "concat", parts, [impls, extents, l, total](const TensorImpl& o) {
    std::size_t at = 0;
    for (std::size_t k = 0; k < impls.size(); ++k) {
      const std::size_t e = extents[k];
      if (impls[k]->requires_grad) {
        auto& g = impls[k]->grad_buffer();
        for (std::size_t a = 0; a < l.outer; ++a) {
          const double* src = o.grad.data() + (a * total + at) * l.inner;
          double* dst = g.data() + a * e * l.inner;
          for (std::size_t i = 0; i < e * l.inner; ++i) dst[i] += src[i];
        }
      }
      at += e;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto l = detail::axis_layout(x.shape(), axis);
  if (begin >= end || end > l.extent) throw InputError("slice: invalid range");
  const std::size_t e = end - begin;
  Shape shape = x.shape();
  shape[axis] = e;
  std::vector<double> out(shape_numel(shape));
  const auto xd = x.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    std::copy_n(xd.data() + (o * l.extent + begin) * l.inner, e * l.inner, out.data() + o * e * l.inner);
  }
  auto px = x.impl_ptr();
  return make_result(shape, std::move(out), "slice", {x}, [px, l, begin, e](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t a = 0; a < l.outer; ++a) {
      const double* src = o.grad.data() + a * e * l.inner;
      double* dst = g.data() + (a * l.extent + begin) * l.inner;
      for (std::size_t i = 0; i < e * l.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  detail::require_rank(table, 2, "gather_rows");
  if (rows.empty()) throw InputError("gather_rows: empty index list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  const auto td = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) throw InputError("gather_rows: row index out of range");
    std::copy_n(td.data() + idx[r] * d, d, out.data() + r * d);
  }
  auto pt = table.impl_ptr();
  return make_result({idx.size(), d}, std::move(out), "gather_rows", {table}, [pt, idx, d](const TensorImpl& o) {
    auto& g = pt->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += o.grad[r * d + j];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto px = x.impl_ptr();
  return make_result({1}, {s}, "sum", {x}, [px](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  std::vector<double> out(l.outer * l.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t e = 0; e < l.extent; ++e) {
      const double* row = xd.data() + (o * l.extent + e) * l.inner;
      double* dst = out.data() + o * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) dst[i] += row[i];
    }
  auto px = x.impl_ptr();
  return make_result(shape, std::move(out), "sum_axis", {x}, [px, l](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t a = 0; a < l.outer; ++a)
      for (std::size_t e = 0; e < l.extent; ++e) {
        double* row = g.data() + (a * l.extent + e) * l.inner;
        const double* src = o.grad.data() + a * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) row[i] += src[i];
      }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < l.extent; ++e) mx = std::max(mx, xd[base + e * l.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) {
        const double v = std::exp(xd[base + e * l.inner] - mx);
        out[base + e * l.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < l.extent; ++e) out[base + e * l.inner] /= z;
    }
  auto px = x.impl_ptr();
  return make_result(x.shape(), std::move(out), "softmax", {x}, [px, l](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t a = 0; a < l.outer; ++a)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = a * l.extent * l.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < l.extent; ++e) dot += o.grad[base + e * l.inner] * o.data[base + e * l.inner];
        for (std::size_t e = 0; e < l.extent; ++e) {
          const std::size_t k = base + e * l.inner;
          g[k] += o.data[k] * (o.grad[k] - dot);
        }
      }
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  detail::require_rank(x, 2, "masked_softmax");
  if (keep.size() != x.numel()) throw InputError("masked_softmax: mask size does not match logits");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xd = x.data();
  std::vector<double> out(xd.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (keep[base + c]) mx = std::max(mx, xd[base + c]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (keep[base + c]) z += (out[base + c] = std::exp(xd[base + c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= z;
  }
  auto px = x.impl_ptr();
  return make_result(x.shape(), std::move(out), "masked_softmax", {x}, [px, rows, cols](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += o.grad[base + c] * o.data[base + c];
      for (std::size_t c = 0; c < cols; ++c) g[base + c] += o.data[base + c] * (o.grad[base + c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis, double epsilon) {
  const auto l = detail::axis_layout(x.shape(), axis);
  if (gain.numel() != l.extent || bias.numel() != l.extent) {
    throw InputError("layer_norm: gain/bias extents must equal the normalised axis extent " + std::to_string(l.extent));
  }
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(xd.size());
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(l.outer * l.inner);
  const double n = static_cast<double>(l.extent);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      double mu = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) mu += xd[base + e * l.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) {
        const double d = xd[base + e * l.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + epsilon);
      inv_std[o * l.inner + i] = inv;
      for (std::size_t e = 0; e < l.extent; ++e) {
        const std::size_t k = base + e * l.inner;
        xhat[k] = (xd[k] - mu) * inv;
        out[k] = gd[e] * xhat[k] + bd[e];
      }
    }
  auto px = x.impl_ptr();
  auto pg = gain.impl_ptr();
  auto pb = bias.impl_ptr();
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [px, pg, pb, l, xhat = std::move(xhat), inv_std = std::move(inv_std), n](const TensorImpl& o) {
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->grad_buffer();
          auto& gb = pb->grad_buffer();
          for (std::size_t a = 0; a < l.outer; ++a)
            for (std::size_t e = 0; e < l.extent; ++e)
              for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t k = (a * l.extent + e) * l.inner + i;
                gg[e] += o.grad[k] * xhat[k];
                gb[e] += o.grad[k];
              }
        }
        if (px->requires_grad) {
          auto& gx = px->grad_buffer();
          for (std::size_t a = 0; a < l.outer; ++a)
            for (std::size_t i = 0; i < l.inner; ++i) {
              const std::size_t base = a * l.extent * l.inner + i;
              double s1 = 0.0, s2 = 0.0;
              for (std::size_t e = 0; e < l.extent; ++e) {
                const std::size_t k = base + e * l.inner;
                const double dxh = o.grad[k] * pg->data[e];
                s1 += dxh;
                s2 += dxh * xhat[k];
              }
              const double inv = inv_std[a * l.inner + i];
              for (std::size_t e = 0; e < l.extent; ++e) {
                const std::size_t k = base + e * l.inner;
                const double dxh = o.grad[k] * pg->data[e];
                gx[k] += inv / n * (n * dxh - s1 - xhat[k] * s2);
              }
            }
        }
      });
}

Tensor pointwise(const Tensor& x, Activation kind) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::string_view op;
  switch (kind) {
    case Activation::gelu:
      op = "gelu";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
      break;
    case Activation::relu:
      op = "relu";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      break;
    case Activation::sigmoid:
      op = "sigmoid";
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xd[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      }
      break;
    case Activation::tanh:
      op = "tanh";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
      break;
  }
  auto px = x.impl_ptr();
  return make_result(x.shape(), std::move(out), op, {x}, [px, kind](const TensorImpl& o) {
    auto& g = px->grad_buffer();
    const auto& in = px->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Activation::gelu:
          d = 0.5 * (1.0 + std::erf(in[i] * kInvSqrt2)) + in[i] * kInvSqrt2Pi * std::exp(-0.5 * in[i] * in[i]);
          break;
        case Activation::relu:
          d = in[i] > 0.0 ? 1.0 : 0.0;
          break;
        case Activation::sigmoid:
          d = o.data[i] * (1.0 - o.data[i]);
          break;
        case Activation::tanh:
          d = 1.0 - o.data[i] * o.data[i];
          break;
      }
      g[i] += d * o.grad[i];
    }
  });
}

Tensor gelu(const Tensor& x) { return pointwise(x, Activation::gelu); }
Tensor relu(const Tensor& x) { return pointwise(x, Activation::relu); }
Tensor sigmoid(const Tensor& x) { return pointwise(x, Activation::sigmoid); }
Tensor tanh(const Tensor& x) { return pointwise(x, Activation::tanh); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> class_weights) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) throw InputError("cross_entropy: one target per row required");
  if (!class_weights.empty() && class_weights.size() != c) throw InputError("cross_entropy: one weight per class");
  const auto ld = logits.data();
  std::vector<double> probs(n * c);
  std::vector<double> w(n);
  double loss = 0.0, wsum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw InputError("cross_entropy: target out of range");
    const double* row = ld.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    w[r] = class_weights.empty() ? 1.0 : class_weights[targets[r]];
    loss += w[r] * (std::log(z) + mx - row[targets[r]]);
    wsum += w[r];
  }
  if (wsum <= 0.0) throw InputError("cross_entropy: total weight must be positive");
  loss /= wsum;
  auto pl = logits.impl_ptr();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result({1}, {loss}, "cross_entropy", {logits},
                     [pl, probs = std::move(probs), w = std::move(w), tgt = std::move(tgt), n, c, wsum](const TensorImpl& o) {
                       auto& g = pl->grad_buffer();
                       const double go = o.grad[0] / wsum;
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = probs[r * c + j] - (j == tgt[r] ? 1.0 : 0.0);
                           g[r * c + j] += go * w[r] * d;
                         }
                     });
}

Tensor sigmoid_focal(const Tensor& logits, std::span<const double> targets, double alpha, double gamma) {
  if (targets.size() != logits.numel()) throw InputError("sigmoid_focal: target count does not match logits");
  const auto xd = logits.data();
  std::vector<double> out(xd.size());
  std::vector<double> deriv(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double x = xd[i];
    const double t = targets[i];
    const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    // Stable softplus(x) - t*x, i.e. binary cross-entropy with logits.
    const double ce = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - t * x;
    const double pt = p * t + (1.0 - p) * (1.0 - t);
    const double q = 1.0 - pt;
    const double at = alpha * t + (1.0 - alpha) * (1.0 - t);
    const double dq = -p * (1.0 - p) * (2.0 * t - 1.0);
    const double qg = std::pow(q, gamma);
    const double qg1 = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
    out[i] = at * qg * ce;
    deriv[i] = at * (qg1 * dq * ce + qg * (p - t));
  }
  auto pl = logits.impl_ptr();
  return make_result(logits.shape(), std::move(out), "sigmoid_focal", {logits},
                     [pl, deriv = std::move(deriv)](const TensorImpl& o) {
                       auto& g = pl->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += deriv[i] * o.grad[i];
                     });
}

}  // namespace chart
