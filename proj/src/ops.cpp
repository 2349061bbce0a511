#include "unihema/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "unihema/error.hpp"
#include "unihema/kernels.hpp"

namespace unihema {

using detail::make_result;
using detail::Node;

namespace {

bool needs(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
std::vector<double>& grad_of(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
const std::vector<double>& data_of(const Node& self, std::size_t i) { return self.inputs[i]->data; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_ndim(const Tensor& x, std::size_t n, const char* op) {
  if (x.ndim() != n) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(n) +
                         "-d tensor, got " + shape_str(x.shape()));
  }
}

// Elementwise binary op with partials da(a,b,y), db(a,b,y).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  require_same_shape(a, b, op);
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return make_result(a.shape(), std::move(out), {a, b}, op, [da, db](Node& self) {
    const auto& xa = data_of(self, 0);
    const auto& xb = data_of(self, 1);
    const auto& g = self.grad;
    if (needs(self, 0)) {
      auto& ga = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(xa[i], xb[i], self.data[i]);
    }
    if (needs(self, 1)) {
      auto& gb = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(xa[i], xb[i], self.data[i]);
    }
  });
}

// Elementwise unary op with derivative d(x, y).
template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F f, D d) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a}, op, [d](Node& self) {
    if (!needs(self, 0)) return;
    const auto& xa = data_of(self, 0);
    auto& ga = grad_of(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * d(xa[i], self.data[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
};

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* op) {
  if (stride == 0) throw ConfigError(std::string(op) + ": stride must be positive");
  if (k > in + 2 * pad) {
    throw ConfigError(std::string(op) + ": kernel extent " + std::to_string(k) +
                      " exceeds padded input extent " + std::to_string(in + 2 * pad));
  }
  if ((in + 2 * pad - k) % stride != 0) {
    throw ConfigError(std::string(op) + ": non-integral output extent for input " +
                      std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// col[(c*kh+i)*kw+j][oy*out_w+ox] = img[c][oy*s+i-p][ox*s+j-p]
void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) &&
                                x < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(y)) * g.width +
                             static_cast<std::size_t>(x)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(y)) * g.width +
                static_cast<std::size_t>(x)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

void add_channel_bias(std::vector<double>& out, const Tensor& bias, std::size_t channels,
                      std::size_t plane, const char* op) {
  if (!bias.defined()) return;
  if (bias.numel() != channels) {
    throw DimensionError(std::string(op) + ": bias " + shape_str(bias.shape()) + " vs " +
                         std::to_string(channels) + " channels");
  }
  auto b = bias.data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] += b[c];
  }
}

void channel_bias_grad(Node& self, std::size_t idx, std::size_t channels, std::size_t plane) {
  if (self.inputs.size() <= idx || !needs(self, idx)) return;
  auto& gb = grad_of(self, idx);
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += self.grad[c * plane + p];
    gb[c] += s;
  }
}

struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w;  // weight of hi
};

ResizeAxis resize_axis(std::size_t in, std::size_t out) {
  ResizeAxis r;
  r.lo.resize(out);
  r.hi.resize(out);
  r.w.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    r.lo[i] = lo;
    r.hi[i] = std::min(lo + 1, in - 1);
    r.w[i] = src - static_cast<double>(lo);
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.shape().back();
  if (b.numel() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  return make_result(x.shape(), std::move(out), {x, b}, "add_bias", [n](Node& self) {
    const auto& g = self.grad;
    if (needs(self, 0)) {
      auto& gx = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (needs(self, 1)) {
      auto& gb = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double v, double) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, "sum", [](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s / n}, {x}, "mean", [n](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor dot_const(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("dot_const: " + shape_str(x.shape()) + " vs " +
                         std::to_string(weights.size()) + " weights");
  }
  auto w = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  double s = 0.0;
  auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * (*w)[i];
  return make_result({1}, {s}, {x}, "dot_const", [w](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (*w)[i];
  });
}

Tensor mean_rows(const Tensor& x, bool canonical_order) {
  require_ndim(x, 2, "mean_rows");
  const std::size_t t = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(d, 0.0);
  if (canonical_order) {
    std::vector<double> column(t);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < t; ++i) column[i] = xd[i * d + j];
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (double v : column) s += v;
      out[j] = s / static_cast<double>(t);
    }
  } else {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < d; ++j) out[j] += xd[i * d + j];
    }
    for (auto& v : out) v /= static_cast<double>(t);
  }
  return make_result({1, d}, std::move(out), {x}, "mean_rows", [t, d](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[j] / static_cast<double>(t);
    }
  });
}

Tensor spatial_mean(const Tensor& x) {
  require_ndim(x, 3, "spatial_mean");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  auto xd = x.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xd[k * plane + p];
    out[k] = s / static_cast<double>(plane);
  }
  return make_result({1, c}, std::move(out), {x}, "spatial_mean", [c, plane](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t k = 0; k < c; ++k) {
      const double v = self.grad[k] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) g[k * plane + p] += v;
    }
  });
}

// ---------------------------------------------------------------------------
// Products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    const double* g = self.grad.data();
    if (needs(self, 0)) kernels::gemm_nt(g, data_of(self, 1).data(), grad_of(self, 0).data(), m, n, k);
    if (needs(self, 1)) kernels::gemm_tn(data_of(self, 0).data(), g, grad_of(self, 1).data(), k, m, n);
  });
}

Tensor transpose(const Tensor& a) {
  require_ndim(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  kernels::transpose(a.data().data(), out.data(), r, c);
  return make_result({c, r}, std::move(out), {a}, "transpose", [r, c](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.ndim() != 2 || weight.ndim() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t t = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  std::vector<double> out(t * out_dim, 0.0);
  kernels::gemm_nt(x.data().data(), weight.data().data(), out.data(), t, in, out_dim);
  if (bias.defined()) {
    if (bias.numel() != out_dim) {
      throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                           shape_str(weight.shape()));
    }
    auto b = bias.data();
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b[j];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({t, out_dim}, std::move(out), std::move(inputs), "linear",
                     [t, in, out_dim](Node& self) {
                       const double* g = self.grad.data();
                       if (needs(self, 0)) {
                         kernels::gemm_nn(g, data_of(self, 1).data(), grad_of(self, 0).data(), t,
                                          out_dim, in);
                       }
                       if (needs(self, 1)) {
                         kernels::gemm_tn(g, data_of(self, 0).data(), grad_of(self, 1).data(),
                                          out_dim, t, in);
                       }
                       if (self.inputs.size() > 2 && needs(self, 2)) {
                         auto& gb = grad_of(self, 2);
                         for (std::size_t i = 0; i < t; ++i) {
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double e = std::exp(xd[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, "softmax", [s](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dotp = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) {
          dotp += dy[base + k * s.inner] * y[base + k * s.inner];
        }
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t i = base + k * s.inner;
          g[i] += y[i] * (dy[i] - dotp);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "log_softmax");
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(xd[base + k * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] = xd[base + k * s.inner] - lz;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, "log_softmax", [s](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double total = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) total += dy[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t i = base + k * s.inner;
          g[i] += dy[i] - std::exp(y[i]) * total;
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x) { return softmax(x, x.ndim() - 1); }
Tensor log_softmax(const Tensor& x) { return log_softmax(x, x.ndim() - 1); }

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
                     [d, rows, xhat, inv](Node& self) {
                       const auto& dy = self.grad;
                       const auto& gd = data_of(self, 1);
                       if (needs(self, 0)) {
                         auto& gx = grad_of(self, 0);
                         std::vector<double> dh(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             dh[j] = dy[r * d + j] * gd[j];
                             s1 += dh[j];
                             s2 += dh[j] * (*xhat)[r * d + j];
                           }
                           const double k = (*inv)[r] / static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             gx[r * d + j] += k * (static_cast<double>(d) * dh[j] - s1 -
                                                   (*xhat)[r * d + j] * s2);
                           }
                         }
                       }
                       if (needs(self, 1)) {
                         auto& gg = grad_of(self, 1);
                         for (std::size_t i = 0; i < dy.size(); ++i) gg[i % d] += dy[i] * (*xhat)[i];
                       }
                       if (needs(self, 2)) {
                         auto& gb = grad_of(self, 2);
                         for (std::size_t i = 0; i < dy.size(); ++i) gb[i % d] += dy[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Spatial

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  require_ndim(x, 3, "conv2d");
  require_ndim(weight, 4, "conv2d");
  if (weight.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernels " +
                         shape_str(weight.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
  g.out_h = conv_extent(g.height, g.kh, stride, pad, "conv2d");
  g.out_w = conv_extent(g.width, g.kw, stride, pad, "conv2d");
  const std::size_t co = weight.dim(0);
  const std::size_t ckk = g.channels * g.kh * g.kw;
  const std::size_t plane = g.out_h * g.out_w;
  auto col = std::make_shared<std::vector<double>>(ckk * plane);
  im2col(x.data().data(), g, col->data());
  std::vector<double> out(co * plane, 0.0);
  kernels::gemm_nn(weight.data().data(), col->data(), out.data(), co, ckk, plane);
  add_channel_bias(out, bias, co, plane, "conv2d");
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({co, g.out_h, g.out_w}, std::move(out), std::move(inputs), "conv2d",
                     [g, co, ckk, plane, col](Node& self) {
                       const double* dy = self.grad.data();
                       if (needs(self, 1)) {
                         kernels::gemm_nt(dy, col->data(), grad_of(self, 1).data(), co, plane, ckk);
                       }
                       if (needs(self, 0)) {
                         std::vector<double> dcol(ckk * plane, 0.0);
                         kernels::gemm_tn(data_of(self, 1).data(), dy, dcol.data(), ckk, co, plane);
                         col2im_add(dcol.data(), g, grad_of(self, 0).data());
                       }
                       channel_bias_grad(self, 2, co, plane);
                     });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t pad) {
  require_ndim(x, 3, "conv_transpose2d");
  require_ndim(weight, 4, "conv_transpose2d");
  if (weight.dim(0) != x.dim(0)) {
    throw DimensionError("conv_transpose2d: input " + shape_str(x.shape()) + " vs kernels " +
                         shape_str(weight.shape()));
  }
  if (stride == 0) throw ConfigError("conv_transpose2d: stride must be positive");
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const long oh = static_cast<long>((h - 1) * stride + kh) - 2 * static_cast<long>(pad);
  const long ow = static_cast<long>((w - 1) * stride + kw) - 2 * static_cast<long>(pad);
  if (oh <= 0 || ow <= 0) throw ConfigError("conv_transpose2d: non-positive output extent");
  // The output image is the "input" side of the equivalent convolution.
  ConvGeometry g{co, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw, stride,
                 pad, h, w};
  const std::size_t cokk = co * kh * kw;
  const std::size_t plane = h * w;
  std::vector<double> col(cokk * plane, 0.0);
  kernels::gemm_tn(weight.data().data(), x.data().data(), col.data(), cokk, ci, plane);
  std::vector<double> out(co * g.height * g.width, 0.0);
  col2im_add(col.data(), g, out.data());
  add_channel_bias(out, bias, co, g.height * g.width, "conv_transpose2d");
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({co, g.height, g.width}, std::move(out), std::move(inputs),
                     "conv_transpose2d", [g, ci, cokk, plane](Node& self) {
                       std::vector<double> dcol(cokk * plane);
                       im2col(self.grad.data(), g, dcol.data());
                       if (needs(self, 0)) {
                         kernels::gemm_nn(data_of(self, 1).data(), dcol.data(),
                                          grad_of(self, 0).data(), ci, cokk, plane);
                       }
                       if (needs(self, 1)) {
                         kernels::gemm_nt(data_of(self, 0).data(), dcol.data(),
                                          grad_of(self, 1).data(), ci, plane, cokk);
                       }
                       channel_bias_grad(self, 2, g.channels, g.height * g.width);
                     });
}

Tensor contract(const Tensor& mask_emb, const Tensor& fmap) {
  require_ndim(mask_emb, 2, "contract");
  require_ndim(fmap, 3, "contract");
  if (mask_emb.dim(1) != fmap.dim(0)) {
    throw DimensionError("contract: channel mismatch " + shape_str(mask_emb.shape()) + " vs " +
                         shape_str(fmap.shape()));
  }
  const std::size_t q = mask_emb.dim(0), c = fmap.dim(0), plane = fmap.dim(1) * fmap.dim(2);
  std::vector<double> out(q * plane, 0.0);
  kernels::gemm_nn(mask_emb.data().data(), fmap.data().data(), out.data(), q, c, plane);
  return make_result({q, fmap.dim(1), fmap.dim(2)}, std::move(out), {mask_emb, fmap}, "contract",
                     [q, c, plane](Node& self) {
                       const double* g = self.grad.data();
                       if (needs(self, 0)) {
                         kernels::gemm_nt(g, data_of(self, 1).data(), grad_of(self, 0).data(), q,
                                          plane, c);
                       }
                       if (needs(self, 1)) {
                         kernels::gemm_tn(data_of(self, 0).data(), g, grad_of(self, 1).data(), c,
                                          q, plane);
                       }
                     });
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_ndim(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw UsageError("bilinear_resize: zero target extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto ry = std::make_shared<ResizeAxis>(resize_axis(h, out_h));
  auto rx = std::make_shared<ResizeAxis>(resize_axis(w, out_w));
  auto xd = x.data();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t k = 0; k < c; ++k) {
    const double* src = xd.data() + k * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double wy = ry->w[i];
      const double* r0 = src + ry->lo[i] * w;
      const double* r1 = src + ry->hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double wx = rx->w[j];
        const double top = (1.0 - wx) * r0[rx->lo[j]] + wx * r0[rx->hi[j]];
        const double bot = (1.0 - wx) * r1[rx->lo[j]] + wx * r1[rx->hi[j]];
        out[(k * out_h + i) * out_w + j] = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return make_result({c, out_h, out_w}, std::move(out), {x}, "bilinear_resize",
                     [c, h, w, out_h, out_w, ry, rx](Node& self) {
                       if (!needs(self, 0)) return;
                       auto& g = grad_of(self, 0);
                       for (std::size_t k = 0; k < c; ++k) {
                         double* dst = g.data() + k * h * w;
                         for (std::size_t i = 0; i < out_h; ++i) {
                           const double wy = ry->w[i];
                           for (std::size_t j = 0; j < out_w; ++j) {
                             const double wx = rx->w[j];
                             const double v = self.grad[(k * out_h + i) * out_w + j];
                             dst[ry->lo[i] * w + rx->lo[j]] += v * (1.0 - wy) * (1.0 - wx);
                             dst[ry->lo[i] * w + rx->hi[j]] += v * (1.0 - wy) * wx;
                             dst[ry->hi[i] * w + rx->lo[j]] += v * wy * (1.0 - wx);
                             dst[ry->hi[i] * w + rx->hi[j]] += v * wy * wx;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, "reshape", [](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + static_cast<long>(begin * row),
                          x.data().begin() + static_cast<long>(end * row));
  return make_result(std::move(shape), std::move(out), {x}, "slice_rows",
                     [begin, row](Node& self) {
                       if (!needs(self, 0)) return;
                       auto& g = grad_of(self, 0);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         g[begin * row + i] += self.grad[i];
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_ndim(x, 2, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  auto xd = x.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(xd.data() + i * c + begin, w, out.data() + i * w);
  }
  return make_result({r, w}, std::move(out), {x}, "slice_cols", [r, c, w, begin](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (pt != tail) {
      throw DimensionError("concat_rows: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    offsets.push_back(out.size());
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(std::move(shape), std::move(out), parts, "concat_rows",
                     [offsets](Node& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         if (!needs(self, k)) continue;
                         auto& g = grad_of(self, k);
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> widths, starts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r) {
      throw DimensionError("concat_cols: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    starts.push_back(total);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(d.data() + i * widths[k], widths[k], out.data() + i * total + starts[k]);
    }
  }
  return make_result({r, total}, std::move(out), parts, "concat_cols",
                     [r, total, widths, starts](Node& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         if (!needs(self, k)) continue;
                         auto& g = grad_of(self, k);
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < widths[k]; ++j) {
                             g[i * widths[k] + j] += self.grad[i * total + starts[k] + j];
                           }
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("gather_rows: no indices");
  const std::size_t n = x.dim(0);
  const std::size_t row = x.numel() / n;
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  auto xd = x.data();
  std::vector<double> out(idx->size() * row);
  for (std::size_t k = 0; k < idx->size(); ++k) {
    if ((*idx)[k] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string((*idx)[k]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(xd.data() + (*idx)[k] * row, row, out.data() + k * row);
  }
  Shape shape = x.shape();
  shape[0] = idx->size();
  return make_result(std::move(shape), std::move(out), {x}, "gather_rows", [idx, row](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t k = 0; k < idx->size(); ++k) {
      for (std::size_t j = 0; j < row; ++j) g[(*idx)[k] * row + j] += self.grad[k * row + j];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> indices) {
  require_ndim(x, 2, "pick");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (indices.size() != r) {
    throw DimensionError("pick: " + std::to_string(indices.size()) + " indices for " +
                         shape_str(x.shape()));
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  auto xd = x.data();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if ((*idx)[i] >= c) throw DimensionError("pick: column index out of range");
    out[i] = xd[i * c + (*idx)[i]];
  }
  return make_result({r}, std::move(out), {x}, "pick", [idx, c](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < idx->size(); ++i) g[i * c + (*idx)[i]] += self.grad[i];
  });
}

std::vector<std::size_t> argmax_rows(const Tensor& x) {
  const std::size_t c = x.shape().back();
  const std::size_t r = x.numel() / c;
  auto d = x.data();
  std::vector<std::size_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = static_cast<std::size_t>(std::max_element(d.begin() + static_cast<long>(i * c),
                                                       d.begin() + static_cast<long>((i + 1) * c)) -
                                      (d.begin() + static_cast<long>(i * c)));
  }
  return out;
}

bool all_finite(const Tensor& x) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace unihema
