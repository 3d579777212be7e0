#pragma once

// Differentiable operations on ndgrad::Tensor.
//
// Binary elementwise ops broadcast numpy-style on trailing axes. Gradients
// flowing into a broadcast operand are summed over the broadcast axes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace eavae::ndgrad {

namespace detail {

struct BroadcastPlan {
  Shape out;
  bool a_same = false;  // a has the output shape
  bool b_same = false;
  std::vector<std::size_t> a_index;  // per output element, only if !a_same
  std::vector<std::size_t> b_index;
};

inline BroadcastPlan plan_broadcast(const std::string& op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t axis = rank - 1 - k;
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) throw ShapeError(op, a, b);
    out[axis] = std::max(da, db);
    sa[axis] = da == 1 ? 0 : stride_a;
    sb[axis] = db == 1 ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  BroadcastPlan plan;
  plan.out = out;
  plan.a_same = (a == out);
  plan.b_same = (b == out);
  const std::size_t n = numel(out);
  if (plan.a_same && plan.b_same) return plan;
  if (!plan.a_same) plan.a_index.resize(n);
  if (!plan.b_same) plan.b_index.resize(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!plan.a_same) plan.a_index[i] = ia;
    if (!plan.b_same) plan.b_index[i] = ib;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (counter[axis] < out[axis]) break;
      ia -= sa[axis] * out[axis];
      ib -= sb[axis] * out[axis];
      counter[axis] = 0;
    }
  }
  return plan;
}

// fwd(a, b) -> value; da(a, b, out) and db(a, b, out) -> local partials.
template <class Fwd, class DA, class DB>
Tensor binary(const std::string& op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[plan->a_same ? i : plan->a_index[i]];
    const double y = bv[plan->b_same ? i : plan->b_index[i]];
    out[i] = fwd(x, y);
  }
  return Tensor::make_result(plan->out, std::move(out), {a, b}, [plan, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.data.size();
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = plan->a_same ? i : plan->a_index[i];
        const std::size_t ib = plan->b_same ? i : plan->b_index[i];
        g[ia] += self.grad[i] * da(pa.data[ia], pb.data[ib], self.data[i]);
      }
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = plan->a_same ? i : plan->a_index[i];
        const std::size_t ib = plan->b_same ? i : plan->b_index[i];
        g[ib] += self.grad[i] * db(pa.data[ia], pb.data[ib], self.data[i]);
      }
    }
  });
}

// fwd(x) -> y; deriv(x, y) -> dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& t, Fwd fwd, Deriv deriv) {
  const auto& x = t.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::make_result(t.shape(), std::move(out), {t}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const std::string& op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ShapeError(op + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  s.extent = shape[axis];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

}  // namespace detail

// ---- scalar math shared with non-tape code ----

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- binary ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---- unary ----

inline Tensor scale(const Tensor& t, double c) {
  return detail::unary(t, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& t, double c) {
  return detail::unary(t, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& t) { return scale(t, -1.0); }
inline Tensor operator-(const Tensor& t) { return neg(t); }
inline Tensor operator*(double c, const Tensor& t) { return scale(t, c); }
inline Tensor operator*(const Tensor& t, double c) { return scale(t, c); }
inline Tensor operator+(const Tensor& t, double c) { return add_scalar(t, c); }
inline Tensor operator-(const Tensor& t, double c) { return add_scalar(t, -c); }

inline Tensor square(const Tensor& t) {
  return detail::unary(t, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor abs(const Tensor& t) {
  return detail::unary(
      t, [](double x) { return std::abs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Tensor exp(const Tensor& t) {
  return detail::unary(t, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& t) {
  return detail::unary(t, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor sqrt(const Tensor& t) {
  return detail::unary(t, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor sigmoid(const Tensor& t) {
  return detail::unary(t, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor relu(const Tensor& t) {
  return detail::unary(t, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Tensor softplus(const Tensor& t) {
  return detail::unary(t, [](double x) { return softplus(x); }, [](double x, double) { return sigmoid(x); });
}
/// Gradient passes only where the input lies strictly inside [lo, hi].
inline Tensor clamp(const Tensor& t, double lo, double hi) {
  return detail::unary(
      t, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions ----

inline Tensor sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return Tensor::make_result(Shape{}, {s}, {t}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.size())); }

inline Tensor sum(const Tensor& t, long axis_in, bool keepdim = false) {
  const std::size_t axis = detail::normalize_axis(axis_in, t.rank(), "sum");
  const auto split = detail::split_axis(t.shape(), axis);
  Shape out_shape = t.shape();
  if (keepdim) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(split.outer * split.inner, 0.0);
  const auto& x = t.values();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t e = 0; e < split.extent; ++e)
      for (std::size_t i = 0; i < split.inner; ++i)
        out[o * split.inner + i] += x[(o * split.extent + e) * split.inner + i];
  return Tensor::make_result(std::move(out_shape), std::move(out), {t}, [split](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t e = 0; e < split.extent; ++e)
        for (std::size_t i = 0; i < split.inner; ++i)
          g[(o * split.extent + e) * split.inner + i] += self.grad[o * split.inner + i];
  });
}

inline Tensor mean(const Tensor& t, long axis, bool keepdim = false) {
  const std::size_t a = detail::normalize_axis(axis, t.rank(), "mean");
  return scale(sum(t, axis, keepdim), 1.0 / static_cast<double>(t.dim(a)));
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  using Map = Eigen::Map<RowMat>;
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m);
  Map(out.data(), n, m).noalias() = CMap(a.values().data(), n, k) * CMap(b.values().data(), k, m);
  return Tensor::make_result(Shape{n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    CMap gout(self.grad.data(), n, m);
    if (pa.requires_grad) {
      Map(pa.grad_buffer().data(), n, k).noalias() += gout * CMap(pb.data.data(), k, m).transpose();
    }
    if (pb.requires_grad) {
      Map(pb.grad_buffer().data(), k, m).noalias() += CMap(pa.data.data(), n, k).transpose() * gout;
    }
  });
}

// ---- softmax family (last axis) ----

inline Tensor softmax(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("softmax: needs at least one axis");
  const std::size_t width = t.shape().back();
  const std::size_t rows = t.size() / width;
  const auto& x = t.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t c = 0; c < width; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < width; ++c) o[c] /= z;
  }
  return Tensor::make_result(t.shape(), std::move(out), {t}, [rows, width](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * width;
      const double* gy = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < width; ++c) g[r * width + c] += y[c] * (gy[c] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("log_softmax: needs at least one axis");
  const std::size_t width = t.shape().back();
  const std::size_t rows = t.size() / width;
  const auto& x = t.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t c = 0; c < width; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < width; ++c) o[c] = in[c] - lse;
  }
  return Tensor::make_result(t.shape(), std::move(out), {t}, [rows, width](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * width;
      const double* gy = self.grad.data() + r * width;
      double total = 0.0;
      for (std::size_t c = 0; c < width; ++c) total += gy[c];
      for (std::size_t c = 0; c < width; ++c) g[r * width + c] += gy[c] - std::exp(y[c]) * total;
    }
  });
}

// ---- structural ----

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size()) throw ShapeError("reshape", t.shape(), shape);
  return Tensor::make_result(std::move(shape), t.values(), {t}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, long axis_in) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts.front().rank();
  const std::size_t axis = detail::normalize_axis(axis_in, rank, "concat");
  Shape out_shape = parts.front().shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != rank) throw ShapeError("concat", parts.front().shape(), p.shape());
    probe[axis] = parts.front().dim(axis);
    if (probe != parts.front().shape()) throw ShapeError("concat", parts.front().shape(), p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_axis(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.dim(axis);
    const auto& x = p.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(x.data() + o * ext * split.inner, ext * split.inner,
                  out.data() + (o * split.extent + offset) * split.inner);
    offset += ext;
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), parts, [split, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      detail::Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      const std::size_t ext = p.data.size() / (split.outer * split.inner);
      for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < ext * split.inner; ++i)
          g[o * ext * split.inner + i] += self.grad[(o * split.extent + offsets[k]) * split.inner + i];
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& t, long axis_in, std::size_t begin, std::size_t end) {
  const std::size_t axis = detail::normalize_axis(axis_in, t.rank(), "slice");
  if (begin > end || end > t.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                     to_string(t.shape()));
  }
  const auto split = detail::split_axis(t.shape(), axis);
  Shape out_shape = t.shape();
  out_shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  std::vector<double> out(split.outer * ext * split.inner);
  const auto& x = t.values();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(x.data() + (o * split.extent + begin) * split.inner, ext * split.inner,
                out.data() + o * ext * split.inner);
  return Tensor::make_result(std::move(out_shape), std::move(out), {t}, [split, begin, ext](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t i = 0; i < ext * split.inner; ++i)
        g[(o * split.extent + begin) * split.inner + i] += self.grad[o * ext * split.inner + i];
  });
}

}  // namespace eavae::ndgrad
