#pragma once

// Tape-based reverse-mode differentiation over ValueGrid.
//
// Every primitive evaluates eagerly, appends one node to the tape and
// registers a backward closure. `Tape::backward` walks the nodes in reverse
// creation order, so each recorded operation is visited at most once.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"

namespace dseg {

// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before every log.
inline constexpr double kProbClamp = 1e-7;

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  inline const ValueGrid& value() const;
  inline const ValueGrid& grad() const;
  inline const Shape& shape() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct DualGrid {
  ValueGrid value;
  ValueGrid gradient;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(ValueGrid v) { return push(std::move(v), true, {}); }
  Var constant(ValueGrid v) { return push(std::move(v), false, {}); }

  // Appends the result of a primitive. The node requires a gradient iff any input does.
  Var record(ValueGrid out, std::initializer_list<Var> inputs, Backward bw) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owner(in);
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(out), rg, rg ? std::move(bw) : Backward{});
  }

  const ValueGrid& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient of node `id`; an all-zero grid when nothing has flowed into it.
  const ValueGrid& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = ValueGrid(n.value.shape());
    return n.grad;
  }
  ValueGrid& grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = ValueGrid(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  DualGrid dual(const Var& v) {
    check_owner(v);
    return {value(v.id()), grad(v.id())};
  }

  // Propagates d(loss)/d(node) to every node that requires a gradient.
  void backward(const Var& loss) {
    check_owner(loss);
    if (loss.shape().size() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + loss.shape().str());
    if (backward_done_)
      throw StateError("backward called twice without reset; gradients would accumulate");
    backward_done_ = true;
    order_.clear();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_mut(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      order_.push_back(i);
      n.backward(*this, i);
    }
  }

  // Zeroes all gradients and re-arms backward.
  void reset() {
    for (Node& n : nodes_)
      if (!n.grad.empty()) n.grad.fill(0.0);
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  // Node ids visited by the last backward pass, in visit order.
  const std::vector<std::size_t>& last_backward_order() const { return order_; }

  void check_owner(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw std::invalid_argument("Var does not belong to this tape");
  }

 private:
  struct Node {
    ValueGrid value;
    ValueGrid grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(ValueGrid v, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(v), {}, rg, std::move(bw)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> order_;
  bool backward_done_ = false;
};

inline const ValueGrid& Var::value() const { return tape_->value(id_); }
inline const ValueGrid& Var::grad() const { return tape_->grad(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *a.tape();
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
}

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }
inline bool inside_clamp(double p) { return p > kProbClamp && p < 1.0 - kProbClamp; }

inline double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace detail

// "Same" 2-D convolution (cross-correlation). `kernel` stores the
// Cout x Cin x k x k weights as a (Cout*Cin) x k x k grid; `bias` is Cout x 1 x 1.
inline Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t padding) {
  Tape& t = detail::tape_of(input);
  const Shape in = input.shape();
  const Shape ks = kernel.shape();
  const std::size_t cout = bias.shape().size();
  if (ks.height != ks.width || ks.height % 2 == 0)
    throw ShapeError("conv2d: kernel must be square with odd extent, got " + ks.str());
  if (padding * 2 + 1 != ks.height)
    throw ShapeError("conv2d: padding " + std::to_string(padding) +
                     " does not preserve the spatial size for a " + std::to_string(ks.height) +
                     "-wide kernel");
  if (cout == 0 || ks.channels != cout * in.channels)
    throw ShapeError("conv2d: kernel " + ks.str() + " does not match " +
                     std::to_string(in.channels) + " input channels and " + std::to_string(cout) +
                     " output channels");

  const std::size_t H = in.height, W = in.width, K = ks.height, cin = in.channels;
  const long p = static_cast<long>(padding);
  const ValueGrid& x = input.value();
  const ValueGrid& w = kernel.value();
  const ValueGrid& b = bias.value();

  // Calls fn(co, ci, weight index, dy, dx, y0, y1, x0, x1) for every tap.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const long dy = static_cast<long>(ky) - p, dx = static_cast<long>(kx) - p;
            const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
            const std::size_t y1 = static_cast<std::size_t>(std::min<long>(H, long(H) - dy));
            const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
            const std::size_t x1 = static_cast<std::size_t>(std::min<long>(W, long(W) - dx));
            fn(co, ci, ((co * cin + ci) * K + ky) * K + kx, dy, dx, y0, y1, x0, x1);
          }
  };

  ValueGrid out(cout, H, W);
  for (std::size_t co = 0; co < cout; ++co) {
    auto o = out.channel(co);
    std::fill(o.begin(), o.end(), b[co]);
  }
  for_taps([&](std::size_t co, std::size_t ci, std::size_t wi, long dy, long dx, std::size_t y0,
               std::size_t y1, std::size_t x0, std::size_t x1) {
    const double wv = w[wi];
    const double* src = x.data().data() + ci * H * W;
    double* dst = out.data().data() + co * H * W;
    for (std::size_t y = y0; y < y1; ++y) {
      const double* s = src + (long(y) + dy) * long(W) + dx;
      double* d = dst + y * W;
      for (std::size_t xx = x0; xx < x1; ++xx) d[xx] += wv * s[xx];
    }
  });

  const std::size_t iid = input.id(), kid = kernel.id(), bid = bias.id();
  return t.record(std::move(out), {input, kernel, bias},
                  [=](Tape& tp, std::size_t self) {
                    const ValueGrid& g = tp.grad(self);
                    const double* gd = g.data().data();
                    if (tp.requires_grad(bid)) {
                      ValueGrid& gb = tp.grad_mut(bid);
                      for (std::size_t co = 0; co < cout; ++co) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < H * W; ++i) s += gd[co * H * W + i];
                        gb[co] += s;
                      }
                    }
                    const bool need_k = tp.requires_grad(kid), need_x = tp.requires_grad(iid);
                    if (!need_k && !need_x) return;
                    const double* xv = tp.value(iid).data().data();
                    const double* wv = tp.value(kid).data().data();
                    double* gx = need_x ? tp.grad_mut(iid).data().data() : nullptr;
                    double* gk = need_k ? tp.grad_mut(kid).data().data() : nullptr;
                    for_taps([&](std::size_t co, std::size_t ci, std::size_t wi, long dy, long dx,
                                 std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
                      const double* go = gd + co * H * W;
                      const std::size_t so = ci * H * W;
                      double acc = 0.0;
                      for (std::size_t y = y0; y < y1; ++y) {
                        const long row = (long(y) + dy) * long(W) + dx;
                        const double* gr = go + y * W;
                        if (need_k) {
                          const double* s = xv + so + row;
                          for (std::size_t xx = x0; xx < x1; ++xx) acc += gr[xx] * s[xx];
                        }
                        if (need_x) {
                          double* d = gx + so + row;
                          const double wgt = wv[wi];
                          for (std::size_t xx = x0; xx < x1; ++xx) d[xx] += wgt * gr[xx];
                        }
                      }
                      if (need_k) gk[wi] += acc;
                    });
                  });
}

namespace detail {

// Elementwise unary primitive: out = f(x), dx += g * df(x, out).
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Tape& t = tape_of(a);
  const ValueGrid& x = a.value();
  ValueGrid out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    const ValueGrid& xv = tp.value(aid);
    const ValueGrid& ov = tp.value(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], ov[i]);
  });
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double v) { return detail::stable_sigmoid(v); },
      [](double, double s) { return s * (1.0 - s); });
}

// log(clamp(p)); the gradient is zero where the clamp is active.
inline Var log_clamped(const Var& a) {
  return detail::unary(
      a, [](double v) { return std::log(detail::clamp_prob(v)); },
      [](double v, double) { return detail::inside_clamp(v) ? 1.0 / v : 0.0; });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(
      a, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(
      a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

// Softmax across channels at every pixel, without recording.
inline ValueGrid softmax_values(const ValueGrid& x) {
  const std::size_t C = x.channels(), P = x.plane();
  if (C == 0) throw ShapeError("channel_softmax: needs at least one channel");
  ValueGrid out(x.shape());
  for (std::size_t i = 0; i < P; ++i) {
    double m = x[i];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, x[c * P + i]);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double e = std::exp(x[c * P + i] - m);
      out[c * P + i] = e;
      s += e;
    }
    for (std::size_t c = 0; c < C; ++c) out[c * P + i] /= s;
  }
  return out;
}

inline Var channel_softmax(const Var& a) {
  Tape& t = detail::tape_of(a);
  ValueGrid out = softmax_values(a.value());
  const std::size_t C = out.channels(), P = out.plane();
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    const ValueGrid& p = tp.value(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < P; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[c * P + i] * p[c * P + i];
      for (std::size_t c = 0; c < C; ++c) ga[c * P + i] += p[c * P + i] * (g[c * P + i] - dot);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tape& t = detail::tape_of(a);
  ValueGrid out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(std::move(out), {a, b}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    for (std::size_t id : {aid, bid}) {
      if (!tp.requires_grad(id)) continue;
      ValueGrid& gi = tp.grad_mut(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tape& t = detail::tape_of(a);
  ValueGrid out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(std::move(out), {a, b}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    if (tp.requires_grad(aid)) {
      ValueGrid& ga = tp.grad_mut(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bid)) {
      ValueGrid& gb = tp.grad_mut(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tape& t = detail::tape_of(a);
  ValueGrid out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(std::move(out), {a, b}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    if (tp.requires_grad(aid)) {
      const ValueGrid& bv = tp.value(bid);
      ValueGrid& ga = tp.grad_mut(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bid)) {
      const ValueGrid& av = tp.value(aid);
      ValueGrid& gb = tp.grad_mut(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// Elementwise product with a constant (non-differentiated) grid.
inline Var mul_const(const Var& a, const ValueGrid& w) {
  if (a.shape() != w.shape())
    throw ShapeError("mul_const: shape mismatch " + a.shape().str() + " vs " + w.shape().str());
  Tape& t = detail::tape_of(a);
  ValueGrid out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * w[i];
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [aid, w](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * w[i];
  });
}

inline Var add_const(const Var& a, const ValueGrid& c) {
  if (a.shape() != c.shape())
    throw ShapeError("add_const: shape mismatch " + a.shape().str() + " vs " + c.shape().str());
  Tape& t = detail::tape_of(a);
  ValueGrid out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c[i];
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [aid](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Channels [first, last) as a new grid.
inline Var channel_slice(const Var& a, std::size_t first, std::size_t last) {
  const Shape s = a.shape();
  if (first >= last || last > s.channels)
    throw ShapeError("channel_slice: range [" + std::to_string(first) + "," +
                     std::to_string(last) + ") outside " + s.str());
  Tape& t = detail::tape_of(a);
  const std::size_t P = s.plane();
  ValueGrid out(last - first, s.height, s.width);
  std::copy_n(a.value().data().begin() + first * P, out.size(), out.data().begin());
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[first * P + i] += g[i];
  });
}

// Sum over channels [first, last) -> 1 x H x W.
inline Var channel_sum(const Var& a, std::size_t first, std::size_t last) {
  const Shape s = a.shape();
  if (first >= last || last > s.channels)
    throw ShapeError("channel_sum: range outside " + s.str());
  Tape& t = detail::tape_of(a);
  const std::size_t P = s.plane();
  ValueGrid out(1, s.height, s.width);
  const ValueGrid& x = a.value();
  for (std::size_t c = first; c < last; ++c)
    for (std::size_t i = 0; i < P; ++i) out[i] += x[c * P + i];
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t c = first; c < last; ++c)
      for (std::size_t i = 0; i < P; ++i) ga[c * P + i] += g[i];
  });
}

// Spatial mean of each channel -> C x 1 x 1.
inline Var channel_mean(const Var& a) {
  const Shape s = a.shape();
  Tape& t = detail::tape_of(a);
  const std::size_t P = s.plane();
  ValueGrid out(s.channels, 1, 1);
  const ValueGrid& x = a.value();
  for (std::size_t c = 0; c < s.channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) acc += x[c * P + i];
    out[c] = acc / static_cast<double>(P);
  }
  const std::size_t aid = a.id();
  return t.record(std::move(out), {a}, [=](Tape& tp, std::size_t self) {
    const ValueGrid& g = tp.grad(self);
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t c = 0; c < s.channels; ++c) {
      const double gc = g[c] / static_cast<double>(P);
      for (std::size_t i = 0; i < P; ++i) ga[c * P + i] += gc;
    }
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const std::size_t aid = a.id();
  return t.record(ValueGrid::scalar(acc), {a}, [aid](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    ValueGrid& ga = tp.grad_mut(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.shape().size());
  if (n == 0) throw ShapeError("mean of an empty grid");
  return scale(sum(a), 1.0 / n);
}

// Mean binary cross-entropy between predicted probabilities and a constant target.
inline Var bce_mean(const Var& pred, const ValueGrid& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("bce_mean: shape mismatch " + pred.shape().str() + " vs " +
                     target.shape().str());
  Tape& t = detail::tape_of(pred);
  const ValueGrid& p = pred.value();
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = detail::clamp_prob(p[i]);
    acc -= target[i] * std::log(q) + (1.0 - target[i]) * std::log(1.0 - q);
  }
  const std::size_t pid = pred.id();
  return t.record(ValueGrid::scalar(acc / n), {pred}, [pid, target, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0] / n;
    const ValueGrid& pv = tp.value(pid);
    ValueGrid& gp = tp.grad_mut(pid);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double q = pv[i];
      if (!detail::inside_clamp(q)) continue;
      gp[i] += g * (-target[i] / q + (1.0 - target[i]) / (1.0 - q));
    }
  });
}

// Mean squared difference of two differentiable grids.
inline Var mse_mean(const Var& a, const Var& b) {
  detail::require_same(a, b, "mse_mean");
  Tape& t = detail::tape_of(a);
  const ValueGrid& av = a.value();
  const ValueGrid& bv = b.value();
  const double n = static_cast<double>(av.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  const std::size_t aid = a.id(), bid = b.id();
  return t.record(ValueGrid::scalar(acc / n), {a, b}, [=](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0] * 2.0 / n;
    const ValueGrid& x = tp.value(aid);
    const ValueGrid& y = tp.value(bid);
    if (tp.requires_grad(aid)) {
      ValueGrid& ga = tp.grad_mut(aid);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * (x[i] - y[i]);
    }
    if (tp.requires_grad(bid)) {
      ValueGrid& gb = tp.grad_mut(bid);
      for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= g * (x[i] - y[i]);
    }
  });
}

}  // namespace dseg
