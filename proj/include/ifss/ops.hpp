#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ifss/autograd.hpp"
#include "ifss/error.hpp"
#include "ifss/tensor.hpp"

// Forward ops with reverse-mode closures. Conventions:
//   - images/feature maps are [H,W,C] row-major, conv kernels [kh,kw,Cin,Cout]
//   - reductions and dot products accumulate in double and round once, in a
//     fixed order, so float32 results stay within 1e-6 of a double oracle
//     while remaining bit-deterministic
//   - masks and labels enter as plain tensors, not graph nodes

namespace ifss::ops {

inline constexpr double kCosineEps = 1e-8;

namespace detail {

using ifss::detail::acc_grad;

template <typename T, class F>
Node<T>* ew_unary(Graph<T>& g, const char* name, Node<T>* x, F f,
                  std::function<double(double, double)> df) {
  auto recompute = [f](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != xv.size()) self.value = Tensor<T>(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) {
      self.value[i] = static_cast<T>(f(static_cast<double>(xv[i])));
    }
  };
  auto backward = [df](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = acc_grad(p);
    const auto& xv = p->value;
    for (size_t i = 0; i < xv.size(); ++i) {
      pg[i] += static_cast<T>(static_cast<double>(self.grad[i]) *
                              df(static_cast<double>(xv[i]), static_cast<double>(self.value[i])));
    }
  };
  return g.make(name, {x}, recompute, backward);
}

}  // namespace detail

template <typename T>
Node<T>* relu(Graph<T>& g, Node<T>* x) {
  auto recompute = [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != xv.size()) self.value = Tensor<T>(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) self.value[i] = xv[i] > T{0} ? xv[i] : T{0};
  };
  auto backward = [](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    const auto& xv = p->value;
    for (size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > T{0}) pg[i] += self.grad[i];
    }
  };
  return g.make("relu", {x}, recompute, backward);
}

template <typename T>
Node<T>* log(Graph<T>& g, Node<T>* x) {
  return detail::ew_unary(
      g, "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

template <typename T>
Node<T>* neg(Graph<T>& g, Node<T>* x) {
  return detail::ew_unary(
      g, "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

template <typename T>
Node<T>* scale(Graph<T>& g, Node<T>* x, double k) {
  return detail::ew_unary(
      g, "scale", x, [k](double v) { return k * v; }, [k](double, double) { return k; });
}

template <typename T>
Node<T>* add_const(Graph<T>& g, Node<T>* x, double c) {
  return detail::ew_unary(
      g, "add-const", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

namespace detail {

template <typename T>
Node<T>* ew_binary(Graph<T>& g, const char* name, Node<T>* a, Node<T>* b,
                   std::function<double(double, double)> f,
                   std::function<double(double, double)> dfa,
                   std::function<double(double, double)> dfb) {
  require_same_shape(a->value, b->value, name);
  auto recompute = [f](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.value.size() != av.size()) self.value = Tensor<T>(av.shape());
    for (size_t i = 0; i < av.size(); ++i) {
      self.value[i] = static_cast<T>(f(static_cast<double>(av[i]), static_cast<double>(bv[i])));
    }
  };
  auto backward = [dfa, dfb](Node<T>& self) {
    Node<T>* pa = self.parents[0];
    Node<T>* pb = self.parents[1];
    const auto& av = pa->value;
    const auto& bv = pb->value;
    if (pa->requires_grad) {
      auto& ga = acc_grad(pa);
      for (size_t i = 0; i < av.size(); ++i) {
        ga[i] += static_cast<T>(static_cast<double>(self.grad[i]) *
                                dfa(static_cast<double>(av[i]), static_cast<double>(bv[i])));
      }
    }
    if (pb->requires_grad) {
      auto& gb = acc_grad(pb);
      for (size_t i = 0; i < av.size(); ++i) {
        gb[i] += static_cast<T>(static_cast<double>(self.grad[i]) *
                                dfb(static_cast<double>(av[i]), static_cast<double>(bv[i])));
      }
    }
  };
  return g.make(name, {a, b}, recompute, backward);
}

}  // namespace detail

template <typename T>
Node<T>* add(Graph<T>& g, Node<T>* a, Node<T>* b) {
  return detail::ew_binary(
      g, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

template <typename T>
Node<T>* sub(Graph<T>& g, Node<T>* a, Node<T>* b) {
  return detail::ew_binary(
      g, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

template <typename T>
Node<T>* mul(Graph<T>& g, Node<T>* a, Node<T>* b) {
  return detail::ew_binary(
      g, "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

template <typename T>
Node<T>* div(Graph<T>& g, Node<T>* a, Node<T>* b) {
  return detail::ew_binary(
      g, "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

template <typename T>
Node<T>* sum(Graph<T>& g, Node<T>* x) {
  auto recompute = [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != 1) self.value = Tensor<T>(std::vector<int>{});
    double acc = 0.0;
    for (size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
    self.value[0] = static_cast<T>(acc);
  };
  auto backward = [](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    T go = self.grad[0];
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += go;
  };
  return g.make("sum", {x}, recompute, backward);
}

template <typename T>
Node<T>* mean(Graph<T>& g, Node<T>* x) {
  const double inv_n = 1.0 / static_cast<double>(x->value.size());
  auto recompute = [inv_n](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != 1) self.value = Tensor<T>(std::vector<int>{});
    double acc = 0.0;
    for (size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
    self.value[0] = static_cast<T>(acc * inv_n);
  };
  auto backward = [inv_n](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    T go = static_cast<T>(static_cast<double>(self.grad[0]) * inv_n);
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += go;
  };
  return g.make("mean", {x}, recompute, backward);
}

template <typename T>
Node<T>* reshape(Graph<T>& g, Node<T>* x, std::vector<int> shape) {
  if (shape_numel(shape) != x->value.size()) {
    throw Error::data("shape-mismatch: reshape from " + shape_str(x->value.shape()) + " to " +
                      shape_str(shape) + " changes element count");
  }
  auto recompute = [shape](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    self.value = Tensor<T>(shape, xv.vec());
  };
  auto backward = [](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
  };
  return g.make("reshape", {x}, recompute, backward);
}

// Stacks nodes along a new/existing leading row dimension. Parts must be [D]
// (treated as one row) or [R,D] with one shared D.
template <typename T>
Node<T>* concat_rows(Graph<T>& g, const std::vector<Node<T>*>& parts) {
  if (parts.empty()) throw Error::data("shape-mismatch: concat of zero parts");
  auto cols_of = [](const Tensor<T>& t) -> int {
    if (t.rank() == 1) return t.extent(0);
    if (t.rank() == 2) return t.extent(1);
    throw Error::data("shape-mismatch: concat expects rank-1 or rank-2 parts, got " +
                      shape_str(t.shape()));
  };
  auto rows_of = [](const Tensor<T>& t) -> int { return t.rank() == 1 ? 1 : t.extent(0); };
  const int d = cols_of(parts[0]->value);
  int total_rows = 0;
  for (Node<T>* p : parts) {
    if (cols_of(p->value) != d) {
      throw Error::data("shape-mismatch: concat parts disagree on width, got " +
                        shape_str(parts[0]->value.shape()) + " and " + shape_str(p->value.shape()));
    }
    total_rows += rows_of(p->value);
  }
  auto recompute = [total_rows, d, rows_of](Node<T>& self) {
    if (self.value.extent(0) != total_rows || self.value.rank() != 2) {
      self.value = Tensor<T>({total_rows, d});
    }
    int r = 0;
    for (Node<T>* p : self.parents) {
      const auto& pv = p->value;
      std::copy(pv.data(), pv.data() + pv.size(), self.value.data() + static_cast<size_t>(r) * d);
      r += rows_of(pv);
    }
  };
  auto backward = [d, rows_of](Node<T>& self) {
    int r = 0;
    for (Node<T>* p : self.parents) {
      const int rows = rows_of(p->value);
      if (p->requires_grad) {
        auto& pg = detail::acc_grad(p);
        const T* src = self.grad.data() + static_cast<size_t>(r) * d;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += src[i];
      }
      r += rows;
    }
  };
  return g.make("concat", std::vector<Node<T>*>(parts), recompute, backward);
}

// 2-D convolution over [H,W,Cin] with kernel [kh,kw,Cin,Cout], zero "same"
// padding (p = k/2) and stride 1 or 2; out = floor((H + 2p - k)/s) + 1.
template <typename T>
Node<T>* conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* b, int stride = 1) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 4 || b->value.rank() != 1) {
    throw Error::data("shape-mismatch: conv2d expects input [H,W,Cin], kernel [kh,kw,Cin,Cout], "
                      "bias [Cout], got " + shape_str(xs) + ", " + shape_str(ws) + ", " +
                      shape_str(b->value.shape()));
  }
  if (ws[2] != xs[2] || b->value.extent(0) != ws[3]) {
    throw Error::data("shape-mismatch: conv2d channel disagreement between input " +
                      shape_str(xs) + " and kernel " + shape_str(ws));
  }
  if (stride < 1 || stride > 2) {
    throw Error::data("conv2d stride must be 1 or 2, got " + std::to_string(stride));
  }
  const int H = xs[0], W = xs[1], Ci = xs[2];
  const int kh = ws[0], kw = ws[1], Co = ws[3];
  const int ph = kh / 2, pw = kw / 2;
  const int Ho = (H + 2 * ph - kh) / stride + 1;
  const int Wo = (W + 2 * pw - kw) / stride + 1;

  auto recompute = [=](Node<T>& self) {
    const Tensor<T>& xv = self.parents[0]->value;
    const Tensor<T>& wv = self.parents[1]->value;
    const Tensor<T>& bv = self.parents[2]->value;
    if (self.value.rank() != 3 || self.value.extent(0) != Ho) self.value = Tensor<T>({Ho, Wo, Co});
    std::vector<double> acc(static_cast<size_t>(Co));
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        for (int co = 0; co < Co; ++co) acc[co] = static_cast<double>(bv[co]);
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - ph;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pw;
            if (ix < 0 || ix >= W) continue;
            const T* xrow = &xv.at(iy, ix, 0);
            const T* wrow = &wv.at(ky, kx, 0, 0);
            for (int ci = 0; ci < Ci; ++ci) {
              const double xvv = static_cast<double>(xrow[ci]);
              const T* wr = wrow + static_cast<size_t>(ci) * Co;
              for (int co = 0; co < Co; ++co) acc[co] += xvv * static_cast<double>(wr[co]);
            }
          }
        }
        T* orow = &self.value.at(oy, ox, 0);
        for (int co = 0; co < Co; ++co) orow[co] = static_cast<T>(acc[co]);
      }
    }
  };

  auto backward = [=](Node<T>& self) {
    Node<T>* px = self.parents[0];
    Node<T>* pw_ = self.parents[1];
    Node<T>* pb = self.parents[2];
    const Tensor<T>& xv = px->value;
    const Tensor<T>& wv = pw_->value;
    const bool need_dx = px->requires_grad;
    const bool need_dw = pw_->requires_grad;
    const bool need_db = pb->requires_grad;
    std::vector<double> dx(need_dx ? xv.size() : 0, 0.0);
    std::vector<double> dw(need_dw ? wv.size() : 0, 0.0);
    std::vector<double> db(need_db ? static_cast<size_t>(Co) : 0, 0.0);
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        const T* gr = &self.grad.at(oy, ox, 0);
        if (need_db) {
          for (int co = 0; co < Co; ++co) db[co] += static_cast<double>(gr[co]);
        }
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - ph;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pw;
            if (ix < 0 || ix >= W) continue;
            for (int ci = 0; ci < Ci; ++ci) {
              const size_t wbase = ((static_cast<size_t>(ky) * kw + kx) * Ci + ci) * Co;
              if (need_dw) {
                const double xvv = static_cast<double>(xv.at(iy, ix, ci));
                double* dwr = dw.data() + wbase;
                for (int co = 0; co < Co; ++co) dwr[co] += xvv * static_cast<double>(gr[co]);
              }
              if (need_dx) {
                const T* wr = wv.data() + wbase;
                double a = 0.0;
                for (int co = 0; co < Co; ++co) {
                  a += static_cast<double>(wr[co]) * static_cast<double>(gr[co]);
                }
                dx[(static_cast<size_t>(iy) * W + ix) * Ci + ci] += a;
              }
            }
          }
        }
      }
    }
    if (need_dx) {
      auto& gx = detail::acc_grad(px);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(dx[i]);
    }
    if (need_dw) {
      auto& gw = detail::acc_grad(pw_);
      for (size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
    }
    if (need_db) {
      auto& gb = detail::acc_grad(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
    }
  };

  return g.make("conv2d", {x, w, b}, recompute, backward);
}

// y[..., o] = sum_i x[..., i] * w[i, o] + b[o]; leading dims are batch.
template <typename T>
Node<T>* linear(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (ws.size() != 2 || b->value.rank() != 1 || xs.empty()) {
    throw Error::data("shape-mismatch: linear expects x [...,Din], w [Din,Dout], b [Dout], got " +
                      shape_str(xs) + ", " + shape_str(ws) + ", " + shape_str(b->value.shape()));
  }
  const int Di = ws[0], Do = ws[1];
  if (xs.back() != Di || b->value.extent(0) != Do) {
    throw Error::data("shape-mismatch: linear input " + shape_str(xs) + " vs weights " +
                      shape_str(ws));
  }
  std::vector<int> out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(Do);
  const size_t rows = x->value.size() / static_cast<size_t>(Di);

  auto recompute = [=](Node<T>& self) {
    const Tensor<T>& xv = self.parents[0]->value;
    const Tensor<T>& wv = self.parents[1]->value;
    const Tensor<T>& bv = self.parents[2]->value;
    if (self.value.size() != rows * static_cast<size_t>(Do)) self.value = Tensor<T>(out_shape);
    std::vector<double> acc(static_cast<size_t>(Do));
    for (size_t m = 0; m < rows; ++m) {
      const T* xr = xv.data() + m * Di;
      for (int o = 0; o < Do; ++o) acc[o] = static_cast<double>(bv[o]);
      for (int i = 0; i < Di; ++i) {
        const double xi = static_cast<double>(xr[i]);
        const T* wr = wv.data() + static_cast<size_t>(i) * Do;
        for (int o = 0; o < Do; ++o) acc[o] += xi * static_cast<double>(wr[o]);
      }
      T* yr = self.value.data() + m * Do;
      for (int o = 0; o < Do; ++o) yr[o] = static_cast<T>(acc[o]);
    }
  };

  auto backward = [=](Node<T>& self) {
    Node<T>* px = self.parents[0];
    Node<T>* pw = self.parents[1];
    Node<T>* pb = self.parents[2];
    const Tensor<T>& xv = px->value;
    const Tensor<T>& wv = pw->value;
    const bool need_dx = px->requires_grad;
    const bool need_dw = pw->requires_grad;
    const bool need_db = pb->requires_grad;
    std::vector<double> dw(need_dw ? wv.size() : 0, 0.0);
    std::vector<double> db(need_db ? static_cast<size_t>(Do) : 0, 0.0);
    std::vector<double> dx(need_dx ? xv.size() : 0, 0.0);
    for (size_t m = 0; m < rows; ++m) {
      const T* gr = self.grad.data() + m * Do;
      const T* xr = xv.data() + m * Di;
      if (need_db) {
        for (int o = 0; o < Do; ++o) db[o] += static_cast<double>(gr[o]);
      }
      for (int i = 0; i < Di; ++i) {
        if (need_dw) {
          const double xi = static_cast<double>(xr[i]);
          double* dwr = dw.data() + static_cast<size_t>(i) * Do;
          for (int o = 0; o < Do; ++o) dwr[o] += xi * static_cast<double>(gr[o]);
        }
        if (need_dx) {
          const T* wr = wv.data() + static_cast<size_t>(i) * Do;
          double a = 0.0;
          for (int o = 0; o < Do; ++o) a += static_cast<double>(wr[o]) * static_cast<double>(gr[o]);
          dx[m * Di + i] += a;
        }
      }
    }
    if (need_dx) {
      auto& gx = detail::acc_grad(px);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(dx[i]);
    }
    if (need_dw) {
      auto& gw = detail::acc_grad(pw);
      for (size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
    }
    if (need_db) {
      auto& gb = detail::acc_grad(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
    }
  };

  return g.make("linear", {x, w, b}, recompute, backward);
}

namespace detail {

// Shared pooling kernel: weighted channel means over the spatial grid with a
// fixed h,w,c summation order so an all-ones mask reproduces mean-pool bit
// for bit.
template <typename T>
void pool_forward(const Tensor<T>& x, const T* mask, Tensor<T>& out, double norm) {
  const int H = x.extent(0), W = x.extent(1), C = x.extent(2);
  std::vector<double> acc(static_cast<size_t>(C), 0.0);
  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      const double m = mask ? static_cast<double>(mask[static_cast<size_t>(y) * W + xx]) : 1.0;
      if (m == 0.0) continue;
      const T* row = &x.at(y, xx, 0);
      for (int c = 0; c < C; ++c) acc[c] += m * static_cast<double>(row[c]);
    }
  }
  for (int c = 0; c < C; ++c) out[c] = static_cast<T>(acc[c] / norm);
}

}  // namespace detail

template <typename T>
Node<T>* mean_pool(Graph<T>& g, Node<T>* x) {
  if (x->value.rank() != 3) {
    throw Error::data("shape-mismatch: mean-pool expects [H,W,C], got " +
                      shape_str(x->value.shape()));
  }
  const int H = x->value.extent(0), W = x->value.extent(1), C = x->value.extent(2);
  const double norm = static_cast<double>(H) * static_cast<double>(W);
  auto recompute = [C, norm](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != static_cast<size_t>(C)) self.value = Tensor<T>({C});
    detail::pool_forward(xv, static_cast<const T*>(nullptr), self.value, norm);
  };
  auto backward = [H, W, C, norm](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) {
        T* row = &pg.at(y, xx, 0);
        for (int c = 0; c < C; ++c) {
          row[c] += static_cast<T>(static_cast<double>(self.grad[c]) / norm);
        }
      }
    }
  };
  return g.make("mean-pool", {x}, recompute, backward);
}

// Masked average pool (the per-shot term of the prototype average): channel
// means weighted by a constant spatial mask.
template <typename T>
Node<T>* masked_average_pool(Graph<T>& g, Node<T>* x, const Tensor<T>& mask) {
  if (x->value.rank() != 3 || mask.rank() != 2 || mask.extent(0) != x->value.extent(0) ||
      mask.extent(1) != x->value.extent(1)) {
    throw Error::data("shape-mismatch: masked-average-pool expects features [H,W,C] with mask "
                      "[H,W], got " + shape_str(x->value.shape()) + " and " +
                      shape_str(mask.shape()));
  }
  const int H = x->value.extent(0), W = x->value.extent(1), C = x->value.extent(2);
  double msum = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) msum += static_cast<double>(mask[i]);
  if (msum == 0.0) {
    throw Error::data("empty-mask: masked-average-pool over an all-zero mask");
  }
  auto mask_copy = mask;  // captured by value; masks are small
  auto recompute = [C, msum, mask_copy](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != static_cast<size_t>(C)) self.value = Tensor<T>({C});
    detail::pool_forward(xv, mask_copy.data(), self.value, msum);
  };
  auto backward = [H, W, C, msum, mask_copy](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) {
        const double m = static_cast<double>(mask_copy.at(y, xx));
        if (m == 0.0) continue;
        T* row = &pg.at(y, xx, 0);
        for (int c = 0; c < C; ++c) {
          row[c] += static_cast<T>(m / msum * static_cast<double>(self.grad[c]));
        }
      }
    }
  };
  return g.make("masked-average-pool", {x}, recompute, backward);
}

// Softmax along one axis, max-subtracted.
template <typename T>
Node<T>* softmax(Graph<T>& g, Node<T>* x, int axis) {
  const auto& xs = x->value.shape();
  if (axis < 0 || axis >= static_cast<int>(xs.size())) {
    throw Error::data("shape-mismatch: softmax axis " + std::to_string(axis) +
                      " out of range for " + shape_str(xs));
  }
  const int N = xs[static_cast<size_t>(axis)];
  size_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < xs.size(); ++i) {
    inner *= static_cast<size_t>(xs[i]);
  }
  const size_t outer = x->value.size() / (static_cast<size_t>(N) * inner);

  auto recompute = [N, inner, outer](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    if (self.value.size() != xv.size()) self.value = Tensor<T>(xv.shape());
    std::vector<double> e(static_cast<size_t>(N));
    for (size_t o = 0; o < outer; ++o) {
      for (size_t in = 0; in < inner; ++in) {
        const size_t base = o * N * inner + in;
        double mx = -1e300;
        for (int j = 0; j < N; ++j) {
          mx = std::max(mx, static_cast<double>(xv[base + static_cast<size_t>(j) * inner]));
        }
        double z = 0.0;
        for (int j = 0; j < N; ++j) {
          e[j] = std::exp(static_cast<double>(xv[base + static_cast<size_t>(j) * inner]) - mx);
          z += e[j];
        }
        for (int j = 0; j < N; ++j) {
          self.value[base + static_cast<size_t>(j) * inner] = static_cast<T>(e[j] / z);
        }
      }
    }
  };

  auto backward = [N, inner, outer](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    for (size_t o = 0; o < outer; ++o) {
      for (size_t in = 0; in < inner; ++in) {
        const size_t base = o * N * inner + in;
        double dot = 0.0;
        for (int j = 0; j < N; ++j) {
          const size_t k = base + static_cast<size_t>(j) * inner;
          dot += static_cast<double>(self.grad[k]) * static_cast<double>(self.value[k]);
        }
        for (int j = 0; j < N; ++j) {
          const size_t k = base + static_cast<size_t>(j) * inner;
          pg[k] += static_cast<T>(static_cast<double>(self.value[k]) *
                                  (static_cast<double>(self.grad[k]) - dot));
        }
      }
    }
  };

  return g.make("softmax", {x}, recompute, backward);
}

namespace detail {

inline double guarded_inv(double n) { return n > 0.0 ? 1.0 / n : 0.0; }

// cos(a,b) with eps added to each norm; eps is a constant for the gradient.
struct CosParts {
  double cos, na, nb, inv_den;
};

template <typename T>
CosParts cosine_forward(const T* a, const T* b, int d) {
  double dot = 0.0, qa = 0.0, qb = 0.0;
  for (int i = 0; i < d; ++i) {
    const double ai = static_cast<double>(a[i]);
    const double bi = static_cast<double>(b[i]);
    dot += ai * bi;
    qa += ai * ai;
    qb += bi * bi;
  }
  CosParts p;
  p.na = std::sqrt(qa);
  p.nb = std::sqrt(qb);
  p.inv_den = 1.0 / ((p.na + kCosineEps) * (p.nb + kCosineEps));
  p.cos = dot * p.inv_den;
  return p;
}

// d cos / d a_i = b_i / den - cos * a_i / (na * (na + eps)); symmetric in b.
template <typename T>
void cosine_backward(const T* a, const T* b, int d, const CosParts& p, double go, double* da,
                     double* db) {
  const double ca = p.cos * guarded_inv(p.na) / (p.na + kCosineEps);
  const double cb = p.cos * guarded_inv(p.nb) / (p.nb + kCosineEps);
  for (int i = 0; i < d; ++i) {
    const double ai = static_cast<double>(a[i]);
    const double bi = static_cast<double>(b[i]);
    if (da) da[i] += go * (bi * p.inv_den - ca * ai);
    if (db) db[i] += go * (ai * p.inv_den - cb * bi);
  }
}

}  // namespace detail

// Row-by-row cosine map: a [M,D] x b [N,D] -> [M,N].
template <typename T>
Node<T>* cosine_matrix(Graph<T>& g, Node<T>* a, Node<T>* b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    throw Error::data("shape-mismatch: cosine-similarity matrix expects [M,D] and [N,D], got " +
                      shape_str(as) + " and " + shape_str(bs));
  }
  const int M = as[0], N = bs[0], D = as[1];
  auto recompute = [=](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.value.rank() != 2 || self.value.extent(0) != M) self.value = Tensor<T>({M, N});
    for (int i = 0; i < M; ++i) {
      const T* ar = av.data() + static_cast<size_t>(i) * D;
      for (int j = 0; j < N; ++j) {
        const T* br = bv.data() + static_cast<size_t>(j) * D;
        self.value.at(i, j) = static_cast<T>(detail::cosine_forward(ar, br, D).cos);
      }
    }
  };
  auto backward = [=](Node<T>& self) {
    Node<T>* pa = self.parents[0];
    Node<T>* pb = self.parents[1];
    const auto& av = pa->value;
    const auto& bv = pb->value;
    const bool need_da = pa->requires_grad;
    const bool need_db = pb->requires_grad;
    std::vector<double> da(need_da ? av.size() : 0, 0.0);
    std::vector<double> db(need_db ? bv.size() : 0, 0.0);
    for (int i = 0; i < M; ++i) {
      const T* ar = av.data() + static_cast<size_t>(i) * D;
      for (int j = 0; j < N; ++j) {
        const T* br = bv.data() + static_cast<size_t>(j) * D;
        const double go = static_cast<double>(self.grad.at(i, j));
        if (go == 0.0) continue;
        const auto parts = detail::cosine_forward(ar, br, D);
        detail::cosine_backward(ar, br, D, parts, go,
                                need_da ? da.data() + static_cast<size_t>(i) * D : nullptr,
                                need_db ? db.data() + static_cast<size_t>(j) * D : nullptr);
      }
    }
    if (need_da) {
      auto& ga = detail::acc_grad(pa);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(da[i]);
    }
    if (need_db) {
      auto& gb = detail::acc_grad(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
    }
  };
  return g.make("cosine-similarity", {a, b}, recompute, backward);
}

// Paired rows: a [N,D], b [N,D] -> [N] with out[i] = cos(a_i, b_i).
template <typename T>
Node<T>* cosine_pairs(Graph<T>& g, Node<T>* a, Node<T>* b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  if (as.size() != 2 || bs.size() != 2 || as != bs) {
    throw Error::data("shape-mismatch: paired cosine expects equal [N,D] shapes, got " +
                      shape_str(as) + " and " + shape_str(bs));
  }
  const int N = as[0], D = as[1];
  auto recompute = [=](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.value.rank() != 1 || self.value.extent(0) != N) self.value = Tensor<T>({N});
    for (int i = 0; i < N; ++i) {
      self.value[static_cast<size_t>(i)] =
          static_cast<T>(detail::cosine_forward(av.data() + static_cast<size_t>(i) * D,
                                                bv.data() + static_cast<size_t>(i) * D, D)
                             .cos);
    }
  };
  auto backward = [=](Node<T>& self) {
    Node<T>* pa = self.parents[0];
    Node<T>* pb = self.parents[1];
    const auto& av = pa->value;
    const auto& bv = pb->value;
    const bool need_da = pa->requires_grad;
    const bool need_db = pb->requires_grad;
    std::vector<double> da(need_da ? av.size() : 0, 0.0);
    std::vector<double> db(need_db ? bv.size() : 0, 0.0);
    for (int i = 0; i < N; ++i) {
      const T* ar = av.data() + static_cast<size_t>(i) * D;
      const T* br = bv.data() + static_cast<size_t>(i) * D;
      const double go = static_cast<double>(self.grad[static_cast<size_t>(i)]);
      if (go == 0.0) continue;
      const auto parts = detail::cosine_forward(ar, br, D);
      detail::cosine_backward(ar, br, D, parts, go,
                              need_da ? da.data() + static_cast<size_t>(i) * D : nullptr,
                              need_db ? db.data() + static_cast<size_t>(i) * D : nullptr);
    }
    if (need_da) {
      auto& ga = detail::acc_grad(pa);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(da[i]);
    }
    if (need_db) {
      auto& gb = detail::acc_grad(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
    }
  };
  return g.make("cosine-similarity", {a, b}, recompute, backward);
}

// Scalar cosine between two vectors.
template <typename T>
Node<T>* cosine_similarity(Graph<T>& g, Node<T>* a, Node<T>* b) {
  if (a->value.rank() != 1 || b->value.rank() != 1 ||
      a->value.extent(0) != b->value.extent(0)) {
    throw Error::data("shape-mismatch: cosine-similarity expects two equal-length vectors, got " +
                      shape_str(a->value.shape()) + " and " + shape_str(b->value.shape()));
  }
  const int D = a->value.extent(0);
  auto a2 = reshape(g, a, {1, D});
  auto b2 = reshape(g, b, {1, D});
  auto m = cosine_pairs(g, a2, b2);
  return reshape(g, m, {});
}

// Gathers per-pixel probabilities of the labelled class from a score map
// [H,W,N]; idx holds classifier column indices with -1 marking ignored
// pixels. Output is [M] over non-ignored pixels in row-major order.
template <typename T>
Node<T>* select_labels(Graph<T>& g, Node<T>* scores, const Tensor<int>& idx) {
  const auto& ss = scores->value.shape();
  if (ss.size() != 3 || idx.rank() != 2 || idx.extent(0) != ss[0] || idx.extent(1) != ss[1]) {
    throw Error::data("shape-mismatch: select_labels expects scores [H,W,N] with index [H,W], "
                      "got " + shape_str(ss) + " and " + shape_str(idx.shape()));
  }
  const int H = ss[0], W = ss[1], N = ss[2];
  std::vector<int> flat;
  flat.reserve(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    const int c = idx[i];
    if (c < 0) continue;
    if (c >= N) {
      throw Error::data("unknown-label: class index " + std::to_string(c) +
                        " outside classifier of size " + std::to_string(N));
    }
    flat.push_back(static_cast<int>(i) * N + c);
  }
  if (flat.empty()) {
    throw Error::data("empty-target: every pixel is ignored");
  }
  const int M = static_cast<int>(flat.size());
  auto recompute = [M, flat](Node<T>& self) {
    const auto& sv = self.parents[0]->value;
    if (self.value.rank() != 1 || self.value.extent(0) != M) self.value = Tensor<T>({M});
    for (int m = 0; m < M; ++m) self.value[static_cast<size_t>(m)] = sv[static_cast<size_t>(flat[m])];
  };
  auto backward = [flat](Node<T>& self) {
    Node<T>* p = self.parents[0];
    if (!p->requires_grad) return;
    auto& pg = detail::acc_grad(p);
    for (size_t m = 0; m < flat.size(); ++m) {
      pg[static_cast<size_t>(flat[m])] += self.grad[m];
    }
  };
  (void)H;
  (void)W;
  return g.make("select-labels", {scores}, recompute, backward);
}

}  // namespace ifss::ops
