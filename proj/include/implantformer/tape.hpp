#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "implantformer/errors.hpp"
#include "implantformer/tensor.hpp"
#include "implantformer/threads.hpp"

// Reverse-mode automatic differentiation over Tensor<T>, small enough to
// audit: each op appends one node holding its output value plus a closure
// that scatters the output gradient back to its inputs. Node evaluation
// order is fixed, so identical inputs give bit-identical results and the
// thread count never changes a value (threads only split disjoint output
// ranges).
namespace implantformer::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
public:
  // record=false skips closures and gradient storage (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var push(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var v, std::function<void(Tape&)> fn) {
    if (record_) nodes_[v.id].back = std::move(fn);
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }

  // Gradient buffer, allocated to zeros on first touch.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_[v.id].grad.data.empty(); }

  void seed(Var v, const Tensor<T>& g) {
    Tensor<T>& dst = grad(v);
    for (int64_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
  }

  void backward() {
    if (!record_) throw InvalidArgumentError("backward on a non-recording tape");
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && !n.grad.data.empty()) n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  // Fingerprint of every piecewise-linear branch taken (ReLU signs).
  // Finite-difference checks compare it between the two probe points and
  // skip elements whose probes straddle a kink.
  uint64_t region_hash = 0;

private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// ---- accumulating matmul kernels ----------------------------------------

// C(n,m) += A(n,k) * B(k,m)
template <typename T>
void mm_acc_nn(const T* a, const T* b, T* c, int n, int k, int m) {
  parallel_for(n, [=](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      T* crow = c + i * m;
      const T* arow = a + i * k;
      for (int kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = b + static_cast<int64_t>(kk) * m;
        for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C(n,m) += A(n,k) * B(m,k)^T
// B is transposed into scratch first: the inner loop then updates
// independent elements, which vectorizes under strict FP semantics where a
// dot-product reduction cannot. Accumulation order per element is unchanged.
template <typename T>
void mm_acc_nt(const T* a, const T* b, T* c, int n, int k, int m) {
  thread_local std::vector<T> scratch;
  scratch.resize(static_cast<size_t>(k) * m);
  T* bt = scratch.data();
  for (int j = 0; j < m; ++j)
    for (int kk = 0; kk < k; ++kk) bt[static_cast<int64_t>(kk) * m + j] = b[static_cast<int64_t>(j) * k + kk];
  parallel_for(n, [=](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * m;
      for (int kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = bt + static_cast<int64_t>(kk) * m;
        for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C(k,m) += A(n,k)^T * B(n,m)
template <typename T>
void mm_acc_tn(const T* a, const T* b, T* c, int n, int k, int m) {
  parallel_for(k, [=](int64_t lo, int64_t hi) {
    for (int64_t kk = lo; kk < hi; ++kk) {
      T* crow = c + kk * m;
      for (int i = 0; i < n; ++i) {
        const T av = a[static_cast<int64_t>(i) * k + kk];
        const T* brow = b + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// ---- im2col helpers ------------------------------------------------------

// col[(c,ki,kj)][(gy,gx)] = src[c][gy*stride - pad + ki][gx*stride - pad + kj]
template <typename T>
void im2col(const T* src, int ch, int sh, int sw, int kh, int kw, int stride, int pad,
            int gh, int gw, T* col) {
  const int64_t grid = static_cast<int64_t>(gh) * gw;
  for (int c = 0; c < ch; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * grid;
        for (int gy = 0; gy < gh; ++gy) {
          const int sy = gy * stride - pad + ki;
          T* drow = dst + static_cast<int64_t>(gy) * gw;
          if (sy < 0 || sy >= sh) {
            for (int gx = 0; gx < gw; ++gx) drow[gx] = T(0);
            continue;
          }
          const T* srow = src + (static_cast<int64_t>(c) * sh + sy) * sw;
          for (int gx = 0; gx < gw; ++gx) {
            const int sx = gx * stride - pad + kj;
            drow[gx] = (sx < 0 || sx >= sw) ? T(0) : srow[sx];
          }
        }
      }
    }
  }
}

// dst[c][gy*stride - pad + ki][gx*stride - pad + kj] += col[(c,ki,kj)][(gy,gx)]
template <typename T>
void col2im_add(const T* col, int ch, int dh, int dw, int kh, int kw, int stride, int pad,
                int gh, int gw, T* dst) {
  const int64_t grid = static_cast<int64_t>(gh) * gw;
  for (int c = 0; c < ch; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* srcp = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * grid;
        for (int gy = 0; gy < gh; ++gy) {
          const int dy = gy * stride - pad + ki;
          if (dy < 0 || dy >= dh) continue;
          T* drow = dst + (static_cast<int64_t>(c) * dh + dy) * dw;
          const T* srow = srcp + static_cast<int64_t>(gy) * gw;
          for (int gx = 0; gx < gw; ++gx) {
            const int dx = gx * stride - pad + kj;
            if (dx >= 0 && dx < dw) drow[dx] += srow[gx];
          }
        }
      }
    }
  }
}

// ---- elementwise ops -----------------------------------------------------

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  Tensor<T> out = tp.value(a);
  const Tensor<T>& bv = tp.value(b);
  if (!out.same_shape(bv)) throw InvalidArgumentError("add: shape mismatch");
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, b](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] += g.data[i];
    }
  });
  return v;
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T s) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) x *= s;
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, s](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& ga = t.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += s * g.data[i];
  });
  return v;
}

template <typename T>
Var relu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  uint64_t hash = tp.region_hash;
  for (auto& x : out.data) {
    hash = hash * 131 + (x > T(0) ? 1 : 0);
    x = x > T(0) ? x : T(0);
  }
  tp.region_hash = hash;
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& in = t.value(a);
    Tensor<T>& ga = t.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (in.data[i] > T(0)) ga.data[i] += g.data[i];
  });
  return v;
}

template <typename T>
Var gelu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) {
    const T t = x;
    x = T(0.5) * t * (T(1) + std::erf(t * T(0.70710678118654752440)));
  }
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& in = t.value(a);
    Tensor<T>& ga = t.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T x = in.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
      const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
      ga.data[i] += g.data[i] * (cdf + x * pdf);
    }
  });
  return v;
}

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) x = T(1) / (T(1) + std::exp(-x));
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& y = t.value(v);
    Tensor<T>& ga = t.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T s = y.data[i];
      ga.data[i] += g.data[i] * s * (T(1) - s);
    }
  });
  return v;
}

// ---- linear algebra ------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.value(a);
  const Tensor<T>& bv = tp.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw InvalidArgumentError("matmul: incompatible shapes");
  const int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor<T> out({n, m});
  mm_acc_nn(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, b, n, k, m](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& av2 = t.value(a);
    const Tensor<T>& bv2 = t.value(b);
    mm_acc_nt(g.data.data(), bv2.data.data(), t.grad(a).data.data(), n, m, k);
    mm_acc_tn(av2.data.data(), g.data.data(), t.grad(b).data.data(), n, k, m);
  });
  return v;
}

// x (n, d) + bias (d), broadcast over rows.
template <typename T>
Var add_bias_rows(Tape<T>& tp, Var x, Var bias) {
  const Tensor<T>& xv = tp.value(x);
  const Tensor<T>& bv = tp.value(bias);
  if (xv.rank() != 2 || bv.numel() != xv.dim(1))
    throw InvalidArgumentError("add_bias_rows: shape mismatch");
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out = xv;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[static_cast<int64_t>(i) * d + j] += bv.data[j];
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, bias, n, d](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gb = t.grad(bias);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) gb.data[j] += g.data[static_cast<int64_t>(i) * d + j];
  });
  return v;
}

template <typename T>
Var layernorm(Tape<T>& tp, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const Tensor<T>& xv = tp.value(x);
  if (xv.rank() != 2) throw InvalidArgumentError("layernorm expects (rows, dim)");
  const int n = xv.dim(0), d = xv.dim(1);
  const Tensor<T>& gv = tp.value(gamma);
  const Tensor<T>& bv = tp.value(beta);

  Tensor<T> out({n, d});
  Tensor<T> xhat({n, d});
  std::vector<T> rstd(n);
  for (int i = 0; i < n; ++i) {
    const T* row = xv.data.data() + static_cast<int64_t>(i) * d;
    T mean = T(0);
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= T(d);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[i] = r;
    for (int j = 0; j < d; ++j) {
      const T xh = (row[j] - mean) * r;
      xhat(i, j) = xh;
      out(i, j) = gv.data[j] * xh + bv.data[j];
    }
  }
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, gamma, beta, n, d, xhat = std::move(xhat),
                  rstd = std::move(rstd)](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& gv2 = t.value(gamma);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& ggamma = t.grad(gamma);
    Tensor<T>& gbeta = t.grad(beta);
    for (int i = 0; i < n; ++i) {
      const T* grow = g.data.data() + static_cast<int64_t>(i) * d;
      const T* xhrow = xhat.data.data() + static_cast<int64_t>(i) * d;
      T m1 = T(0), m2 = T(0);
      for (int j = 0; j < d; ++j) {
        const T dyg = grow[j] * gv2.data[j];
        m1 += dyg;
        m2 += dyg * xhrow[j];
        ggamma.data[j] += grow[j] * xhrow[j];
        gbeta.data[j] += grow[j];
      }
      m1 /= T(d);
      m2 /= T(d);
      T* gxrow = gx.data.data() + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        const T dyg = grow[j] * gv2.data[j];
        gxrow[j] += rstd[i] * (dyg - m1 - xhrow[j] * m2);
      }
    }
  });
  return v;
}

// Softmax over the last dimension of any rank; rows are independent.
template <typename T>
Var softmax_lastdim(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.value(x);
  const int d = xv.dim(xv.rank() - 1);
  const int64_t rows = xv.numel() / d;
  Tensor<T> out = xv;
  for (int64_t i = 0; i < rows; ++i) {
    T* row = out.data.data() + i * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < d; ++j) row[j] *= inv;
  }
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, d, rows](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& y = t.value(v);
    Tensor<T>& gx = t.grad(x);
    for (int64_t i = 0; i < rows; ++i) {
      const T* grow = g.data.data() + i * d;
      const T* yrow = y.data.data() + i * d;
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += grow[j] * yrow[j];
      T* gxrow = gx.data.data() + i * d;
      for (int j = 0; j < d; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
    }
  });
  return v;
}

// ---- token shuffling -----------------------------------------------------

template <typename T>
Var slice_cols(Tape<T>& tp, Var x, int c0, int c1) {
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), m = xv.dim(1), w = c1 - c0;
  Tensor<T> out({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out(i, j) = xv(i, c0 + j);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, n, m, w, c0](Tape<T>& t) {
    (void)m;
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) gx(i, c0 + j) += g(i, j);
  });
  return v;
}

// (n, heads*dh) -> (heads, n, dh)
template <typename T>
Var split_heads(Tape<T>& tp, Var x, int heads) {
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), d = xv.dim(1), dh = d / heads;
  if (d % heads != 0) throw InvalidArgumentError("split_heads: dim not divisible");
  Tensor<T> out({heads, n, dh});
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dh; ++c) out(h, i, c) = xv(i, h * dh + c);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, heads, n, dh](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < dh; ++c) gx(i, h * dh + c) += g(h, i, c);
  });
  return v;
}

// (heads, n, dh) -> (n, heads*dh)
template <typename T>
Var merge_heads(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.value(x);
  const int heads = xv.dim(0), n = xv.dim(1), dh = xv.dim(2);
  Tensor<T> out({n, heads * dh});
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dh; ++c) out(i, h * dh + c) = xv(h, i, c);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, heads, n, dh](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < dh; ++c) gx(h, i, c) += g(i, h * dh + c);
  });
  return v;
}

// (h, n, k) x (h, k, m) -> (h, n, m)
template <typename T>
Var bmm(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.value(a);
  const Tensor<T>& bv = tp.value(b);
  const int h = av.dim(0), n = av.dim(1), k = av.dim(2), m = bv.dim(2);
  if (bv.dim(0) != h || bv.dim(1) != k) throw InvalidArgumentError("bmm: shape mismatch");
  Tensor<T> out({h, n, m});
  for (int i = 0; i < h; ++i)
    mm_acc_nn(av.data.data() + static_cast<int64_t>(i) * n * k,
              bv.data.data() + static_cast<int64_t>(i) * k * m,
              out.data.data() + static_cast<int64_t>(i) * n * m, n, k, m);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, b, h, n, k, m](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& av2 = t.value(a);
    const Tensor<T>& bv2 = t.value(b);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (int i = 0; i < h; ++i) {
      const T* gp = g.data.data() + static_cast<int64_t>(i) * n * m;
      mm_acc_nt(gp, bv2.data.data() + static_cast<int64_t>(i) * k * m,
                ga.data.data() + static_cast<int64_t>(i) * n * k, n, m, k);
      mm_acc_tn(av2.data.data() + static_cast<int64_t>(i) * n * k, gp,
                gb.data.data() + static_cast<int64_t>(i) * k * m, n, k, m);
    }
  });
  return v;
}

// (h, n, k) x (h, m, k)^T -> (h, n, m)
template <typename T>
Var bmm_tb(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.value(a);
  const Tensor<T>& bv = tp.value(b);
  const int h = av.dim(0), n = av.dim(1), k = av.dim(2), m = bv.dim(1);
  if (bv.dim(0) != h || bv.dim(2) != k) throw InvalidArgumentError("bmm_tb: shape mismatch");
  Tensor<T> out({h, n, m});
  for (int i = 0; i < h; ++i)
    mm_acc_nt(av.data.data() + static_cast<int64_t>(i) * n * k,
              bv.data.data() + static_cast<int64_t>(i) * m * k,
              out.data.data() + static_cast<int64_t>(i) * n * m, n, k, m);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, b, h, n, k, m](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& av2 = t.value(a);
    const Tensor<T>& bv2 = t.value(b);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (int i = 0; i < h; ++i) {
      const T* gp = g.data.data() + static_cast<int64_t>(i) * n * m;
      // ga += g * b ; gb += g^T * a
      mm_acc_nn(gp, bv2.data.data() + static_cast<int64_t>(i) * m * k,
                ga.data.data() + static_cast<int64_t>(i) * n * k, n, m, k);
      mm_acc_tn(gp, av2.data.data() + static_cast<int64_t>(i) * n * k,
                gb.data.data() + static_cast<int64_t>(i) * m * k, n, m, k);
    }
  });
  return v;
}

// Drops row 0 (the readout token) and adds it to every remaining row.
template <typename T>
Var fold_row0(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out({n - 1, d});
  for (int i = 1; i < n; ++i)
    for (int j = 0; j < d; ++j) out(i - 1, j) = xv(i, j) + xv(0, j);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, n, d](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int i = 1; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        gx(i, j) += g(i - 1, j);
        gx(0, j) += g(i - 1, j);
      }
  });
  return v;
}

// Drops row 0 (the readout token).
template <typename T>
Var drop_row0(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out({n - 1, d});
  std::copy(xv.data.begin() + d, xv.data.end(), out.data.begin());
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, n, d](Tape<T>& t) {
    (void)n;
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i + d] += g.data[i];
  });
  return v;
}

// Prepends a learned row (the readout token) in front of the token matrix.
template <typename T>
Var prepend_row(Tape<T>& tp, Var row, Var x) {
  const Tensor<T>& rv = tp.value(row);
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), d = xv.dim(1);
  if (rv.numel() != d) throw InvalidArgumentError("prepend_row: dim mismatch");
  Tensor<T> out({n + 1, d});
  std::copy(rv.data.begin(), rv.data.end(), out.data.begin());
  std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + d);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, row, x, d](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& grow = t.grad(row);
    Tensor<T>& gx = t.grad(x);
    for (int j = 0; j < d; ++j) grow.data[j] += g.data[j];
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g.data[i + d];
  });
  return v;
}

// (ch, H, W) image -> (grid, ch*m*m) rows of flattened non-overlapping
// patches in raster order.
template <typename T>
Var extract_patches(Tape<T>& tp, Var x, int m) {
  const Tensor<T>& xv = tp.value(x);
  const int ch = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  if (H % m != 0 || W % m != 0)
    throw InvalidArgumentError("extract_patches: patch size must divide the image");
  const int gh = H / m, gw = W / m, pd = ch * m * m;
  Tensor<T> out({gh * gw, pd});
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      T* dst = out.data.data() + static_cast<int64_t>(gy * gw + gx) * pd;
      int idx = 0;
      for (int c = 0; c < ch; ++c)
        for (int py = 0; py < m; ++py)
          for (int px = 0; px < m; ++px) dst[idx++] = xv(c, gy * m + py, gx * m + px);
    }
  }
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, ch, m, gh, gw, pd](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int gy = 0; gy < gh; ++gy) {
      for (int gxi = 0; gxi < gw; ++gxi) {
        const T* src = g.data.data() + static_cast<int64_t>(gy * gw + gxi) * pd;
        int idx = 0;
        for (int c = 0; c < ch; ++c)
          for (int py = 0; py < m; ++py)
            for (int px = 0; px < m; ++px) gx(c, gy * m + py, gxi * m + px) += src[idx++];
      }
    }
  });
  return v;
}

// (s*s, d) tokens in raster order -> (d, s, s) feature map.
template <typename T>
Var tokens_to_grid(Tape<T>& tp, Var x, int side) {
  const Tensor<T>& xv = tp.value(x);
  const int n = xv.dim(0), d = xv.dim(1);
  if (n != side * side) throw InvalidArgumentError("tokens_to_grid: token count not square");
  Tensor<T> out({d, side, side});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) out.data[static_cast<int64_t>(c) * n + i] = xv(i, c);
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, n, d](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) gx(i, c) += g.data[static_cast<int64_t>(c) * n + i];
  });
  return v;
}

// ---- convolutions --------------------------------------------------------

template <typename T>
Var conv2d(Tape<T>& tp, Var x, Var w, Var bias, int stride, int pad) {
  const Tensor<T>& xv = tp.value(x);
  const Tensor<T>& wv = tp.value(w);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0))
    throw InvalidArgumentError("conv2d: shape mismatch");
  const int ch = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int oc = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const int oh = (H + 2 * pad - kh) / stride + 1;
  const int ow = (W + 2 * pad - kw) / stride + 1;
  const int kdim = ch * kh * kw;
  const int64_t grid = static_cast<int64_t>(oh) * ow;

  Tensor<T> col({kdim, static_cast<int>(grid)});
  im2col(xv.data.data(), ch, H, W, kh, kw, stride, pad, oh, ow, col.data.data());

  Tensor<T> out({oc, oh, ow});
  mm_acc_nn(wv.data.data(), col.data.data(), out.data.data(), oc, kdim,
            static_cast<int>(grid));
  if (bias.valid()) {
    const Tensor<T>& bv = tp.value(bias);
    for (int o = 0; o < oc; ++o) {
      T* plane = out.data.data() + static_cast<int64_t>(o) * grid;
      for (int64_t i = 0; i < grid; ++i) plane[i] += bv.data[o];
    }
  }

  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, w, bias, ch, H, W, oc, kh, kw, stride, pad, oh, ow, kdim, grid,
                  col = std::move(col)](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& wv2 = t.value(w);
    // dW += g * col^T
    mm_acc_nt(g.data.data(), col.data.data(), t.grad(w).data.data(), oc,
              static_cast<int>(grid), kdim);
    if (bias.valid()) {
      Tensor<T>& gb = t.grad(bias);
      for (int o = 0; o < oc; ++o) {
        const T* plane = g.data.data() + static_cast<int64_t>(o) * grid;
        T acc = T(0);
        for (int64_t i = 0; i < grid; ++i) acc += plane[i];
        gb.data[o] += acc;
      }
    }
    // dcol = W^T * g, then scatter back to the input image.
    Tensor<T> dcol({kdim, static_cast<int>(grid)});
    mm_acc_tn(wv2.data.data(), g.data.data(), dcol.data.data(), oc, kdim,
              static_cast<int>(grid));
    col2im_add(dcol.data.data(), ch, H, W, kh, kw, stride, pad, oh, ow,
               t.grad(x).data.data());
  });
  return v;
}

// Transposed convolution; weight layout (in_ch, out_ch, kh, kw).
// Output size = (in - 1) * stride - 2*pad + k + out_pad.
template <typename T>
Var conv_transpose2d(Tape<T>& tp, Var x, Var w, Var bias, int stride, int pad,
                     int out_pad) {
  const Tensor<T>& xv = tp.value(x);
  const Tensor<T>& wv = tp.value(w);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(0) != xv.dim(0))
    throw InvalidArgumentError("conv_transpose2d: shape mismatch");
  const int ch = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int oc = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  const int oh = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int ow = (W - 1) * stride - 2 * pad + kw + out_pad;
  const int kdim = oc * kh * kw;
  const int64_t grid = static_cast<int64_t>(H) * W;

  // cols = W_flat^T (kdim, ch)^T... computed as (ch,kdim)^T * x_flat(ch, H*W)
  Tensor<T> cols({kdim, static_cast<int>(grid)});
  mm_acc_tn(wv.data.data(), xv.data.data(), cols.data.data(), ch, kdim,
            static_cast<int>(grid));

  Tensor<T> out({oc, oh, ow});
  col2im_add(cols.data.data(), oc, oh, ow, kh, kw, stride, pad, H, W, out.data.data());
  if (bias.valid()) {
    const Tensor<T>& bv = tp.value(bias);
    for (int o = 0; o < oc; ++o) {
      T* plane = out.data.data() + static_cast<int64_t>(o) * oh * ow;
      for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) plane[i] += bv.data[o];
    }
  }

  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, w, bias, ch, H, W, oc, kh, kw, stride, pad, oh, ow, kdim,
                  grid](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    const Tensor<T>& xv2 = t.value(x);
    const Tensor<T>& wv2 = t.value(w);
    // Gather g back into column form: dcols[(o,ki,kj)][(y,x)] = g[o][y*s-p+ki][...]
    Tensor<T> dcols({kdim, static_cast<int>(grid)});
    im2col(g.data.data(), oc, oh, ow, kh, kw, stride, pad, H, W, dcols.data.data());
    // dx += W_flat(ch, kdim) * dcols
    mm_acc_nn(wv2.data.data(), dcols.data.data(), t.grad(x).data.data(), ch, kdim,
              static_cast<int>(grid));
    // dW += x_flat(ch, grid) * dcols^T
    mm_acc_nt(xv2.data.data(), dcols.data.data(), t.grad(w).data.data(), ch,
              static_cast<int>(grid), kdim);
    if (bias.valid()) {
      Tensor<T>& gb = t.grad(bias);
      for (int o = 0; o < oc; ++o) {
        const T* plane = g.data.data() + static_cast<int64_t>(o) * oh * ow;
        T acc = T(0);
        for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += plane[i];
        gb.data[o] += acc;
      }
    }
  });
  return v;
}

// Bilinear x2 upsampling with half-pixel centers and edge clamping.
template <typename T>
Var upsample2x(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.value(x);
  const int ch = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int oh = 2 * H, ow = 2 * W;

  auto taps = [](int o, int size, int& i0, int& i1, T& w1) {
    const double s = (o + 0.5) / 2.0 - 0.5;
    const double f = std::floor(s);
    i0 = std::clamp(static_cast<int>(f), 0, size - 1);
    i1 = std::clamp(static_cast<int>(f) + 1, 0, size - 1);
    w1 = static_cast<T>(s - f);
  };

  Tensor<T> out({ch, oh, ow});
  for (int c = 0; c < ch; ++c) {
    const T* src = xv.data.data() + static_cast<int64_t>(c) * H * W;
    T* dst = out.data.data() + static_cast<int64_t>(c) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      int y0, y1;
      T wy;
      taps(oy, H, y0, y1, wy);
      for (int ox = 0; ox < ow; ++ox) {
        int x0, x1;
        T wx;
        taps(ox, W, x0, x1, wx);
        const T v00 = src[static_cast<int64_t>(y0) * W + x0];
        const T v01 = src[static_cast<int64_t>(y0) * W + x1];
        const T v10 = src[static_cast<int64_t>(y1) * W + x0];
        const T v11 = src[static_cast<int64_t>(y1) * W + x1];
        dst[static_cast<int64_t>(oy) * ow + ox] =
            (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
            wy * ((T(1) - wx) * v10 + wx * v11);
      }
    }
  }
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, x, ch, H, W, oh, ow, taps](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& gx = t.grad(x);
    for (int c = 0; c < ch; ++c) {
      const T* gp = g.data.data() + static_cast<int64_t>(c) * oh * ow;
      T* gxp = gx.data.data() + static_cast<int64_t>(c) * H * W;
      for (int oy = 0; oy < oh; ++oy) {
        int y0, y1;
        T wy;
        taps(oy, H, y0, y1, wy);
        for (int ox = 0; ox < ow; ++ox) {
          int x0, x1;
          T wx;
          taps(ox, W, x0, x1, wx);
          const T gv = gp[static_cast<int64_t>(oy) * ow + ox];
          gxp[static_cast<int64_t>(y0) * W + x0] += (T(1) - wy) * (T(1) - wx) * gv;
          gxp[static_cast<int64_t>(y0) * W + x1] += (T(1) - wy) * wx * gv;
          gxp[static_cast<int64_t>(y1) * W + x0] += wy * (T(1) - wx) * gv;
          gxp[static_cast<int64_t>(y1) * W + x1] += wy * wx * gv;
        }
      }
    }
  });
  return v;
}

template <typename T>
Var concat_ch(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.value(a);
  const Tensor<T>& bv = tp.value(b);
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
    throw InvalidArgumentError("concat_ch: spatial dims differ");
  const int ca = av.dim(0), cb = bv.dim(0), H = av.dim(1), W = av.dim(2);
  Tensor<T> out({ca + cb, H, W});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
  Var v = tp.push(std::move(out));
  tp.set_back(v, [v, a, b](Tape<T>& t) {
    const Tensor<T>& g = t.grad(v);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += g.data[i];
    for (int64_t i = 0; i < gb.numel(); ++i) gb.data[i] += g.data[ga.numel() + i];
  });
  return v;
}

}  // namespace implantformer::ad
