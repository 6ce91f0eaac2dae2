#include "poroperm/ops.hpp"

#include <cmath>
#include <memory>
#include <vector>

namespace poroperm {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  fail(ErrorCode::InvalidConfig, "unknown activation '" + s + "'");
}

namespace {

void expect(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::ShapeMismatch, what);
}

// out[r, i] = b[i] + sum_j w[i, j] x[r, j]
template <typename T>
void affine_rows(const T* x, std::size_t rows, std::size_t n, const T* w, const T* b, std::size_t m, T* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* orow = out + r * m;
    for (std::size_t i = 0; i < m; ++i) {
      const T* wi = w + i * n;
      T acc = b ? b[i] : T{0};
      for (std::size_t j = 0; j < n; ++j) acc += wi[j] * xr[j];
      orow[i] = acc;
    }
  }
}

// Adjoint of affine_rows: accumulates into dx, dw, db (each may be null).
template <typename T>
void affine_rows_backward(const T* x, std::size_t rows, std::size_t n, const T* w, std::size_t m, const T* dout,
                          T* dx, T* dw, T* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    const T* gr = dout + r * m;
    for (std::size_t i = 0; i < m; ++i) {
      const T gi = gr[i];
      if (gi == T{0}) continue;
      if (db) db[i] += gi;
      if (dw) {
        T* dwi = dw + i * n;
        for (std::size_t j = 0; j < n; ++j) dwi[j] += gi * xr[j];
      }
      if (dx) {
        const T* wi = w + i * n;
        T* dxr = dx + r * n;
        for (std::size_t j = 0; j < n; ++j) dxr[j] += gi * wi[j];
      }
    }
  }
}

template <typename T>
T* grad_or_null(Graph<T>& g, Var v) {
  return g.requires_grad(v) ? g.grad(v).raw() : nullptr;
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernels, Var bias) {
  const Tensor<T>& x = g.value(input);
  const Tensor<T>& w = g.value(kernels);
  const Tensor<T>& b = g.value(bias);
  expect(x.rank() == 3, "conv2d input must be C×H×W, got " + shape_string(x.shape()));
  expect(w.rank() == 4, "conv2d kernels must be F×C×kh×kw, got " + shape_string(w.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  expect(w.dim(1) == C, "conv2d channel mismatch: input " + shape_string(x.shape()) + ", kernels " +
                            shape_string(w.shape()));
  expect(KH % 2 == 1 && KW % 2 == 1, "conv2d kernel extents must be odd");
  expect(b.rank() == 1 && b.dim(0) == F, "conv2d bias must have F entries");
  const std::size_t ph = KH / 2, pw = KW / 2;

  Tensor<T> out({F, H, W});
  // Visits every (f, c, ky, kx) tap with the valid output window for it.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const std::size_t y0 = ky < ph ? ph - ky : 0;
          const std::size_t y1 = std::min(H, H + ph - ky);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const std::size_t x0 = kx < pw ? pw - kx : 0;
            const std::size_t x1 = std::min(W, W + pw - kx);
            body(f, c, ky, kx, y0, y1, x0, x1);
          }
        }
  };

  T* o = out.raw();
  for (std::size_t f = 0; f < F; ++f) std::fill(o + f * H * W, o + (f + 1) * H * W, b[f]);
  const T* xd = x.raw();
  const T* wd = w.raw();
  for_each_tap([&](std::size_t f, std::size_t c, std::size_t ky, std::size_t kx, std::size_t y0, std::size_t y1,
                   std::size_t x0, std::size_t x1) {
    const T k = wd[((f * C + c) * KH + ky) * KW + kx];
    if (k == T{0}) return;
    for (std::size_t y = y0; y < y1; ++y) {
      T* orow = o + (f * H + y) * W;
      const T* irow = xd + (c * H + y + ky - ph) * W + kx - pw;
      for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += k * irow[xx];
    }
  });

  return g.record(std::move(out), {input, kernels, bias}, [=](Graph<T>& gr, Var self) {
    const T* go = gr.grad(self).raw();
    const T* xv = gr.value(input).raw();
    const T* wv = gr.value(kernels).raw();
    T* dx = grad_or_null(gr, input);
    T* dw = grad_or_null(gr, kernels);
    T* db = grad_or_null(gr, bias);
    if (db)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < H * W; ++i) db[f] += go[f * H * W + i];
    if (!dx && !dw) return;
    for_each_tap([&](std::size_t f, std::size_t c, std::size_t ky, std::size_t kx, std::size_t y0, std::size_t y1,
                     std::size_t x0, std::size_t x1) {
      const std::size_t widx = ((f * C + c) * KH + ky) * KW + kx;
      const T k = wv[widx];
      T acc{0};
      for (std::size_t y = y0; y < y1; ++y) {
        const T* grow = go + (f * H + y) * W;
        const std::size_t ioff = (c * H + y + ky - ph) * W + kx - pw;
        const T* irow = xv + ioff;
        if (dw)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
        if (dx) {
          T* drow = dx + ioff;
          for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] += k * grow[xx];
        }
      }
      if (dw) dw[widx] += acc;
    });
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& w = g.value(weight);
  const Tensor<T>& b = g.value(bias);
  expect(w.rank() == 2, "linear weight must be m×n, got " + shape_string(w.shape()));
  const std::size_t m = w.dim(0), n = w.dim(1);
  expect(b.rank() == 1 && b.dim(0) == m, "linear bias must have " + std::to_string(m) + " entries");
  expect(xv.rank() == 1 || xv.rank() == 2, "linear input must be a vector or matrix");
  const std::size_t in = xv.shape().back();
  expect(in == n, "linear input width " + std::to_string(in) + " does not match weight " + shape_string(w.shape()));
  const std::size_t rows = xv.rank() == 1 ? 1 : xv.dim(0);

  Tensor<T> out(xv.rank() == 1 ? Shape{m} : Shape{rows, m});
  affine_rows(xv.raw(), rows, n, w.raw(), b.raw(), m, out.raw());
  return g.record(std::move(out), {x, weight, bias}, [=](Graph<T>& gr, Var self) {
    affine_rows_backward(gr.value(x).raw(), rows, n, gr.value(weight).raw(), m, gr.grad(self).raw(),
                         grad_or_null(gr, x), grad_or_null(gr, weight), grad_or_null(gr, bias));
  });
}

template <typename T>
Var activate(Graph<T>& g, Var x, Activation act) {
  if (act == Activation::linear) return x;
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    switch (act) {
      case Activation::relu:
        g.note_branch(v > T{0});
        g.note_kink_margin(std::abs(static_cast<double>(v)));
        out[i] = v > T{0} ? v : T{0};
        break;
      case Activation::sigmoid: out[i] = T{1} / (T{1} + std::exp(-v)); break;
      case Activation::tanh: out[i] = std::tanh(v); break;
      case Activation::linear: break;
    }
  }
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const Tensor<T>& y = gr.value(self);
    const T* go = gr.grad(self).raw();
    T* dx = gr.grad(x).raw();
    const std::size_t n = y.size();
    switch (act) {
      case Activation::relu:
        for (std::size_t i = 0; i < n; ++i)
          if (y[i] > T{0}) dx[i] += go[i];
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) dx[i] += go[i] * y[i] * (T{1} - y[i]);
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < n; ++i) dx[i] += go[i] * (T{1} - y[i] * y[i]);
        break;
      case Activation::linear: break;
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  expect(av.shape() == bv.shape(), "add shapes differ: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return g.record(std::move(out), {a, b}, [=](Graph<T>& gr, Var self) {
    const Tensor<T>& go = gr.grad(self);
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      T* d = gr.grad(v).raw();
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
    }
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  const Tensor<T>& xv = g.value(x);
  expect(shape_size(shape) == xv.size(), "cannot reshape " + shape_string(xv.shape()) + " to " + shape_string(shape));
  return g.record(xv.reshaped(std::move(shape)), {x}, [=](Graph<T>& gr, Var self) {
    const Tensor<T>& go = gr.grad(self);
    T* d = gr.grad(x).raw();
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
  });
}

template <typename T>
Var permute_rows(Graph<T>& g, Var x, std::span<const std::size_t> perm) {
  const Tensor<T>& xv = g.value(x);
  expect(xv.rank() == 2 && perm.size() == xv.dim(0), "permutation length must equal the row count");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  std::vector<std::size_t> p(perm.begin(), perm.end());
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    expect(p[r] < rows, "permutation index out of range");
    std::copy_n(xv.raw() + p[r] * cols, cols, out.raw() + r * cols);
  }
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const T* go = gr.grad(self).raw();
    T* d = gr.grad(x).raw();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) d[p[r] * cols + c] += go[r * cols + c];
  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var offset, double eps) {
  const Tensor<T>& xv = g.value(x);
  expect(xv.rank() == 2, "layer_norm input must be rows × d");
  const std::size_t rows = xv.dim(0), d = xv.dim(1);
  expect(g.value(gain).shape() == Shape{d} && g.value(offset).shape() == Shape{d}, "layer_norm gain/offset must be [d]");

  auto xhat = std::make_shared<std::vector<T>>(rows * d);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* gv = g.value(gain).raw();
  const T* bv = g.value(offset).raw();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.raw() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return g.record(std::move(out), {x, gain, offset}, [=](Graph<T>& gr, Var self) {
    const T* go = gr.grad(self).raw();
    const T* gv2 = gr.value(gain).raw();
    T* dx = grad_or_null(gr, x);
    T* dg = grad_or_null(gr, gain);
    T* db = grad_or_null(gr, offset);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* hr = xhat->data() + r * d;
      const T* gor = go + r * d;
      T sum_dh{0}, sum_dh_h{0};
      for (std::size_t j = 0; j < d; ++j) {
        if (dg) dg[j] += gor[j] * hr[j];
        if (db) db[j] += gor[j];
        const T dh = gor[j] * gv2[j];
        sum_dh += dh;
        sum_dh_h += dh * hr[j];
      }
      if (!dx) continue;
      const T inv_d = T{1} / static_cast<T>(d);
      const T is = (*inv_std)[r];
      for (std::size_t j = 0; j < d; ++j) {
        const T dh = gor[j] * gv2[j];
        dx[r * d + j] += is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
      }
    }
  });
}

template <typename T>
Var multi_head_attention(Graph<T>& g, Var x, const AttentionParams& p, std::size_t heads, AttentionProbe<T>* probe) {
  const Tensor<T>& xv = g.value(x);
  expect(xv.rank() == 2, "attention input must be T × d, got " + shape_string(xv.shape()));
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (heads == 0 || d % heads != 0)
    fail(ErrorCode::HeadsDontDivide, "token width " + std::to_string(d) + " is not divisible by " +
                                         std::to_string(heads) + " heads");
  for (Var w : {p.wq, p.wk, p.wv, p.wo}) expect(g.value(w).shape() == Shape{d, d}, "attention weights must be d × d");
  for (Var b : {p.bq, p.bk, p.bv, p.bo}) expect(g.value(b).shape() == Shape{d}, "attention biases must be [d]");
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  struct Saved {
    std::vector<T> q, k, v, a, o;
  };
  auto s = std::make_shared<Saved>();
  s->q.resize(n * d);
  s->k.resize(n * d);
  s->v.resize(n * d);
  s->a.resize(heads * n * n);
  s->o.assign(n * d, T{0});
  affine_rows(xv.raw(), n, d, g.value(p.wq).raw(), g.value(p.bq).raw(), d, s->q.data());
  affine_rows(xv.raw(), n, d, g.value(p.wk).raw(), g.value(p.bk).raw(), d, s->k.data());
  affine_rows(xv.raw(), n, d, g.value(p.wv).raw(), g.value(p.bv).raw(), d, s->v.data());

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < n; ++t) {
      T* arow = s->a.data() + (h * n + t) * n;
      const T* qt = s->q.data() + t * d + off;
      T mx = -INFINITY;
      for (std::size_t u = 0; u < n; ++u) {
        const T* ku = s->k.data() + u * d + off;
        T dot{0};
        for (std::size_t c = 0; c < dh; ++c) dot += qt[c] * ku[c];
        arow[u] = dot * scale;
        mx = std::max(mx, arow[u]);
      }
      T denom{0};
      for (std::size_t u = 0; u < n; ++u) {
        arow[u] = std::exp(arow[u] - mx);
        denom += arow[u];
      }
      for (std::size_t u = 0; u < n; ++u) arow[u] /= denom;
      T* ot = s->o.data() + t * d + off;
      for (std::size_t u = 0; u < n; ++u) {
        const T* vu = s->v.data() + u * d + off;
        for (std::size_t c = 0; c < dh; ++c) ot[c] += arow[u] * vu[c];
      }
    }
  }
  if (probe) probe->weights = Tensor<T>({heads, n, n}, s->a);

  Tensor<T> out({n, d});
  affine_rows(s->o.data(), n, d, g.value(p.wo).raw(), g.value(p.bo).raw(), d, out.raw());

  const AttentionParams P = p;
  return g.record(std::move(out), {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo},
                  [=](Graph<T>& gr, Var self) {
                    const T* dy = gr.grad(self).raw();
                    std::vector<T> dO(n * d, T{0});
                    affine_rows_backward(s->o.data(), n, d, gr.value(P.wo).raw(), d, dy, dO.data(),
                                         grad_or_null(gr, P.wo), grad_or_null(gr, P.bo));
                    std::vector<T> dQ(n * d, T{0}), dK(n * d, T{0}), dV(n * d, T{0});
                    std::vector<T> dA(n);
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t off = h * dh;
                      for (std::size_t t = 0; t < n; ++t) {
                        const T* arow = s->a.data() + (h * n + t) * n;
                        const T* dot_ = dO.data() + t * d + off;
                        T weighted{0};
                        for (std::size_t u = 0; u < n; ++u) {
                          const T* vu = s->v.data() + u * d + off;
                          T acc{0};
                          for (std::size_t c = 0; c < dh; ++c) acc += dot_[c] * vu[c];
                          dA[u] = acc;
                          weighted += arow[u] * acc;
                          T* dvu = dV.data() + u * d + off;
                          for (std::size_t c = 0; c < dh; ++c) dvu[c] += arow[u] * dot_[c];
                        }
                        const T* qt = s->q.data() + t * d + off;
                        T* dqt = dQ.data() + t * d + off;
                        for (std::size_t u = 0; u < n; ++u) {
                          const T ds = arow[u] * (dA[u] - weighted) * scale;
                          if (ds == T{0}) continue;
                          const T* ku = s->k.data() + u * d + off;
                          T* dku = dK.data() + u * d + off;
                          for (std::size_t c = 0; c < dh; ++c) {
                            dqt[c] += ds * ku[c];
                            dku[c] += ds * qt[c];
                          }
                        }
                      }
                    }
                    const T* xd = gr.value(x).raw();
                    T* dx = grad_or_null(gr, x);
                    affine_rows_backward(xd, n, d, gr.value(P.wq).raw(), d, dQ.data(), dx, grad_or_null(gr, P.wq),
                                         grad_or_null(gr, P.bq));
                    affine_rows_backward(xd, n, d, gr.value(P.wk).raw(), d, dK.data(), dx, grad_or_null(gr, P.wk),
                                         grad_or_null(gr, P.bk));
                    affine_rows_backward(xd, n, d, gr.value(P.wv).raw(), d, dV.data(), dx, grad_or_null(gr, P.wv),
                                         grad_or_null(gr, P.bv));
                  });
}

template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target, std::optional<std::span<const std::uint32_t>> mask) {
  const Tensor<T>& pv = g.value(pred);
  if (pv.size() != target.size())
    fail(ErrorCode::LengthMismatch, "prediction has " + std::to_string(pv.size()) + " values, target " +
                                        std::to_string(target.size()));
  std::vector<std::uint32_t> idx;
  if (mask) {
    if (mask->empty()) fail(ErrorCode::EmptyMask, "mse over an empty mask");
    idx.assign(mask->begin(), mask->end());
    for (auto i : idx)
      if (i >= pv.size()) fail(ErrorCode::LengthMismatch, "mask index out of range");
  }
  const std::size_t count = mask ? idx.size() : pv.size();
  if (count == 0) fail(ErrorCode::EmptyMask, "mse over zero elements");
  std::vector<T> diff(count);
  T acc{0};
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = mask ? idx[k] : k;
    diff[k] = pv[i] - target[i];
    acc += diff[k] * diff[k];
  }
  const T inv = T{1} / static_cast<T>(count);
  Tensor<T> out(Shape{1}, acc * inv);
  return g.record(std::move(out), {pred},
                  [pred, idx = std::move(idx), diff = std::move(diff), inv, masked = mask.has_value()](Graph<T>& gr,
                                                                                                     Var self) {
                    const T scale = T{2} * inv * gr.grad(self)[0];
                    T* dp = gr.grad(pred).raw();
                    for (std::size_t k = 0; k < diff.size(); ++k) dp[masked ? idx[k] : k] += scale * diff[k];
                  });
}

#define POROPERM_INSTANTIATE_OPS(T)                                                                          \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var);                                                          \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                                          \
  template Var activate<T>(Graph<T>&, Var, Activation);                                                      \
  template Var add<T>(Graph<T>&, Var, Var);                                                                  \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                                            \
  template Var permute_rows<T>(Graph<T>&, Var, std::span<const std::size_t>);                                \
  template Var layer_norm<T>(Graph<T>&, Var, Var, Var, double);                                              \
  template Var multi_head_attention<T>(Graph<T>&, Var, const AttentionParams&, std::size_t, AttentionProbe<T>*); \
  template Var mse<T>(Graph<T>&, Var, const Tensor<T>&, std::optional<std::span<const std::uint32_t>>);

POROPERM_INSTANTIATE_OPS(float)
POROPERM_INSTANTIATE_OPS(double)
POROPERM_INSTANTIATE_OPS(long double)

}  // namespace poroperm
