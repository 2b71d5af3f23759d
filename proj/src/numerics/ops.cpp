#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "badseg/autograd.hpp"
#include "gemm.hpp"

namespace badseg::ad {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

void require_ndim(const Var& a, int n, const char* op) {
  if (a.value().ndim() != n) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) +
                                "-D input, got " + shape_string(a.shape()));
  }
}

// Accumulates `g` into the gradient of `v` if it participates in differentiation.
void accumulate(Graph& graph, const Var& v, const Tensor& g) {
  if (!v.valid() || !v.requires_grad()) return;
  Tensor& dst = graph.grad_buffer(v.id());
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

bool wants(const Var& v) { return v.valid() && v.requires_grad(); }

constexpr float kProbFloor = 1e-7f;

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    accumulate(g, a, up);
    accumulate(g, b, up);
  }, "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    accumulate(g, a, up);
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] -= up[i];
    }
  }, "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    if (wants(a)) {
      Tensor& ga = g.grad_buffer(a.id());
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * bv[i];
    }
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * av[i];
    }
  }, "mul");
}

Var scale(Var a, float s) {
  Tensor out = a.value();
  for (float& v : out.values()) v *= s;
  return a.graph().record(std::move(out), {a}, [a, s](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += s * up[i];
  }, "scale");
}

Var relu(Var a) {
  Tensor out = a.value();
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return a.graph().record(std::move(out), {a}, [a](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    const Tensor& x = a.value();
    Tensor& ga = g.grad_buffer(a.id());
    for (std::size_t i = 0; i < up.size(); ++i)
      if (x[i] > 0.0f) ga[i] += up[i];
  }, "relu");
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Var gelu(Var a) {
  Tensor out = a.value();
  for (float& v : out.values()) {
    const float x = v;
    v = 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  return a.graph().record(std::move(out), {a}, [a](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    const Tensor& xs = a.value();
    Tensor& ga = g.grad_buffer(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) {
      const float x = xs[i];
      const float u = kGeluC * (x + kGeluA * x * x * x);
      const float t = std::tanh(u);
      const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
      const float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      ga[i] += up[i] * d;
    }
  }, "gelu");
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.values()) v = 1.0f / (1.0f + std::exp(-v));
  return out;
}

Var sigmoid(Var a) {
  Tensor out = sigmoid(a.value());
  return a.graph().record(std::move(out), {a}, [a](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    const Tensor& y = g.value(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * y[i] * (1.0f - y[i]);
  }, "sigmoid");
}

Var add_row_bias(Var x, Var b) {
  require_ndim(x, 2, "add_row_bias");
  const int m = x.dim(0), n = x.dim(1);
  if (static_cast<int>(b.value().size()) != n) throw std::invalid_argument("add_row_bias: bias length mismatch");
  Tensor out = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += b.value()[static_cast<std::size_t>(j)];
  return x.graph().record(std::move(out), {x, b}, [x, b, m, n](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    accumulate(g, x, up);
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += up.at(i, j);
    }
  }, "add_row_bias");
}

Var add_channel_bias(Var x, Var b) {
  require_ndim(x, 3, "add_channel_bias");
  const int c = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (static_cast<int>(b.value().size()) != c) throw std::invalid_argument("add_channel_bias: bias length mismatch");
  Tensor out = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] += b.value()[static_cast<std::size_t>(ch)];
  return x.graph().record(std::move(out), {x, b}, [x, b, c, plane](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    accumulate(g, x, up);
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += up[ch * plane + p];
        gb[static_cast<std::size_t>(ch)] += static_cast<float>(s);
      }
    }
  }, "add_channel_bias");
}

Var matmul(Var a, Var b, bool ta, bool tb) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  const int m = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_string(a.shape()) +
                                " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  detail::gemm(ta, tb, m, n, k, a.value().data(), b.value().data(), 0.0f, out.data());
  return a.graph().record(std::move(out), {a, b}, [a, b, ta, tb, m, n, k](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);  // [m,n]
    if (wants(a)) {
      Tensor& ga = g.grad_buffer(a.id());
      if (!ta) {
        // dA[m,k] = up · op(B)ᵀ
        detail::gemm(false, !tb, m, k, n, up.data(), b.value().data(), 1.0f, ga.data());
      } else {
        // dA[k,m] = op(B) · upᵀ
        detail::gemm(tb, true, k, m, n, b.value().data(), up.data(), 1.0f, ga.data());
      }
    }
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      if (!tb) {
        // dB[k,n] = op(A)ᵀ · up
        detail::gemm(!ta, false, k, n, m, a.value().data(), up.data(), 1.0f, gb.data());
      } else {
        // dB[n,k] = upᵀ · op(A)
        detail::gemm(true, ta, n, k, m, up.data(), a.value().data(), 1.0f, gb.data());
      }
    }
  }, "matmul");
}

Var linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  return b.valid() ? add_row_bias(y, b) : y;
}

Var softmax_rows(Var a) {
  require_ndim(a, 2, "softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = a.value();
  for (int i = 0; i < m; ++i) {
    float* row = out.data() + static_cast<std::size_t>(i) * n;
    const float mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
  return a.graph().record(std::move(out), {a}, [a, m, n](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    const Tensor& y = g.value(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (int i = 0; i < m; ++i) {
      double d = 0.0;
      for (int j = 0; j < n; ++j) d += static_cast<double>(up.at(i, j)) * y.at(i, j);
      for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (up.at(i, j) - static_cast<float>(d));
    }
  }, "softmax_rows");
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
  require_ndim(x, 2, "layer_norm");
  const int m = x.dim(0), n = x.dim(1);
  Tensor xhat({m, n});
  std::vector<float> rstd(static_cast<std::size_t>(m));
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x.value().at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x.value().at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(i)] = static_cast<float>(r);
    for (int j = 0; j < n; ++j) {
      const float h = static_cast<float>((x.value().at(i, j) - mean) * r);
      xhat.at(i, j) = h;
      out.at(i, j) = h * gamma.value()[static_cast<std::size_t>(j)] + beta.value()[static_cast<std::size_t>(j)];
    }
  }
  return x.graph().record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    if (wants(gamma) || wants(beta)) {
      std::vector<double> dg(static_cast<std::size_t>(n), 0.0), db(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          dg[static_cast<std::size_t>(j)] += static_cast<double>(up.at(i, j)) * xhat.at(i, j);
          db[static_cast<std::size_t>(j)] += up.at(i, j);
        }
      if (wants(gamma)) {
        Tensor& gg = g.grad_buffer(gamma.id());
        for (int j = 0; j < n; ++j) gg[static_cast<std::size_t>(j)] += static_cast<float>(dg[static_cast<std::size_t>(j)]);
      }
      if (wants(beta)) {
        Tensor& gb = g.grad_buffer(beta.id());
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += static_cast<float>(db[static_cast<std::size_t>(j)]);
      }
    }
    if (wants(x)) {
      Tensor& gx = g.grad_buffer(x.id());
      const Tensor& gm = gamma.value();
      for (int i = 0; i < m; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < n; ++j) {
          const double dh = static_cast<double>(up.at(i, j)) * gm[static_cast<std::size_t>(j)];
          s1 += dh;
          s2 += dh * xhat.at(i, j);
        }
        const double r = rstd[static_cast<std::size_t>(i)];
        for (int j = 0; j < n; ++j) {
          const double dh = static_cast<double>(up.at(i, j)) * gm[static_cast<std::size_t>(j)];
          gx.at(i, j) += static_cast<float>(r * (dh - s1 / n - xhat.at(i, j) * s2 / n));
        }
      }
    }
  }, "layer_norm");
}

Var transpose(Var a) {
  require_ndim(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  return a.graph().record(std::move(out), {a}, [a, m, n](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga.at(i, j) += up.at(j, i);
  }, "transpose");
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record(std::move(out), {a}, [a](Graph& g, int self) {
    accumulate(g, a, g.grad_buffer(self));
  }, "reshape");
}

Var slice_cols(Var a, int begin, int end) {
  require_ndim(a, 2, "slice_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (begin < 0 || end > n || begin >= end) throw std::invalid_argument("slice_cols: bad range");
  const int w = end - begin;
  Tensor out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = a.value().at(i, begin + j);
  return a.graph().record(std::move(out), {a}, [a, m, w, begin](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) ga.at(i, begin + j) += up.at(i, j);
  }, "slice_cols");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Var& p : parts) {
    require_ndim(p, 2, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row count mismatch");
    n += p.dim(1);
  }
  Tensor out({m, n});
  int off = 0;
  for (const Var& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, off + j) = p.value().at(i, j);
    off += w;
  }
  return parts[0].graph().record(std::move(out), parts, [parts, m](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    int off = 0;
    for (const Var& p : parts) {
      const int w = p.dim(1);
      if (wants(p)) {
        Tensor& gp = g.grad_buffer(p.id());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) gp.at(i, j) += up.at(i, off + j);
      }
      off += w;
    }
  }, "concat_cols");
}

Var slice_rows(Var a, int begin, int end) {
  require_ndim(a, 2, "slice_rows");
  const int m = a.dim(0), n = a.dim(1);
  if (begin < 0 || end > m || begin >= end) throw std::invalid_argument("slice_rows: bad range");
  const auto first = a.value().vec().begin() + static_cast<long>(begin) * n;
  Tensor out({end - begin, n}, std::vector<float>(first, first + static_cast<long>(end - begin) * n));
  return a.graph().record(std::move(out), {a}, [a, begin, n](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& ga = g.grad_buffer(a.id());
    const std::size_t off = static_cast<std::size_t>(begin) * n;
    for (std::size_t i = 0; i < up.size(); ++i) ga[off + i] += up[i];
  }, "slice_rows");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int n = parts[0].dim(1);
  int m = 0;
  std::vector<float> data;
  for (const Var& p : parts) {
    require_ndim(p, 2, "concat_rows");
    if (p.dim(1) != n) throw std::invalid_argument("concat_rows: column count mismatch");
    m += p.dim(0);
    data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
  }
  return parts[0].graph().record(Tensor({m, n}, std::move(data)), parts, [parts](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t len = p.value().size();
      if (wants(p)) {
        Tensor& gp = g.grad_buffer(p.id());
        for (std::size_t i = 0; i < len; ++i) gp[i] += up[off + i];
      }
      off += len;
    }
  }, "concat_rows");
}

Var mean_rows(Var a) {
  require_ndim(a, 2, "mean_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({1, n});
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += a.value().at(i, j);
    out[static_cast<std::size_t>(j)] = static_cast<float>(s / m);
  }
  return a.graph().record(std::move(out), {a}, [a, m, n](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& ga = g.grad_buffer(a.id());
    const float inv = 1.0f / static_cast<float>(m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga.at(i, j) += up[static_cast<std::size_t>(j)] * inv;
  }, "mean_rows");
}

Var sum_all(Var a) {
  const double s = sum(a.value());
  return a.graph().record(Tensor::scalar(static_cast<float>(s)), {a}, [a](Graph& g, int self) {
    const float up = g.grad_buffer(self)[0];
    Tensor& ga = g.grad_buffer(a.id());
    for (float& v : ga.values()) v += up;
  }, "sum_all");
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  const double s = sum(a.value()) / n;
  return a.graph().record(Tensor::scalar(static_cast<float>(s)), {a}, [a, n](Graph& g, int self) {
    const float up = static_cast<float>(g.grad_buffer(self)[0] / n);
    Tensor& ga = g.grad_buffer(a.id());
    for (float& v : ga.values()) v += up;
  }, "mean_all");
}

namespace {

Var scaled_sq_diff(Var a, Var b, double norm, const char* op) {
  require_same_shape(a, b, op);
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  return a.graph().record(Tensor::scalar(static_cast<float>(s / norm)), {a, b}, [a, b, norm](Graph& g, int self) {
    const double up = g.grad_buffer(self)[0];
    const double k = 2.0 * up / norm;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (wants(a)) {
      Tensor& ga = g.grad_buffer(a.id());
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += static_cast<float>(k * (av[i] - bv[i]));
    }
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= static_cast<float>(k * (av[i] - bv[i]));
    }
  }, op);
}

}  // namespace

Var squared_distance(Var a, Var b) { return scaled_sq_diff(a, b, 1.0, "squared_distance"); }

Var mse(Var a, Var b) {
  return scaled_sq_diff(a, b, static_cast<double>(a.value().size()), "mse");
}

namespace {

// cols[(c*k + ky)*k + kx, oy*ow + ox] = x[c, oy*s + ky − pad, ox*s + kx − pad]
void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow, std::vector<float>& cols) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t npos = static_cast<std::size_t>(oh) * ow;
  cols.assign(static_cast<std::size_t>(cin) * k * k * npos, 0.0f);
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * npos;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            row[static_cast<std::size_t>(oy) * ow + ox] = x.at(c, iy, ix);
          }
        }
      }
}

void col2im(const std::vector<float>& cols, int k, int stride, int pad, int oh, int ow, Tensor& gx) {
  const int cin = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const std::size_t npos = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * npos;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            gx.at(c, iy, ix) += row[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  require_ndim(x, 3, "conv2d");
  require_ndim(w, 4, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_string(w.shape()) + " incompatible with input " +
                                shape_string(x.shape()));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");
  std::vector<float> cols;
  im2col(x.value(), k, stride, pad, oh, ow, cols);
  const int kk = cin * k * k;
  const int npos = oh * ow;
  Tensor out({cout, oh, ow});
  detail::gemm(false, false, cout, npos, kk, w.value().data(), cols.data(), 0.0f, out.data());
  if (b.valid()) {
    for (int c = 0; c < cout; ++c)
      for (int p = 0; p < npos; ++p) out[static_cast<std::size_t>(c) * npos + p] += b.value()[static_cast<std::size_t>(c)];
  }
  return x.graph().record(std::move(out), {x, w, b},
                          [x, w, b, k, stride, pad, oh, ow, cout, kk, npos, cols = std::move(cols)](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);  // [cout, npos]
    if (wants(w)) {
      Tensor& gw = g.grad_buffer(w.id());
      detail::gemm(false, true, cout, kk, npos, up.data(), cols.data(), 1.0f, gw.data());
    }
    if (wants(b)) {
      Tensor& gb = g.grad_buffer(b.id());
      for (int c = 0; c < cout; ++c) {
        double s = 0.0;
        for (int p = 0; p < npos; ++p) s += up[static_cast<std::size_t>(c) * npos + p];
        gb[static_cast<std::size_t>(c)] += static_cast<float>(s);
      }
    }
    if (wants(x)) {
      std::vector<float> dcols(static_cast<std::size_t>(kk) * npos);
      detail::gemm(true, false, kk, npos, cout, w.value().data(), up.data(), 0.0f, dcols.data());
      col2im(dcols, k, stride, pad, oh, ow, g.grad_buffer(x.id()));
    }
  }, "conv2d");
}

Var upsample_nearest(Var x, int factor) {
  require_ndim(x, 3, "upsample_nearest");
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor < 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, h * factor, w * factor});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * factor; ++i)
      for (int j = 0; j < w * factor; ++j) out.at(ch, i, j) = x.value().at(ch, i / factor, j / factor);
  return x.graph().record(std::move(out), {x}, [x, c, h, w, factor](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(x.id());
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h * factor; ++i)
        for (int j = 0; j < w * factor; ++j) gx.at(ch, i / factor, j / factor) += up.at(ch, i, j);
  }, "upsample_nearest");
}

namespace {

struct Tap {
  int i0, i1;
  float w1;  // weight of i1; i0 gets 1 − w1
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - i0)};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 3) throw std::invalid_argument("resize_bilinear: expected [C,H,W]");
  const int c = x.dim(0);
  const auto ty = bilinear_taps(x.dim(1), out_h);
  const auto tx = bilinear_taps(x.dim(2), out_w);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < out_h; ++i) {
      const Tap& a = ty[static_cast<std::size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const Tap& b = tx[static_cast<std::size_t>(j)];
        const float top = x.at(ch, a.i0, b.i0) * (1.0f - b.w1) + x.at(ch, a.i0, b.i1) * b.w1;
        const float bot = x.at(ch, a.i1, b.i0) * (1.0f - b.w1) + x.at(ch, a.i1, b.i1) * b.w1;
        out.at(ch, i, j) = top * (1.0f - a.w1) + bot * a.w1;
      }
    }
  return out;
}

Var resize_bilinear(Var x, int out_h, int out_w) {
  require_ndim(x, 3, "resize_bilinear");
  Tensor out = resize_bilinear(x.value(), out_h, out_w);
  return x.graph().record(std::move(out), {x}, [x, out_h, out_w](Graph& g, int self) {
    const Tensor& up = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(x.id());
    const int c = x.dim(0);
    const auto ty = bilinear_taps(x.dim(1), out_h);
    const auto tx = bilinear_taps(x.dim(2), out_w);
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < out_h; ++i) {
        const Tap& a = ty[static_cast<std::size_t>(i)];
        for (int j = 0; j < out_w; ++j) {
          const Tap& b = tx[static_cast<std::size_t>(j)];
          const float u = up.at(ch, i, j);
          gx.at(ch, a.i0, b.i0) += u * (1.0f - a.w1) * (1.0f - b.w1);
          gx.at(ch, a.i0, b.i1) += u * (1.0f - a.w1) * b.w1;
          gx.at(ch, a.i1, b.i0) += u * a.w1 * (1.0f - b.w1);
          gx.at(ch, a.i1, b.i1) += u * a.w1 * b.w1;
        }
      }
  }, "resize_bilinear");
}

Var bce_with_logits(Var logits, const Tensor& target) {
  if (logits.value().size() != target.size()) throw std::invalid_argument("bce: shape mismatch");
  const std::size_t n = target.size();
  std::vector<float> p(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float raw = 1.0f / (1.0f + std::exp(-logits.value()[i]));
    const float pc = std::clamp(raw, kProbFloor, 1.0f - kProbFloor);
    p[i] = raw;
    const double q = target[i];
    s -= q * std::log(static_cast<double>(pc)) + (1.0 - q) * std::log(1.0 - static_cast<double>(pc));
  }
  Tensor tgt = target;
  return logits.graph().record(Tensor::scalar(static_cast<float>(s / n)), {logits},
                               [logits, n, p = std::move(p), tgt = std::move(tgt)](Graph& g, int self) {
    const double up = g.grad_buffer(self)[0] / static_cast<double>(n);
    Tensor& gl = g.grad_buffer(logits.id());
    for (std::size_t i = 0; i < n; ++i) {
      // Clamped probabilities have zero slope.
      if (p[i] < kProbFloor || p[i] > 1.0f - kProbFloor) continue;
      gl[i] += static_cast<float>(up * (static_cast<double>(p[i]) - tgt[i]));
    }
  }, "bce_with_logits");
}

Var dice_with_logits(Var logits, const Tensor& target, float eps) {
  if (logits.value().size() != target.size()) throw std::invalid_argument("dice: shape mismatch");
  if (!(eps > 0.0f)) throw std::invalid_argument("dice: eps must be positive");
  const std::size_t n = target.size();
  std::vector<float> p(n);
  double spq = 0.0, sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = 1.0f / (1.0f + std::exp(-logits.value()[i]));
    spq += static_cast<double>(p[i]) * target[i];
    sp += p[i];
    sq += target[i];
  }
  const double num = 2.0 * spq + eps;
  const double den = sp + sq + eps;
  Tensor tgt = target;
  return logits.graph().record(Tensor::scalar(static_cast<float>(1.0 - num / den)), {logits},
                               [logits, n, num, den, p = std::move(p), tgt = std::move(tgt)](Graph& g, int self) {
    const double up = g.grad_buffer(self)[0];
    Tensor& gl = g.grad_buffer(logits.id());
    for (std::size_t i = 0; i < n; ++i) {
      // d/dp_i [−num/den] = −(2q_i·den − num)/den²
      const double dp = -(2.0 * tgt[i] * den - num) / (den * den);
      gl[i] += static_cast<float>(up * dp * p[i] * (1.0 - p[i]));
    }
  }, "dice_with_logits");
}

}  // namespace badseg::ad
