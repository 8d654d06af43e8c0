#include "flowseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowseg/errors.hpp"
#include "flowseg/kernels.hpp"

namespace flowseg::ad {

Graph::Graph(std::span<const Tensor> params, bool record)
    : params_(params), param_nodes_(params.size()), record_(record) {
  nodes_.reserve(256);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(std::size_t index) {
  if (index >= params_.size()) throw ArgumentError("parameter index out of range");
  if (param_nodes_[index]) return {this, *param_nodes_[index]};
  Node n;
  n.external = &params_[index];
  n.op = "param";
  n.requires_grad = record_;
  n.param_index = index;
  nodes_.push_back(std::move(n));
  param_nodes_[index] = nodes_.size() - 1;
  return {this, nodes_.size() - 1};
}

const Tensor& Graph::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Tensor& Graph::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(value(id));
  return n.grad;
}

Var Graph::emit(Tensor value, const char* op, std::span<const std::size_t> inputs,
                BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.op = op;
  if (record_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](std::size_t i) { return nodes_[i].requires_grad; });
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Graph::backward(Var loss, std::vector<Tensor>& param_grads) {
  if (!record_) throw UsageError("backward on a graph built without recording");
  if (value(loss).size() != 1) throw ShapeError("backward needs a scalar loss");
  if (param_grads.size() != params_.size()) throw ShapeError("gradient list size mismatch");
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (!corrupt_op_.empty() && corrupt_op_ == n.op) n.grad *= corrupt_factor_;
    if (n.param_index) {
      param_grads[*n.param_index] += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

void Graph::check_finite(Var v, const std::string& layer) const {
  if (!value(v).all_finite()) {
    throw NumericError(layer, "non-finite value in layer '" + layer + "'");
  }
}

void Graph::scale_backward_of(std::string op, double factor) {
  corrupt_op_ = std::move(op);
  corrupt_factor_ = factor;
}

std::vector<Tensor> zero_gradients(std::span<const Tensor> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(Tensor::zeros_like(p));
  return out;
}

namespace {

Graph& graph_of(Var a) {
  if (!a.graph) throw UsageError("variable not attached to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw UsageError("variables belong to different graphs");
  return graph_of(a);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " and " +
                     std::to_string(bv.rows()));
  }
  Tensor out(m, n);
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
  const std::size_t ins[] = {a.id, b.id};
  return g.emit(std::move(out), "matmul", ins, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (g.requires_grad(ia)) kernels::gemm_nt(up.data(), bv.data(), g.grad(ia).data(), m, n, k, true);
    if (g.requires_grad(ib)) kernels::gemm_tn(av.data(), up.data(), g.grad(ib).data(), k, m, n, true);
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  out += bv;
  const std::size_t ins[] = {a.id, b.id};
  return g.emit(std::move(out), "add", ins, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += up;
    if (g.requires_grad(ib)) g.grad(ib) += up;
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ins[] = {a.id, b.id};
  return g.emit(std::move(out), "sub", ins, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += up;
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad(ib);
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] -= up[i];
    }
  });
}

Var add_row(Var a, Var row) {
  Graph& g = graph_of(a, row);
  const Tensor& av = g.value(a);
  const Tensor& rv = g.value(row);
  if (rv.size() != av.cols()) throw ShapeError("add_row: row length mismatch");
  Tensor out = av;
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += rv[c];
  const std::size_t ins[] = {a.id, row.id};
  return g.emit(std::move(out), "add_row", ins, [ia = a.id, ir = row.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    if (g.requires_grad(ia)) g.grad(ia) += up;
    if (g.requires_grad(ir)) {
      Tensor& gr = g.grad(ir);
      const std::size_t rows = up.rows(), cols = up.cols();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gr[c] += up[r * cols + c];
    }
  });
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  Tensor out = g.value(a);
  out *= s;
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "scale", ins, [ia = a.id, s](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += s * up[i];
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ins[] = {a.id, b.id};
  return g.emit(std::move(out), "mul", ins, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad(ia);
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad(ib);
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * av[i];
    }
  });
}

Var square(Var a) {
  Graph& g = graph_of(a);
  Tensor out = map(g.value(a), [](double x) { return x * x; });
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "square", ins, [ia = a.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    const Tensor& av = g.value(ia);
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += 2.0 * av[i] * up[i];
  });
}

Var gelu(Var a) {
  Graph& g = graph_of(a);
  Tensor out = map(g.value(a), [](double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  });
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "gelu", ins, [ia = a.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    const Tensor& av = g.value(ia);
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < up.size(); ++i) {
      const double x = av[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double d = 0.5 * (1.0 + t) +
                       0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga[i] += up[i] * d;
    }
  });
}

Var sigmoid(Var a) {
  Graph& g = graph_of(a);
  Tensor out = map(g.value(a), [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "sigmoid", ins, [ia = a.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * y[i] * (1.0 - y[i]);
  });
}

Var layer_norm(Var x, Var gamma, Var beta) {
  constexpr double kEps = 1e-5;
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Tensor& xv = g.value(x);
  const Tensor& gv = g.value(gamma);
  const Tensor& bv = g.value(beta);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gv.size() != cols || bv.size() != cols) throw ShapeError("layer_norm: affine size mismatch");
  Tensor normed(rows, cols);
  std::vector<double> inv_std(rows);
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t c = 0; c < cols; ++c) {
      normed(r, c) = (xv(r, c) - mean) * inv_std[r];
      out(r, c) = gv[c] * normed(r, c) + bv[c];
    }
  }
  const std::size_t ins[] = {x.id, gamma.id, beta.id};
  return g.emit(std::move(out), "layer_norm", ins,
                [ix = x.id, ig = gamma.id, ib = beta.id, normed = std::move(normed),
                 inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
                  const Tensor& up = g.grad(self);
                  const Tensor& gv = g.value(ig);
                  const std::size_t rows = up.rows(), cols = up.cols();
                  if (g.requires_grad(ig)) {
                    Tensor& gg = g.grad(ig);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gg[c] += up(r, c) * normed(r, c);
                  }
                  if (g.requires_grad(ib)) {
                    Tensor& gb = g.grad(ib);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += up(r, c);
                  }
                  if (g.requires_grad(ix)) {
                    Tensor& gx = g.grad(ix);
                    const double inv_n = 1.0 / static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double d = up(r, c) * gv[c];
                        mean_d += d;
                        mean_dx += d * normed(r, c);
                      }
                      mean_d *= inv_n;
                      mean_dx *= inv_n;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const double d = up(r, c) * gv[c];
                        gx(r, c) += inv_std[r] * (d - mean_d - normed(r, c) * mean_dx);
                      }
                    }
                  }
                });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  Graph& g = graph_of(parts.front());
  const std::size_t cols = g.value(parts.front()).cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    graph_of(parts.front(), p);
    const Tensor& v = g.value(p);
    if (v.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += v.rows();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + offset);
    offset += v.size();
  }
  return g.emit(std::move(out), "concat_rows", ids, [ids](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t n = g.value(id).size();
      if (g.requires_grad(id)) {
        Tensor& gi = g.grad(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += up[offset + i];
      }
      offset += n;
    }
  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row mismatch");
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out(rows, ca + cb);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out(r, c) = av(r, c);
    for (std::size_t c = 0; c < cb; ++c) out(r, ca + c) = bv(r, c);
  }
  const std::size_t ins[] = {a.id, b.id};
  return g.emit(std::move(out), "concat_cols", ins,
                [ia = a.id, ib = b.id, ca, cb](Graph& g, std::size_t self) {
                  const Tensor& up = g.grad(self);
                  const std::size_t rows = up.rows();
                  if (g.requires_grad(ia)) {
                    Tensor& ga = g.grad(ia);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < ca; ++c) ga(r, c) += up(r, c);
                  }
                  if (g.requires_grad(ib)) {
                    Tensor& gb = g.grad(ib);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cb; ++c) gb(r, c) += up(r, ca + c);
                  }
                });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Graph& g = graph_of(a);
  const Tensor& av = g.value(a);
  if (start + count > av.rows()) throw ShapeError("slice_rows out of range");
  const std::size_t cols = av.cols();
  Tensor out(count, cols);
  std::copy(av.data().begin() + start * cols, av.data().begin() + (start + count) * cols,
            out.data().begin());
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "slice_rows", ins, [ia = a.id, start, cols](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < up.size(); ++i) ga[start * cols + i] += up[i];
  });
}

Var mean_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = g.value(a);
  const std::size_t rows = av.rows(), cols = av.cols();
  if (rows == 0) throw ShapeError("mean_rows of empty tensor");
  Tensor out(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += av(r, c);
  out *= 1.0 / static_cast<double>(rows);
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "mean_rows", ins, [ia = a.id](Graph& g, std::size_t self) {
    const Tensor& up = g.grad(self);
    Tensor& ga = g.grad(ia);
    const std::size_t rows = ga.rows(), cols = ga.cols();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga(r, c) += up[c] * inv;
  });
}

Var sum_all(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = g.value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  Tensor out(1, 1, s);
  const std::size_t ins[] = {a.id};
  return g.emit(std::move(out), "sum_all", ins, [ia = a.id](Graph& g, std::size_t self) {
    const double up = g.grad(self)[0];
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += up;
  });
}

Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         std::span<const double> key_bias) {
  Graph& g = graph_of(q, k);
  graph_of(q, v);
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  const std::size_t m = qv.rows(), n = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != n) {
    throw ShapeError("attention: q/k/v dimension mismatch");
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: heads must divide width");
  if (!key_bias.empty() && key_bias.size() != n) throw ShapeError("attention: bias length != keys");
  if (n == 0) throw ShapeError("attention: no keys");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Per-head contiguous copies; probabilities kept for backward.
  auto split = [&](const Tensor& t, std::size_t rows, std::size_t h) {
    std::vector<double> out(rows * dh);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < dh; ++c) out[r * dh + c] = t(r, h * dh + c);
    return out;
  };
  std::vector<std::vector<double>> probs(heads);
  Tensor out(m, d);
  std::vector<double> head_out(m * dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = split(qv, m, h);
    const auto kh = split(kv, n, h);
    const auto vh = split(vv, n, h);
    std::vector<double>& p = probs[h];
    p.assign(m * n, 0.0);
    kernels::gemm_nt(qh, kh, p, m, dh, n, false);
    for (std::size_t i = 0; i < m; ++i) {
      double* row = p.data() + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = row[j] * inv_sqrt + (key_bias.empty() ? 0.0 : key_bias[j]);
        mx = std::max(mx, row[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    kernels::gemm_nn(p, vh, head_out, m, n, dh, false);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < dh; ++c) out(r, h * dh + c) = head_out[r * dh + c];
  }
  const std::size_t ins[] = {q.id, k.id, v.id};
  return g.emit(
      std::move(out), "attention", ins,
      [iq = q.id, ik = k.id, iv = v.id, heads, dh, inv_sqrt, probs = std::move(probs)](
          Graph& g, std::size_t self) {
        const Tensor& up = g.grad(self);
        const Tensor& qv = g.value(iq);
        const Tensor& kv = g.value(ik);
        const Tensor& vv = g.value(iv);
        const std::size_t m = qv.rows(), n = kv.rows();
        auto split = [&](const Tensor& t, std::size_t rows, std::size_t h) {
          std::vector<double> out(rows * dh);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < dh; ++c) out[r * dh + c] = t(r, h * dh + c);
          return out;
        };
        auto scatter = [&](Tensor& t, const std::vector<double>& src, std::size_t rows,
                           std::size_t h) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < dh; ++c) t(r, h * dh + c) += src[r * dh + c];
        };
        std::vector<double> dp(m * n), dq(m * dh), dk(n * dh), dv(n * dh);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto qh = split(qv, m, h);
          const auto kh = split(kv, n, h);
          const auto vh = split(vv, n, h);
          const auto doh = split(up, m, h);
          const std::vector<double>& p = probs[h];
          if (g.requires_grad(iv)) {
            kernels::gemm_tn(p, doh, dv, n, m, dh, false);
            scatter(g.grad(iv), dv, n, h);
          }
          kernels::gemm_nt(doh, vh, dp, m, dh, n, false);
          // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale.
          for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
              dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * inv_sqrt;
          }
          if (g.requires_grad(iq)) {
            kernels::gemm_nn(dp, kh, dq, m, n, dh, false);
            scatter(g.grad(iq), dq, m, h);
          }
          if (g.requires_grad(ik)) {
            kernels::gemm_tn(dp, qh, dk, n, m, dh, false);
            scatter(g.grad(ik), dk, n, h);
          }
        }
      });
}

namespace {

struct BilinearTap {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
};

std::vector<BilinearTap> bilinear_taps(std::size_t gr, std::size_t gc, std::size_t h,
                                       std::size_t w) {
  std::vector<BilinearTap> taps(h * w);
  auto axis = [](std::size_t pixel, std::size_t pixels, std::size_t cells, std::size_t& lo,
                 std::size_t& hi, double& frac) {
    double pos = (static_cast<double>(pixel) + 0.5) * static_cast<double>(cells) /
                     static_cast<double>(pixels) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(cells - 1));
    lo = static_cast<std::size_t>(std::floor(pos));
    hi = std::min(lo + 1, cells - 1);
    frac = pos - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < h; ++y) {
    std::size_t r0, r1;
    double fy;
    axis(y, h, gr, r0, r1, fy);
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t c0, c1;
      double fx;
      axis(x, w, gc, c0, c1, fx);
      taps[y * w + x] = {r0 * gc + c0,
                         r0 * gc + c1,
                         r1 * gc + c0,
                         r1 * gc + c1,
                         (1 - fy) * (1 - fx),
                         (1 - fy) * fx,
                         fy * (1 - fx),
                         fy * fx};
    }
  }
  return taps;
}

}  // namespace

Var upsample_bilinear(Var tokens, std::size_t grid_rows, std::size_t grid_cols,
                      std::size_t height, std::size_t width) {
  Graph& g = graph_of(tokens);
  const Tensor& tv = g.value(tokens);
  if (tv.rows() != grid_rows * grid_cols) throw ShapeError("upsample: token count != grid");
  const std::size_t c = tv.cols();
  auto taps = bilinear_taps(grid_rows, grid_cols, height, width);
  Tensor out(height * width, c);
  for (std::size_t p = 0; p < taps.size(); ++p) {
    const BilinearTap& t = taps[p];
    for (std::size_t j = 0; j < c; ++j) {
      out(p, j) = t.w00 * tv(t.i00, j) + t.w01 * tv(t.i01, j) + t.w10 * tv(t.i10, j) +
                  t.w11 * tv(t.i11, j);
    }
  }
  const std::size_t ins[] = {tokens.id};
  return g.emit(std::move(out), "upsample", ins,
                [it = tokens.id, taps = std::move(taps)](Graph& g, std::size_t self) {
                  const Tensor& up = g.grad(self);
                  Tensor& gt = g.grad(it);
                  const std::size_t c = up.cols();
                  for (std::size_t p = 0; p < taps.size(); ++p) {
                    const BilinearTap& t = taps[p];
                    for (std::size_t j = 0; j < c; ++j) {
                      const double u = up(p, j);
                      gt(t.i00, j) += t.w00 * u;
                      gt(t.i01, j) += t.w01 * u;
                      gt(t.i10, j) += t.w10 * u;
                      gt(t.i11, j) += t.w11 * u;
                    }
                  }
                });
}

Var bce_with_logits(Var logits, const Tensor& target) {
  Graph& g = graph_of(logits);
  const Tensor& lv = g.value(logits);
  if (lv.size() != target.size()) throw ShapeError("bce: logits/target size mismatch");
  const double n = static_cast<double>(lv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double x = lv[i];
    s += std::max(x, 0.0) - x * target[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const std::size_t ins[] = {logits.id};
  return g.emit(Tensor(1, 1, s / n), "bce", ins, [il = logits.id, target, n](Graph& g, std::size_t self) {
    const double up = g.grad(self)[0];
    const Tensor& lv = g.value(il);
    Tensor& gl = g.grad(il);
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-lv[i]));
      gl[i] += up * (p - target[i]) / n;
    }
  });
}

Var soft_dice(Var logits, const Tensor& target, double eps) {
  Graph& g = graph_of(logits);
  const Tensor& lv = g.value(logits);
  if (lv.size() != target.size()) throw ShapeError("soft_dice: logits/target size mismatch");
  double spg = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-lv[i]));
    spg += p * target[i];
    sp += p;
    sg += target[i];
  }
  const double num = 2.0 * spg + eps;
  const double den = sp + sg + eps;
  const std::size_t ins[] = {logits.id};
  return g.emit(Tensor(1, 1, num / den), "soft_dice", ins,
                [il = logits.id, target, num, den](Graph& g, std::size_t self) {
                  const double up = g.grad(self)[0];
                  const Tensor& lv = g.value(il);
                  Tensor& gl = g.grad(il);
                  for (std::size_t i = 0; i < lv.size(); ++i) {
                    const double p = 1.0 / (1.0 + std::exp(-lv[i]));
                    const double dd_dp = (2.0 * target[i] * den - num) / (den * den);
                    gl[i] += up * dd_dp * p * (1.0 - p);
                  }
                });
}

}  // namespace flowseg::ad
