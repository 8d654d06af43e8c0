#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Graph records every op applied to its variables. Parameters are leaves
// that reference externally owned tensors; backward() accumulates their
// gradients into a caller-provided list aligned with the parameter list.
// Graphs built with record=false compute values only.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg::ad {

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(std::span<const Tensor> params = {}, bool record = true);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var param(std::size_t index);

  const Tensor& value(Var v) const { return value(v.id); }
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Upstream gradient slot of a node, zero-initialised on first access.
  Tensor& grad(std::size_t id);

  /// Appends a node. `fn` is dropped when no input requires a gradient.
  Var emit(Tensor value, const char* op, std::span<const std::size_t> inputs, BackwardFn fn);

  /// Backpropagates from a 1x1 node, adding parameter gradients into
  /// `param_grads` (one tensor per parameter, shaped like it).
  void backward(Var loss, std::vector<Tensor>& param_grads);

  /// Throws NumericError naming `layer` if the value holds NaN or inf.
  void check_finite(Var v, const std::string& layer) const;

  /// Test hook: multiplies the upstream gradient entering every node of
  /// kind `op` by `factor` during backward().
  void scale_backward_of(std::string op, double factor);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    const char* op = "";
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<std::size_t> param_index;
  };

  std::vector<Node> nodes_;
  std::span<const Tensor> params_;
  std::vector<std::optional<std::size_t>> param_nodes_;
  bool record_;
  std::string corrupt_op_;
  double corrupt_factor_ = 1.0;
};

std::vector<Tensor> zero_gradients(std::span<const Tensor> params);

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
/// x * W + b, with W stored (in x out) and b (1 x out).
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var mul(Var a, Var b);
Var square(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var layer_norm(Var x, Var gamma, Var beta);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var mean_rows(Var a);
Var sum_all(Var a);

/// Multi-head scaled dot-product attention. q (m x d), k and v (n x d).
/// `key_bias` (length n or empty) is added to every head's logits.
Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         std::span<const double> key_bias);

/// Bilinear resampling of a (grid_rows*grid_cols x c) token map to
/// (height*width x c), sampling at pixel centres (half-pixel alignment).
Var upsample_bilinear(Var tokens, std::size_t grid_rows, std::size_t grid_cols,
                      std::size_t height, std::size_t width);

/// Mean binary cross-entropy of sigmoid(logits) against {0,1} targets.
Var bce_with_logits(Var logits, const Tensor& target);
/// Soft Dice (2 sum(p g) + eps) / (sum p + sum g + eps) with p = sigmoid(logits).
Var soft_dice(Var logits, const Tensor& target, double eps);

}  // namespace flowseg::ad
