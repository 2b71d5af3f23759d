#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "badseg/tensor.hpp"

/// Tape-based reverse-mode differentiation over coarse tensor ops.
///
/// A Graph records every op applied during one forward pass. Nodes created
/// from constants never receive gradients, and ops whose inputs are all
/// constant skip their backward closures, so frozen sub-networks cost only
/// their forward pass.
namespace badseg::ad {

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const noexcept { return graph_ != nullptr; }
  int id() const noexcept { return id_; }
  Graph& graph() const noexcept { return *graph_; }
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// References caller-owned storage which must outlive the graph.
  Var constant_ref(const Tensor& value);
  Var variable(Tensor value);
  Var variable_ref(const Tensor& value);

  /// Appends an op result. `fn` runs during backward only if some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn, std::string_view op);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward fn, std::string_view op);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient accumulated at `v` by the last backward(); zeros if none reached it.
  Tensor grad(Var v) const;
  /// Mutable accumulation buffer, allocated (zeroed) on first use.
  Tensor& grad_buffer(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  void backward(Var scalar_loss);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  Var push(Node node);
  std::vector<Node> nodes_;
};

// Elementwise (identical shapes)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);

/// x[m,n] + b[n] broadcast over rows.
Var add_row_bias(Var x, Var b);
/// x[C,H,W] + b[C] broadcast over spatial positions.
Var add_channel_bias(Var x, Var b);

/// op(a)·op(b) for 2-D operands.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
/// x[m,k]·w[k,n] + b[n]; `b` may be invalid.
Var linear(Var x, Var w, Var b);

Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);

Var transpose(Var a);
Var reshape(Var a, std::vector<int> shape);
Var slice_cols(Var a, int begin, int end);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int begin, int end);
Var concat_rows(const std::vector<Var>& parts);

/// [m,n] → [1,n] column means.
Var mean_rows(Var a);
Var sum_all(Var a);
Var mean_all(Var a);
/// Σ (a−b)².
Var squared_distance(Var a, Var b);
/// mean (a−b)².
Var mse(Var a, Var b);

/// x[Cin,H,W] ⋆ w[Cout,Cin,k,k] (+ b[Cout]), zero padding.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
/// x[C,H,W] → [C,H·s,W·s] by pixel replication.
Var upsample_nearest(Var x, int factor);
/// Bilinear resize with half-pixel centers and edge clamping.
Var resize_bilinear(Var x, int out_h, int out_w);

/// Mean binary cross entropy between σ(logits) (clamped to [1e−7, 1−1e−7]) and q.
Var bce_with_logits(Var logits, const Tensor& target);
/// 1 − (2Σpq + ε)/(Σp + Σq + ε) with p = σ(logits).
Var dice_with_logits(Var logits, const Tensor& target, float eps);

// Plain-tensor helpers shared with non-differentiable code paths.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor sigmoid(const Tensor& x);

}  // namespace badseg::ad
