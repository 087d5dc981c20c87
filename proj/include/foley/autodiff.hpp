#pragma once

#include <functional>
#include <vector>

#include "foley/tensor.hpp"

namespace foley::ad {

class Tape;

/// Handle to a tape node; cheap to copy, invalid by default.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  /// Gradient written by Tape::backward; zero tensor if this node was never reached.
  Tensor grad() const;
};

/// Reverse-mode tape over dense tensors. Nodes are appended in forward order;
/// backward runs closures in reverse creation order, so any graph built
/// front-to-back is differentiated correctly. One tape per training step.
class Tape {
public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    bool needs_grad = false;
    std::function<void()> back;
  };

  Var input(Tensor value, bool needs_grad = false);
  Var make(Tensor value, bool needs_grad, std::function<void()> back);

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

  /// Accumulate into a node's gradient buffer (allocating zeros on first touch).
  void accumulate(int id, const Tensor& g);
  Tensor& grad_buffer(int id);

  /// Backpropagate from a scalar loss node.
  void backward(Var loss);

private:
  std::vector<Node> nodes_;
};

// Elementwise and structural ops. Unless noted, shapes must match exactly.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::int64_t r0, std::int64_t r1);
Var concat_rows(Var a, Var b);
Var stack_rows(const std::vector<Var>& rows);  // N vectors of length C -> (N, C)
Var row_bias_add(Var x, Var b);                // (R, C) + (C)
Var channel_bias_add(Var x, Var b);            // (C, ...) + (C)
Var silu(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var log_(Var a);
Var exp_(Var a);
Var sum(Var a);
Var mean(Var a);
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);  // (R, C) -> (R)
Var diag(Var a);            // (N, N) -> (N)
Var normalize_rows(Var a);  // rows to unit L2 norm; zero-norm rows are an error
Var max_over_rows(Var a);   // (T, C) -> (C), gradient routed to the argmax row
Var mean_over_rows(Var a);  // (T, C) -> (C)
Var mean_over_last(Var a);  // (..., W) -> (...)
Var select(Var a, std::int64_t flat_index);  // -> scalar

/// 2-D convolution, x (Ci,H,W), w (Co,Ci,kh,kw), optional bias (Co); implemented
/// as im2col + GEMM.
Var conv2d(Var x, Var w, Var b, int stride_h, int stride_w, int pad_h, int pad_w);
/// 3-D convolution, x (Ci,D,H,W), w (Co,Ci,kd,kh,kw).
Var conv3d(Var x, Var w, Var b, int stride_d, int stride_h, int stride_w, int pad_d, int pad_h, int pad_w);
Var upsample2x(Var x);  // (C,H,W) nearest-neighbor to (C,2H,2W)
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat_channels(Var a, Var b);  // (C1,H,W) + (C2,H,W) -> (C1+C2,H,W)

}  // namespace foley::ad
