#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "svqa/core/autodiff.hpp"

// Differentiable primitives. Every op validates shapes (ShapeError naming the
// op) and checks its output for non-finite values (NumericError).
namespace svqa::ops {

Var matmul(Var a, Var b);  ///< [..., k] x [k, n] -> [..., n]
Var transpose(Var a);      ///< 2-D only
Var permute(Var a, std::vector<int> perm);
Var reshape(Var a, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_bias(Var x, Var bias);  ///< bias broadcast along the last axis
Var scale(Var a, double c);
Var mul_scalar(Var a, Var s);  ///< s has exactly one element
Var exp(Var a);

Var relu(Var a);
Var gelu(Var a);  ///< exact form x * Phi(x)
Var tanh(Var a);
Var sigmoid(Var a);

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax(Var x);  ///< along the last axis
Var l2_normalize(Var x, double eps = 1e-12);  ///< x / sqrt(sum x^2 + eps) along the last axis

/// Mean over rows of -log softmax(logits)[target]; logits are [N, C].
Var cross_entropy(Var logits, std::span<const int> targets);
/// Mean binary cross-entropy with logits; targets in [0, 1], same shape.
Var bce_with_logits(Var logits, const Array& targets);
Var mse(Var a, Var b);
Var sum(Var a);
Var mean(Var a);

/// Rows of `table` ([V, d]) selected by `ids` -> [ids.size(), d].
Var embedding(Var table, std::span<const int> ids);
Var concat(std::span<const Var> xs, int axis);
Var narrow(Var x, int axis, std::int64_t start, std::int64_t length);

struct Conv2dSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

/// x [N,C,H,W], weight [O,C,kh,kw], bias [O] (bias may be an invalid Var).
Var conv2d(Var x, Var weight, Var bias, Conv2dSpec spec);
/// x [N,C,H,W], weight [C,O,kh,kw], bias [O]; output (H-1)*stride - 2*pad + k.
Var conv_transpose2d(Var x, Var weight, Var bias, Conv2dSpec spec);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);

struct AttentionMask {
  bool causal = false;
  /// Keys below this position are visible to every query when causal.
  std::int64_t prefix = 0;
  /// Optional [B*S] key validity (1 = attendable).
  std::vector<std::uint8_t> key_valid;

  bool allows(std::int64_t batch, std::int64_t seq, std::int64_t query, std::int64_t key) const {
    if (causal && key > query && key >= prefix) return false;
    if (!key_valid.empty() && key_valid[static_cast<std::size_t>(batch * seq + key)] == 0) return false;
    return true;
  }
};

/// Multi-head scaled dot-product attention over q, k, v of shape [B, S, d].
Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask);

/// Forward identity, zero backward contribution.
Var stop_gradient(Var a);
/// Forward returns `quantized`; backward routes the gradient to `pre_quant` unchanged.
Var straight_through(Var quantized, Var pre_quant);

}  // namespace svqa::ops
