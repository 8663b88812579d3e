#pragma once

#include <string>

#include "svqa/core/autodiff.hpp"
#include "svqa/core/ops.hpp"
#include "svqa/core/rng.hpp"

// Thin layer wrappers. Weights are drawn uniform in +-1/sqrt(fan_in).
namespace svqa::nn {

Array uniform_init(Shape shape, double bound, Rng& rng);

struct Linear {
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng);
  Var operator()(Tape& tape, Var x) const;

  Parameter* weight = nullptr;  // [in, out]
  Parameter* bias = nullptr;    // [out]
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& name, std::int64_t in_ch, std::int64_t out_ch, int kernel,
         int stride, int pad, Rng& rng);
  Var operator()(Tape& tape, Var x) const;

  Parameter* weight = nullptr;  // [out, in, k, k]
  Parameter* bias = nullptr;
  ops::Conv2dSpec spec;
};

struct ConvTranspose2d {
  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterStore& store, const std::string& name, std::int64_t in_ch, std::int64_t out_ch, int kernel,
                  int stride, int pad, Rng& rng);
  Var operator()(Tape& tape, Var x) const;

  Parameter* weight = nullptr;  // [in, out, k, k]
  Parameter* bias = nullptr;
  ops::Conv2dSpec spec;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::int64_t dim);
  Var operator()(Tape& tape, Var x) const;

  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
};

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct TransformerBlock {
  TransformerBlock() = default;
  TransformerBlock(ParameterStore& store, const std::string& name, std::int64_t width, int heads, Rng& rng);
  /// x is [B, S, d].
  Var operator()(Tape& tape, Var x, const ops::AttentionMask& mask) const;

  LayerNorm ln1, ln2;
  Linear qkv;  // d -> 3d
  Linear proj;
  Linear fc1;  // d -> 4d
  Linear fc2;
  int heads = 1;
};

}  // namespace svqa::nn
