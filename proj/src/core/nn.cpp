#include "svqa/core/nn.hpp"

#include <cmath>

namespace svqa::nn {

Array uniform_init(Shape shape, double bound, Rng& rng) {
  Array a(std::move(shape));
  for (auto& v : a.values()) v = rng.uniform(-bound, bound);
  return a;
}

Linear::Linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = &store.add(name + ".w", uniform_init({in, out}, bound, rng));
  bias = &store.add(name + ".b", uniform_init({out}, bound, rng));
}

Var Linear::operator()(Tape& tape, Var x) const {
  return ops::add_bias(ops::matmul(x, tape.param(*weight)), tape.param(*bias));
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, std::int64_t in_ch, std::int64_t out_ch, int kernel,
               int stride, int pad, Rng& rng)
    : spec{stride, stride, pad, pad} {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
  weight = &store.add(name + ".w", uniform_init({out_ch, in_ch, kernel, kernel}, bound, rng));
  bias = &store.add(name + ".b", uniform_init({out_ch}, bound, rng));
}

Var Conv2d::operator()(Tape& tape, Var x) const {
  return ops::conv2d(x, tape.param(*weight), tape.param(*bias), spec);
}

ConvTranspose2d::ConvTranspose2d(ParameterStore& store, const std::string& name, std::int64_t in_ch,
                                 std::int64_t out_ch, int kernel, int stride, int pad, Rng& rng)
    : spec{stride, stride, pad, pad} {
  // Each output pixel receives in_ch * (k/stride)^2 contributions.
  const double taps = static_cast<double>(in_ch * kernel * kernel) / static_cast<double>(stride * stride);
  const double bound = 1.0 / std::sqrt(taps);
  weight = &store.add(name + ".w", uniform_init({in_ch, out_ch, kernel, kernel}, bound, rng));
  bias = &store.add(name + ".b", uniform_init({out_ch}, bound, rng));
}

Var ConvTranspose2d::operator()(Tape& tape, Var x) const {
  return ops::conv_transpose2d(x, tape.param(*weight), tape.param(*bias), spec);
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::int64_t dim) {
  gain = &store.add(name + ".g", Array({dim}, 1.0));
  bias = &store.add(name + ".b", Array({dim}, 0.0));
}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return ops::layer_norm(x, tape.param(*gain), tape.param(*bias));
}

TransformerBlock::TransformerBlock(ParameterStore& store, const std::string& name, std::int64_t width, int heads_,
                                   Rng& rng)
    : ln1(store, name + ".ln1", width),
      ln2(store, name + ".ln2", width),
      qkv(store, name + ".qkv", width, 3 * width, rng),
      proj(store, name + ".proj", width, width, rng),
      fc1(store, name + ".fc1", width, 4 * width, rng),
      fc2(store, name + ".fc2", 4 * width, width, rng),
      heads(heads_) {}

Var TransformerBlock::operator()(Tape& tape, Var x, const ops::AttentionMask& mask) const {
  const std::int64_t d = x.dim(2);
  Var h = qkv(tape, ln1(tape, x));
  Var q = ops::narrow(h, 2, 0, d);
  Var k = ops::narrow(h, 2, d, d);
  Var v = ops::narrow(h, 2, 2 * d, d);
  x = ops::add(x, proj(tape, ops::attention(q, k, v, heads, mask)));
  return ops::add(x, fc2(tape, ops::gelu(fc1(tape, ln2(tape, x)))));
}

}  // namespace svqa::nn
