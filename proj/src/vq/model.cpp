#include <cmath>

#include <fmt/format.h>

#include "svqa/vq/specvqgan.hpp"

namespace svqa::vq {

void VqConfig::validate() const {
  auto fail = [](std::string msg) { throw std::invalid_argument("codebook config: " + msg); };
  if (codebook_size < 2) fail(fmt::format("size must be >= 2, got {}", codebook_size));
  if (n_z < 1) fail("n_z must be positive");
  for (int c : channels)
    if (c < 1) fail("channels must be positive");
  if (disc_channels < 1) fail("disc_channels must be positive");
  if (beta < 0.0 || lambda_adv < 0.0 || lambda_perc < 0.0) fail("loss weights must be nonnegative");
  if (warmup_steps < 0 || steps < 0) fail("step counts must be nonnegative");
  if (batch < 1) fail("batch must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
}

SpecVqGan::SpecVqGan(const VqConfig& cfg, std::int64_t mel_bands, std::int64_t frames)
    : cfg_(cfg), mel_bands_(mel_bands), frames_(frames), m_(mel_bands / 8), t_(frames / 8) {
  cfg_.validate();
  if (mel_bands % 8 != 0 || frames % 8 != 0 || m_ < 1 || t_ < 1) {
    throw ShapeError(fmt::format("specvqgan: grid {}x{} must be divisible by 8 on both axes", mel_bands, frames));
  }
  Rng rng(cfg.seed, 0x5e9);
  const auto& ch = cfg.channels;
  enc_down_[0] = nn::Conv2d(store_, "enc.down0", 1, ch[0], 4, 2, 1, rng);
  enc_down_[1] = nn::Conv2d(store_, "enc.down1", ch[0], ch[1], 4, 2, 1, rng);
  enc_down_[2] = nn::Conv2d(store_, "enc.down2", ch[1], ch[2], 4, 2, 1, rng);
  enc_out_ = nn::Conv2d(store_, "enc.out", ch[2], cfg.n_z, 3, 1, 1, rng);
  dec_in_ = nn::Conv2d(store_, "dec.in", cfg.n_z, ch[2], 3, 1, 1, rng);
  dec_up_[0] = nn::ConvTranspose2d(store_, "dec.up0", ch[2], ch[1], 4, 2, 1, rng);
  dec_up_[1] = nn::ConvTranspose2d(store_, "dec.up1", ch[1], ch[0], 4, 2, 1, rng);
  dec_up_[2] = nn::ConvTranspose2d(store_, "dec.up2", ch[0], 1, 4, 2, 1, rng);
  disc_[0] = nn::Conv2d(store_, "disc.conv0", 1, cfg.disc_channels, 4, 2, 1, rng);
  disc_[1] = nn::Conv2d(store_, "disc.conv1", cfg.disc_channels, 2 * cfg.disc_channels, 4, 2, 1, rng);
  disc_[2] = nn::Conv2d(store_, "disc.out", 2 * cfg.disc_channels, 1, 3, 1, 1, rng);
  codebook_ = Codebook(store_, cfg.codebook_size, cfg.n_z, rng);
}

Var SpecVqGan::encode(Tape& tape, Var x) const {
  if (x.shape().size() != 4 || x.dim(1) != 1 || x.dim(2) != mel_bands_ || x.dim(3) != frames_) {
    throw ShapeError(fmt::format("encode: expected [B, 1, {}, {}], got {}", mel_bands_, frames_, shape_str(x.shape())));
  }
  Var h = x;
  for (const auto& c : enc_down_) h = ops::relu(c(tape, h));
  return enc_out_(tape, h);
}

Var SpecVqGan::decode(Tape& tape, Var z) const {
  Var h = ops::relu(dec_in_(tape, z));
  h = ops::relu(dec_up_[0](tape, h));
  h = ops::relu(dec_up_[1](tape, h));
  return ops::tanh(dec_up_[2](tape, h));
}

Var SpecVqGan::discriminate(Tape& tape, Var x) const {
  Var h = ops::relu(disc_[0](tape, x));
  h = ops::relu(disc_[1](tape, h));
  return disc_[2](tape, h);
}

Array SpecVqGan::encode(const Array& mel) const {
  Tape t;
  Var z = encode(t, t.constant(mel.reshaped({1, 1, mel.dim(0), mel.dim(1)})));
  return ops::permute(z, {0, 2, 3, 1}).value().reshaped({m_, t_, cfg_.n_z});
}

std::pair<IndexGrid, Array> SpecVqGan::quantize(const Array& latent) {
  if (latent.shape() != Shape{m_, t_, cfg_.n_z}) {
    throw ShapeError(fmt::format("quantize: latent {} does not match [{}, {}, {}]", shape_str(latent.shape()), m_, t_, cfg_.n_z));
  }
  Quantized q = vq::quantize(latent.reshaped({m_ * t_, cfg_.n_z}), codebook_);
  return {IndexGrid{m_, t_, std::move(q.indices)}, std::move(q.z_q).reshaped({m_, t_, cfg_.n_z})};
}

Array SpecVqGan::reconstruct(const Array& z_q) const {
  if (z_q.shape() != Shape{m_, t_, cfg_.n_z}) {
    throw ShapeError(fmt::format("reconstruct: latent {} does not match [{}, {}, {}]", shape_str(z_q.shape()), m_, t_, cfg_.n_z));
  }
  Tape t;
  Var z = ops::permute(t.constant(z_q.reshaped({1, m_, t_, cfg_.n_z})), {0, 3, 1, 2});
  return decode(t, z).value().reshaped({mel_bands_, frames_});
}

Array SpecVqGan::decode_indices(const IndexGrid& grid) const {
  if (grid.m != m_ || grid.t != t_ || static_cast<std::int64_t>(grid.ids.size()) != m_ * t_) {
    throw ShapeError(fmt::format("decode: index grid {}x{} does not match {}x{}", grid.m, grid.t, m_, t_));
  }
  return reconstruct(lookup(grid.ids, codebook_).reshaped({m_, t_, cfg_.n_z}));
}

std::vector<IndexGrid> SpecVqGan::tokenize(std::span<const Array* const> mels) const {
  std::vector<IndexGrid> out;
  constexpr std::size_t kChunk = 16;
  for (std::size_t i = 0; i < mels.size(); i += kChunk) {
    const auto chunk = mels.subspan(i, std::min(kChunk, mels.size() - i));
    const auto b = static_cast<std::int64_t>(chunk.size());
    Tape t;
    Array x = stack(chunk);
    Var cells = to_cells(encode(t, t.constant(std::move(x).reshaped({b, 1, mel_bands_, frames_}))));
    const auto ids = nearest_codes(cells.value(), codebook_);
    for (std::int64_t k = 0; k < b; ++k) {
      IndexGrid g{m_, t_, {}};
      g.ids.assign(ids.begin() + k * m_ * t_, ids.begin() + (k + 1) * m_ * t_);
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace svqa::vq
