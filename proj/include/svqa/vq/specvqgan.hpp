#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "svqa/core/autodiff.hpp"
#include "svqa/core/nn.hpp"
#include "svqa/core/optim.hpp"
#include "svqa/data/dataset.hpp"
#include "svqa/eval/classifier.hpp"

namespace svqa::vq {

struct VqConfig {
  int codebook_size = 128;
  int n_z = 32;
  std::array<int, 3> channels{16, 32, 64};
  int disc_channels = 16;
  double beta = 0.25;
  double lambda_adv = 0.1;
  double lambda_perc = 0.1;
  int warmup_steps = 2000;
  int steps = 2000;
  int batch = 8;
  double lr = 1e-3;
  /// Codes used fewer times than this in an epoch are restarted.
  double restart_threshold = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const VqConfig&, const VqConfig&) = default;
};

/// Row-major [m, t] grid of code indices.
struct IndexGrid {
  std::int64_t m = 0;
  std::int64_t t = 0;
  std::vector<int> ids;

  int at(std::int64_t i, std::int64_t j) const { return ids[static_cast<std::size_t>(i * t + j)]; }
  int& at(std::int64_t i, std::int64_t j) { return ids[static_cast<std::size_t>(i * t + j)]; }
  friend bool operator==(const IndexGrid&, const IndexGrid&) = default;
};

/// L x n_z learned entries (parameter "codebook") with per-epoch usage counters.
class Codebook {
 public:
  Codebook() = default;
  Codebook(ParameterStore& store, int size, int dim, Rng& rng);

  int size() const { return static_cast<int>(entries_->value.dim(0)); }
  int dim() const { return static_cast<int>(entries_->value.dim(1)); }
  Parameter& entries() const { return *entries_; }

  std::span<const std::int64_t> usage() const noexcept { return usage_; }
  void count(std::span<const int> ids);
  void reset_usage();

 private:
  Parameter* entries_ = nullptr;
  std::vector<std::int64_t> usage_;
};

struct Quantized {
  std::vector<int> indices;
  /// Chosen entries, one row per input cell.
  Array z_q;
};

/// Nearest entry per row of cells [N, n_z] by squared L2 distance; ties go to
/// the lowest index.
std::vector<int> nearest_codes(const Array& cells, const Codebook& cb);
/// nearest_codes plus the chosen rows; increments the codebook's usage counters.
Quantized quantize(const Array& cells, Codebook& cb);
/// Codebook rows for ids -> [N, n_z]. Out-of-range ids throw.
Array lookup(std::span<const int> ids, const Codebook& cb);

/// exp(entropy) of the empirical code distribution, in [1, L].
double codebook_perplexity(std::span<const std::int64_t> usage);

/// Re-seeds entries used fewer than `threshold` times with rows drawn from
/// recent encoder cells [N, n_z]. Returns the number of entries replaced.
int dead_code_restart(Codebook& cb, const Array& recent_cells, double threshold, Rng& rng);

/// [B, n_z, m, t] -> [B*m*t, n_z], cells in (b, i, j) row-major order.
Var to_cells(Var z);
/// Inverse of to_cells.
Var from_cells(Var cells, std::int64_t batch, std::int64_t m, std::int64_t t);

struct VqTerms {
  Var reconstruction;
  Var codebook;
  Var commitment;  ///< already weighted by beta
  Var total;
};

/// mse(x_hat, x) + mse(sg(z_e), z_q) + beta * mse(sg(z_q), z_e).
VqTerms vq_loss(Var x, Var x_hat, Var z_e, Var z_q, double beta);

struct VqLossBreakdown {
  double reconstruction = 0.0;
  double codebook_term = 0.0;
  double commitment_term = 0.0;
  double adversarial_g = 0.0;
  double adversarial_d = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

/// Encoder, decoder, codebook and patch discriminator over [B, 1, M, T] grids.
/// Parameter names: "enc.*", "dec.*", "codebook", "disc.*".
class SpecVqGan {
 public:
  SpecVqGan(const VqConfig& cfg, std::int64_t mel_bands, std::int64_t frames);

  const VqConfig& config() const noexcept { return cfg_; }
  std::int64_t latent_rows() const noexcept { return m_; }
  std::int64_t latent_cols() const noexcept { return t_; }
  std::int64_t mel_bands() const noexcept { return mel_bands_; }
  std::int64_t frames() const noexcept { return frames_; }

  Var encode(Tape& tape, Var x) const;        ///< -> [B, n_z, m, t]
  Var decode(Tape& tape, Var z) const;        ///< -> [B, 1, M, T] in (-1, 1)
  Var discriminate(Tape& tape, Var x) const;  ///< -> [B, 1, P, Q] patch logits

  /// One [M, T] grid -> latent [m, t, n_z].
  Array encode(const Array& mel) const;
  /// Latent [m, t, n_z] -> (index grid, z_q [m, t, n_z]).
  std::pair<IndexGrid, Array> quantize(const Array& latent);
  /// z_q [m, t, n_z] -> [M, T].
  Array reconstruct(const Array& z_q) const;
  Array decode_indices(const IndexGrid& grid) const;
  /// Encodes and quantizes grids in batches; does not touch usage counters.
  std::vector<IndexGrid> tokenize(std::span<const Array* const> mels) const;

  Codebook& codebook() noexcept { return codebook_; }
  const Codebook& codebook() const noexcept { return codebook_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  std::int64_t step() const noexcept { return step_; }
  void set_step(std::int64_t s) noexcept { step_ = s; }

 private:
  VqConfig cfg_;
  std::int64_t mel_bands_, frames_, m_, t_;
  ParameterStore store_;
  std::array<nn::Conv2d, 3> enc_down_;
  nn::Conv2d enc_out_;
  nn::Conv2d dec_in_;
  std::array<nn::ConvTranspose2d, 3> dec_up_;
  std::array<nn::Conv2d, 3> disc_;
  Codebook codebook_;
  std::int64_t step_ = 0;
};

/// Sum over classifier scales s of ||f_s(x) - f_s(x_hat)||^2 / (H_s W_s), averaged over the batch.
/// Each feature vector is unit-normalized across channels first.
Var perceptual_loss(Tape& tape, const eval::EventClassifier& clf, Var x, Var x_hat);

struct GeneratorLoss {
  Var total;
  VqLossBreakdown parts;
};

/// Full generator objective. The adversarial term uses the non-saturating
/// form -log sigmoid(D(x_hat)) and is weighted 0 before warmup_steps. The
/// perceptual term is skipped when clf is null.
GeneratorLoss specvqgan_loss(Tape& tape, const SpecVqGan& model, const eval::EventClassifier* clf, Var x, Var x_hat,
                             Var z_e_cells, Var z_q_cells, std::int64_t step);

/// BCE of D on real (target 1) and reconstructed (target 0) grids.
Var discriminator_loss(Tape& tape, const SpecVqGan& model, const Array& x, const Array& x_hat);

struct CodebookReport {
  double initial_val_mse = 0.0;
  double final_val_mse = 0.0;
  double perplexity = 0.0;
  int restarts = 0;
  VqLossBreakdown last;
};

/// Trains until the model step counter reaches cfg.steps. Writes one
/// `step\ttotal\trec\tcommit\tadv\tperc` line per logged step to loss_log.
CodebookReport train_codebook(SpecVqGan& model, eval::EventClassifier* perceptual, std::span<const data::Clip> train,
                              std::span<const data::Clip> val, std::ostream* loss_log);

/// Mean squared reconstruction error through quantization over clips.
double reconstruction_mse(const SpecVqGan& model, std::span<const data::Clip> clips);

}  // namespace svqa::vq
