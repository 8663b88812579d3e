#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "svqa/core/autodiff.hpp"
#include "svqa/core/nn.hpp"
#include "svqa/dsp/audio.hpp"
#include "svqa/text/encoder.hpp"
#include "svqa/vq/specvqgan.hpp"

namespace svqa::prior {

/// Column-major flattening of an m x t grid: slot j*m + i holds cell (i, j).
using IndexSequence = std::vector<int>;

IndexSequence flatten(const vq::IndexGrid& grid);
/// Throws std::invalid_argument unless s.size() == m * t.
vq::IndexGrid unflatten(std::span<const int> s, std::int64_t m, std::int64_t t);
/// Codebook rows for every cell -> [m, t, n_z]. Out-of-range ids throw std::out_of_range.
Array lookup(const vq::IndexGrid& grid, const vq::Codebook& cb);

/// Whether the text encoder trains together with the prior or stays frozen after contrastive pretraining.
enum class TextTraining { joint, frozen };
std::string_view training_name(TextTraining t);
std::optional<TextTraining> training_from_name(std::string_view name);

struct PriorConfig {
  /// Must equal the text encoder width; features enter the stream unprojected.
  int width = 128;
  int layers = 4;
  int heads = 4;
  int codebook_size = 128;
  int seq_len = 200;
  int max_prefix = data::kMaxTokens;
  text::FeatureMode mode = text::FeatureMode::full;
  TextTraining text_training = TextTraining::joint;
  int steps = 3000;
  int batch = 8;
  double lr = 3e-4;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const PriorConfig&, const PriorConfig&) = default;
};

struct SamplerConfig {
  int top_k = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// Asserts after every draw that the id lies in that step's top-K set.
  bool check_support = false;

  void validate(int codebook_size) const;
};

/// Raised by the sampler's support check.
class SupportViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Decoder-only transformer over [features, BOS, s_0 .. s_{n-2}] predicting s_0 .. s_{n-1}.
/// Parameters live under "prior.". Token id L is BOS.
class PriorModel {
 public:
  explicit PriorModel(const PriorConfig& cfg);

  const PriorConfig& config() const noexcept { return cfg_; }
  int bos() const noexcept { return cfg_.codebook_size; }

  /// Teacher-forced logits [B, n, L] for sequences of equal length n <= seq_len.
  Var logits(Tape& tape, const text::TextFeatures& prefix, std::span<const IndexSequence> seqs) const;

  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

 private:
  friend class IncrementalDecoder;
  PriorConfig cfg_;
  ParameterStore store_;
  Parameter* tok_ = nullptr;
  Parameter* pos_ = nullptr;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_f_;
  nn::Linear head_;
};

/// Mean over batch and positions of -log p(s_i | s_<i, features), one pass.
Var sequence_nll(Tape& tape, const PriorModel& model, const text::TextFeatures& prefix, std::span<const IndexSequence> seqs);

/// Cached key/value inference for one sequence; matches PriorModel::logits position by position.
class IncrementalDecoder {
 public:
  /// prefix is [K, d] with per-row validity.
  IncrementalDecoder(const PriorModel& model, const Array& prefix, std::span<const std::uint8_t> valid);

  /// Logits over the L codes for the next position.
  const std::vector<double>& next_logits() const noexcept { return logits_; }
  /// Appends a sampled id and advances.
  void push(int id);
  std::int64_t generated() const noexcept { return generated_; }

 private:
  void run(const Array& rows, bool bidirectional);

  const PriorModel* model_;
  std::int64_t width_, prefix_;
  std::int64_t length_ = 0;
  std::int64_t generated_ = 0;
  std::vector<std::uint8_t> valid_;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> logits_;
};

/// Top-K truncated, temperature-scaled categorical draw from logits.
int sample_top_k(std::span<const double> logits, int top_k, double temperature, Rng& rng, bool check_support);

/// Autoregressively samples seq_len ids conditioned on one caption's features [K, d].
IndexSequence sample_sequence(const PriorModel& model, const Array& prefix, std::span<const std::uint8_t> valid,
                              const SamplerConfig& cfg);

struct PriorReport {
  double final_loss = 0.0;
  double val_nll = 0.0;
};

struct PriorExample {
  text::TokenRow tokens;
  IndexSequence codes;
};

/// Trains the prior (and the text encoder when joint) on caption/code pairs.
/// Steps before start_step only replay the batch order. Writes `step\ttotal` rows to loss_log.
PriorReport train_prior(PriorModel& model, text::TextEncoder& text, std::span<const PriorExample> train,
                        std::span<const PriorExample> val, std::ostream* loss_log = nullptr, int start_step = 0);

/// Mean held-out NLL; `shuffle_seed` pairs every sequence with another example's caption.
double mean_nll(const PriorModel& model, const text::TextEncoder& text, std::span<const PriorExample> examples,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Everything generate() needs, already loaded.
struct Pipeline {
  const text::TextEncoder* text = nullptr;
  const PriorModel* prior = nullptr;
  const vq::SpecVqGan* codec = nullptr;
  dsp::AudioConfig audio;
  const dsp::MelFilterbank* filterbank = nullptr;
};

struct Generated {
  IndexSequence codes;
  dsp::MelSpectrogram mel;
  dsp::Waveform audio;
};

/// encode_text -> sample_sequence -> unflatten -> lookup -> reconstruct -> griffin_lim.
Generated generate(const Pipeline& p, std::string_view caption, const SamplerConfig& cfg);
/// The same pipeline without the vocoder.
std::pair<IndexSequence, dsp::MelSpectrogram> generate_mel(const Pipeline& p, std::string_view caption,
                                                           const SamplerConfig& cfg);

}  // namespace svqa::prior
