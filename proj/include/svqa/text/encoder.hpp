#pragma once

#include <array>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "svqa/core/autodiff.hpp"
#include "svqa/core/checkpoint.hpp"
#include "svqa/core/nn.hpp"
#include "svqa/data/dataset.hpp"

namespace svqa::text {

/// How captions condition the prior: a learned constant, the CLS vector, or every position.
enum class FeatureMode { no_feat, pooled, full };
std::string_view mode_name(FeatureMode m);
std::optional<FeatureMode> mode_from_name(std::string_view name);

/// Rows of a feature block for a mode: 1, 1 or max_len.
int feature_rows(FeatureMode m, int max_len);

struct TextConfig {
  int width = 128;
  int layers = 2;
  int heads = 4;
  int max_len = data::kMaxTokens;
  /// Shared audio-text space of the contrastive objective.
  int proj_dim = 64;
  std::array<int, 3> audio_channels{8, 16, 32};
  int steps = 600;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const TextConfig&, const TextConfig&) = default;
};

/// Token ids padded to max_len: CLS, caption words, then PAD.
struct TokenRow {
  std::vector<int> ids;
  /// Non-PAD prefix length.
  int length = 0;
};

/// Prepends CLS and pads; captions longer than max_len are truncated with a warning.
TokenRow make_token_row(std::span<const int> word_ids, int max_len);

struct TextFeatures {
  /// [B, K, d]
  Var values;
  /// [B * K] key validity; PAD rows are zero in values.
  std::vector<std::uint8_t> valid;
};

/// Two-layer self-attention token encoder. Parameters live under "txt.".
class TextEncoder {
 public:
  TextEncoder(const TextConfig& cfg, data::Vocabulary vocab = data::Vocabulary::standard());

  const TextConfig& config() const noexcept { return cfg_; }
  const data::Vocabulary& vocabulary() const noexcept { return vocab_; }
  int width() const noexcept { return cfg_.width; }

  TextFeatures encode(Tape& tape, std::span<const TokenRow> rows, FeatureMode mode) const;
  /// One caption -> [K, d].
  Array encode_text(std::string_view caption, FeatureMode mode) const;
  TokenRow tokenize(std::string_view caption) const;

  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  /// Writes "txt.*" parameters plus one "txt.vocab.<word>" record per entry.
  void save_to(Checkpoint& ck, bool with_optimizer) const;
  /// Restores weights; throws CheckpointError when the stored vocabulary differs.
  void load_from(const Checkpoint& ck);
  /// The vocabulary stored by save_to.
  static data::Vocabulary vocabulary_from(const Checkpoint& ck);

 private:
  TextConfig cfg_;
  data::Vocabulary vocab_;
  ParameterStore store_;
  Parameter* tok_ = nullptr;
  Parameter* pos_ = nullptr;
  Parameter* null_ = nullptr;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_f_;
};

/// Conv audio embedder and the two projections of the contrastive objective.
/// Parameters live under "aud_proj." except the text projection "txt.proj".
class ContrastiveHeads {
 public:
  ContrastiveHeads(TextEncoder& text, std::int64_t mel_bands, std::int64_t frames);

  /// [B, 1, M, T] -> unit vectors [B, proj_dim].
  Var embed_audio(Tape& tape, Var mels) const;
  /// CLS features [B, d] -> unit vectors [B, proj_dim].
  Var embed_text(Tape& tape, Var pooled) const;
  /// exp(learned log-scale) times cosine similarities, audio rows by text columns.
  Var logits(Tape& tape, Var audio_unit, Var text_unit) const;

  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

 private:
  ParameterStore store_;
  std::array<nn::Conv2d, 3> convs_;
  nn::Linear audio_fc_;
  nn::Linear text_fc_;
  Parameter* log_scale_ = nullptr;
  std::int64_t pooled_rows_ = 0;
  std::int64_t pooled_frames_ = 0;
};

struct InfoNce {
  Var audio_to_text;
  Var text_to_audio;
  /// Mean of the two directions.
  Var total;
};

/// Symmetric InfoNCE over a square [B, B] logit matrix whose diagonal holds the
/// matching pairs. B < 2 throws std::invalid_argument.
InfoNce info_nce(Var logits);

struct ContrastiveReport {
  double final_loss = 0.0;
  double heldout_accuracy = 0.0;
};

/// Trains txt.* and aud_proj.* jointly on (mel, caption) pairs.
ContrastiveReport contrastive_pretrain(TextEncoder& text, ContrastiveHeads& heads, std::span<const data::Clip> train,
                                       std::span<const data::Clip> heldout, std::ostream* loss_log = nullptr,
                                       int start_step = 0);

/// Fraction of rows whose argmax column is the diagonal.
double top1_accuracy(const Array& similarity);

/// Mean audio-to-text top-1 accuracy over seeded random batches of size b.
double retrieval_eval(const TextEncoder& text, const ContrastiveHeads& heads, std::span<const data::Clip> clips, int b,
                      std::uint64_t seed, int batches = 20);

}  // namespace svqa::text
