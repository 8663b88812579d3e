#pragma once

#include <array>
#include <ostream>
#include <span>
#include <vector>

#include "svqa/core/autodiff.hpp"
#include "svqa/core/nn.hpp"
#include "svqa/core/optim.hpp"
#include "svqa/data/dataset.hpp"

namespace svqa::eval {

struct ClassifierConfig {
  std::array<int, 3> channels{8, 16, 32};
  /// Width of the penultimate embedding (the FID feature).
  int embed_dim = 32;
  int steps = 400;
  int batch = 16;
  double lr = 2e-3;
  std::uint64_t seed = 1;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// Multi-label event tagger over [B, 1, M, T] log-mel input. Three strided
/// conv scales, softmax-weighted pooling over time, a hidden layer, and one logit per class.
/// Parameters live under "clf.".
class EventClassifier {
 public:
  EventClassifier(const ClassifierConfig& cfg, std::int64_t mel_bands, std::int64_t frames);

  struct Output {
    std::array<Var, 3> scales;
    Var embedding;
    Var logits;
  };
  Output forward(Tape& tape, Var x) const;

  /// Sigmoid posteriors [N, classes] for a set of [M, T] grids.
  Array posteriors(std::span<const Array* const> mels) const;
  /// Penultimate features [N, embed_dim].
  Array embeddings(std::span<const Array* const> mels) const;

  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  const ClassifierConfig& config() const noexcept { return cfg_; }

 private:
  ClassifierConfig cfg_;
  ParameterStore store_;
  std::array<nn::Conv2d, 3> convs_;
  nn::Linear hidden_;
  nn::Linear head_;
  std::int64_t pooled_rows_ = 0;
  std::int64_t pooled_frames_ = 0;
};

/// Mean over classes of average precision; classes without positives are skipped.
double mean_average_precision(const Array& scores, const Array& targets);

struct ClassifierReport {
  double final_loss = 0.0;
  double heldout_map = 0.0;
};

/// BCE training on train clips; mAP is measured on heldout clips when given.
/// Throws if the training labels cover fewer than two classes. Steps before
/// start_step replay only the batch order, so a resumed run sees the same data.
/// Writes `step\ttotal` rows to loss_log.
ClassifierReport train_classifier(EventClassifier& clf, std::span<const data::Clip> train,
                                  std::span<const data::Clip> heldout, std::ostream* loss_log = nullptr,
                                  int start_step = 0);

}  // namespace svqa::eval
