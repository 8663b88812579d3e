#include "svqa/eval/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "svqa/core/log.hpp"

namespace svqa::eval {

EventClassifier::EventClassifier(const ClassifierConfig& cfg, std::int64_t mel_bands, std::int64_t frames) : cfg_(cfg) {
  Rng rng(cfg.seed, 0xc1f);
  std::int64_t in = 1;
  std::int64_t h = mel_bands, w = frames;
  for (int s = 0; s < 3; ++s) {
    convs_[s] = nn::Conv2d(store_, fmt::format("clf.conv{}", s), in, cfg.channels[s], 4, 2, 1, rng);
    in = cfg.channels[s];
    w /= 2;
    if (s < 2) {
      h /= 2;
    } else {
      // The last scale keeps frequency resolution: stride 1 along mel bands.
      convs_[s].spec.stride_h = 1;
      h -= 1;
    }
  }
  if (h < 1 || w < 1) throw ShapeError(fmt::format("classifier: input {}x{} too small for three stride-2 scales", mel_bands, frames));
  pooled_rows_ = h;
  pooled_frames_ = w;
  hidden_ = nn::Linear(store_, "clf.hidden", in * h, cfg.embed_dim, rng);
  head_ = nn::Linear(store_, "clf.head", cfg.embed_dim, data::kNumClasses, rng);
}

EventClassifier::Output EventClassifier::forward(Tape& tape, Var x) const {
  Output out;
  Var h = x;
  for (int s = 0; s < 3; ++s) {
    h = ops::relu(convs_[s](tape, h));
    out.scales[s] = h;
  }
  const std::int64_t b = h.dim(0), c = h.dim(1);
  if (h.dim(2) != pooled_rows_ || h.dim(3) != pooled_frames_) {
    throw ShapeError(fmt::format("classifier: input {} does not match the configured grid", shape_str(x.shape())));
  }
  // Softmax-weighted pooling over time keeps short events visible.
  Var rows = ops::reshape(h, {b * c * pooled_rows_, pooled_frames_});
  Var pooled = ops::matmul(ops::mul(ops::softmax(rows), rows), tape.constant(Array({pooled_frames_, 1}, 1.0)));
  out.embedding = ops::relu(hidden_(tape, ops::reshape(pooled, {b, c * pooled_rows_})));
  out.logits = head_(tape, out.embedding);
  return out;
}

namespace {

template <typename Fn>
Array batched(std::span<const Array* const> mels, std::int64_t width, Fn fn) {
  if (mels.empty()) return Array({0, width});
  Array out({static_cast<std::int64_t>(mels.size()), width});
  constexpr std::size_t kChunk = 32;
  for (std::size_t i = 0; i < mels.size(); i += kChunk) {
    const auto chunk = mels.subspan(i, std::min(kChunk, mels.size() - i));
    Array x = stack(chunk);
    x = std::move(x).reshaped({static_cast<std::int64_t>(chunk.size()), 1, x.dim(1), x.dim(2)});
    Tape t;
    const Array v = fn(t, t.constant(std::move(x)));
    std::copy(v.values().begin(), v.values().end(), out.data() + i * static_cast<std::size_t>(width));
  }
  return out;
}

}  // namespace

Array EventClassifier::posteriors(std::span<const Array* const> mels) const {
  return batched(mels, data::kNumClasses, [&](Tape& t, Var x) { return ops::sigmoid(forward(t, x).logits).value(); });
}

Array EventClassifier::embeddings(std::span<const Array* const> mels) const {
  return batched(mels, cfg_.embed_dim, [&](Tape& t, Var x) { return forward(t, x).embedding.value(); });
}

double mean_average_precision(const Array& scores, const Array& targets) {
  if (scores.shape() != targets.shape() || scores.rank() != 2) {
    throw ShapeError("mean_average_precision: scores " + shape_str(scores.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::int64_t n = scores.dim(0), k = scores.dim(1);
  double total = 0.0;
  int counted = 0;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t c = 0; c < k; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a * k + c] > scores[b * k + c]; });
    int hits = 0;
    double ap = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
      if (targets[order[r] * k + c] > 0.5) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(r + 1);
      }
    }
    if (hits == 0) continue;
    total += ap / hits;
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

namespace {

Array tag_matrix(std::span<const data::Clip> clips) {
  Array t({static_cast<std::int64_t>(clips.size()), data::kNumClasses});
  for (std::size_t i = 0; i < clips.size(); ++i) std::copy(clips[i].tags.begin(), clips[i].tags.end(), t.data() + i * data::kNumClasses);
  return t;
}

}  // namespace

ClassifierReport train_classifier(EventClassifier& clf, std::span<const data::Clip> train,
                                  std::span<const data::Clip> heldout, std::ostream* loss_log, int start_step) {
  const auto& cfg = clf.config();
  std::array<int, data::kNumClasses> seen{};
  for (const auto& c : train)
    for (int k = 0; k < data::kNumClasses; ++k) seen[k] += c.tags[k] > 0.5;
  if (std::count_if(seen.begin(), seen.end(), [](int v) { return v > 0; }) < 2) {
    throw std::invalid_argument("train_classifier: training labels cover fewer than two classes");
  }
  const auto params = clf.params().all();
  Rng rng(cfg.seed, 0x7a1);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), train.size());
  ClassifierReport report;
  if (loss_log != nullptr && start_step == 0) *loss_log << "step\ttotal\n";
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Array*> xs;
    Array targets({static_cast<std::int64_t>(batch), data::kNumClasses});
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const auto& c = train[order[cursor++]];
      xs.push_back(&c.mel.values);
      std::copy(c.tags.begin(), c.tags.end(), targets.data() + i * data::kNumClasses);
    }
    if (step < start_step) continue;
    Array x = stack(xs);
    x = std::move(x).reshaped({static_cast<std::int64_t>(batch), 1, x.dim(1), x.dim(2)});
    Tape t;
    Var loss = ops::bce_with_logits(clf.forward(t, t.constant(std::move(x))).logits, targets);
    clf.params().zero_grad();
    t.backward(loss);
    adam_step(params, {.lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.steps / 20)});
    report.final_loss = loss.value().item();
    if (loss_log != nullptr) *loss_log << fmt::format("{}\t{:.6f}\n", step, report.final_loss);
    if (step % 100 == 0 || step + 1 == cfg.steps) log::info("classifier step {} bce {:.4f}", step, report.final_loss);
  }
  if (!heldout.empty()) {
    std::vector<const Array*> xs;
    for (const auto& c : heldout) xs.push_back(&c.mel.values);
    report.heldout_map = mean_average_precision(clf.posteriors(xs), tag_matrix(heldout));
    log::info("classifier held-out mAP {:.4f}", report.heldout_map);
  }
  return report;
}

}  // namespace svqa::eval
