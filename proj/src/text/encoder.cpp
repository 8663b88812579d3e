#include "svqa/text/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/core/optim.hpp"

namespace svqa::text {

namespace {

constexpr std::string_view kVocabPrefix = "txt.vocab.";

}  // namespace

std::string_view mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::no_feat:
      return "no_feat";
    case FeatureMode::pooled:
      return "pooled";
    case FeatureMode::full:
      return "full";
  }
  return "?";
}

std::optional<FeatureMode> mode_from_name(std::string_view name) {
  for (auto m : {FeatureMode::no_feat, FeatureMode::pooled, FeatureMode::full}) {
    if (mode_name(m) == name) return m;
  }
  return std::nullopt;
}

int feature_rows(FeatureMode m, int max_len) { return m == FeatureMode::full ? max_len : 1; }

void TextConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw std::invalid_argument(fmt::format("text: width {} must be a positive multiple of heads {}", width, heads));
  }
  if (layers < 1) throw std::invalid_argument("text: layers must be >= 1");
  if (max_len < 2) throw std::invalid_argument("text: max_len must be >= 2");
  if (proj_dim < 1) throw std::invalid_argument("text: proj_dim must be >= 1");
  if (batch < 2) throw std::invalid_argument("text: contrastive batch must be >= 2");
  if (steps < 0 || !(lr > 0.0)) throw std::invalid_argument("text: steps must be >= 0 and lr > 0");
}

TokenRow make_token_row(std::span<const int> word_ids, int max_len) {
  TokenRow row;
  row.ids.assign(static_cast<std::size_t>(max_len), data::Vocabulary::kPad);
  row.ids[0] = data::Vocabulary::kCls;
  auto n = static_cast<int>(word_ids.size());
  if (n + 1 > max_len) {
    log::warn("caption of {} tokens truncated to {}", n, max_len - 1);
    n = max_len - 1;
  }
  std::copy_n(word_ids.begin(), n, row.ids.begin() + 1);
  row.length = n + 1;
  return row;
}

TextEncoder::TextEncoder(const TextConfig& cfg, data::Vocabulary vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  Rng rng(cfg_.seed, 0x7e7);
  const std::int64_t d = cfg_.width;
  tok_ = &store_.add("txt.tok", nn::uniform_init({vocab_.size(), d}, 0.1, rng));
  pos_ = &store_.add("txt.pos", nn::uniform_init({cfg_.max_len, d}, 0.1, rng));
  null_ = &store_.add("txt.null", nn::uniform_init({1, d}, 0.1, rng));
  for (int l = 0; l < cfg_.layers; ++l) blocks_.emplace_back(store_, fmt::format("txt.block{}", l), d, cfg_.heads, rng);
  ln_f_ = nn::LayerNorm(store_, "txt.ln_f", d);
}

TokenRow TextEncoder::tokenize(std::string_view caption) const {
  const auto ids = vocab_.encode(caption);
  return make_token_row(ids, cfg_.max_len);
}

TextFeatures TextEncoder::encode(Tape& tape, std::span<const TokenRow> rows, FeatureMode mode) const {
  const auto b = static_cast<std::int64_t>(rows.size());
  const std::int64_t len = cfg_.max_len, d = cfg_.width;
  if (b == 0) throw std::invalid_argument("text: encode needs at least one caption");
  TextFeatures out;
  if (mode == FeatureMode::no_feat) {
    out.values = ops::reshape(ops::embedding(tape.param(*null_), std::vector<int>(static_cast<std::size_t>(b), 0)), {b, 1, d});
    out.valid.assign(static_cast<std::size_t>(b), 1);
    return out;
  }
  std::vector<int> ids, positions;
  std::vector<std::uint8_t> valid;
  for (const auto& r : rows) {
    if (static_cast<std::int64_t>(r.ids.size()) != len) {
      throw ShapeError(fmt::format("text: token row of length {} (expected {})", r.ids.size(), len));
    }
    for (std::int64_t i = 0; i < len; ++i) {
      const int id = r.ids[static_cast<std::size_t>(i)];
      ids.push_back(id >= 0 && id < vocab_.size() ? id : data::Vocabulary::kUnk);
      positions.push_back(static_cast<int>(i));
      valid.push_back(i < r.length ? 1 : 0);
    }
  }
  Var h = ops::add(ops::embedding(tape.param(*tok_), ids), ops::embedding(tape.param(*pos_), positions));
  h = ops::reshape(h, {b, len, d});
  ops::AttentionMask mask;
  mask.key_valid = valid;
  for (const auto& blk : blocks_) h = blk(tape, h, mask);
  h = ln_f_(tape, h);
  if (mode == FeatureMode::pooled) {
    out.values = ops::narrow(h, 1, 0, 1);
    out.valid.assign(static_cast<std::size_t>(b), 1);
    return out;
  }
  Array keep({b, len, d});
  for (std::int64_t i = 0; i < b * len; ++i) {
    std::fill_n(keep.values().begin() + i * d, d, valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
  }
  out.values = ops::mul(h, tape.constant(std::move(keep)));
  out.valid = std::move(valid);
  return out;
}

Array TextEncoder::encode_text(std::string_view caption, FeatureMode mode) const {
  Tape tape;
  const TokenRow row = tokenize(caption);
  const Var v = encode(tape, std::span<const TokenRow>(&row, 1), mode).values;
  return v.value().reshaped({v.dim(1), v.dim(2)});
}

void TextEncoder::save_to(Checkpoint& ck, bool with_optimizer) const {
  ck.put_params(store_, "txt.", with_optimizer);
  for (int i = 0; i < vocab_.size(); ++i) ck.put_scalar(std::string(kVocabPrefix) + std::string(vocab_.word(i)), i);
}

data::Vocabulary TextEncoder::vocabulary_from(const Checkpoint& ck) {
  std::map<int, std::string> by_id;
  for (const auto& [name, value] : ck.records()) {
    if (!name.starts_with(kVocabPrefix)) continue;
    const auto id = static_cast<int>(value.item());
    if (!by_id.emplace(id, name.substr(kVocabPrefix.size())).second) {
      throw CheckpointError(fmt::format("vocabulary id {} stored twice", id));
    }
  }
  if (by_id.empty()) throw CheckpointError("checkpoint holds no text vocabulary");
  std::vector<std::string> words;
  for (const auto& [id, w] : by_id) {
    if (id != static_cast<int>(words.size())) throw CheckpointError(fmt::format("vocabulary ids are not contiguous at {}", id));
    words.push_back(w);
  }
  return data::Vocabulary::from_words(std::move(words));
}

void TextEncoder::load_from(const Checkpoint& ck) {
  const auto stored = vocabulary_from(ck);
  if (!std::ranges::equal(stored.words(), vocab_.words())) {
    throw CheckpointError("checkpoint vocabulary differs from the encoder's");
  }
  ck.load_params(store_, "txt.");
}

ContrastiveHeads::ContrastiveHeads(TextEncoder& text, std::int64_t mel_bands, std::int64_t frames) {
  const auto& cfg = text.config();
  Rng rng(cfg.seed, 0xa0d);
  std::int64_t in = 1, h = mel_bands, w = frames;
  for (int s = 0; s < 3; ++s) {
    convs_[s] = nn::Conv2d(store_, fmt::format("aud_proj.conv{}", s), in, cfg.audio_channels[s], 4, 2, 1, rng);
    in = cfg.audio_channels[s];
    h /= 2;
    w /= 2;
  }
  if (h < 1 || w < 1) throw ShapeError(fmt::format("text: audio grid {}x{} too small", mel_bands, frames));
  pooled_rows_ = h;
  pooled_frames_ = w;
  audio_fc_ = nn::Linear(store_, "aud_proj.fc", in * h, cfg.proj_dim, rng);
  text_fc_ = nn::Linear(store_, "txt.proj", cfg.width, cfg.proj_dim, rng);
  // Initial temperature 0.07.
  log_scale_ = &store_.add("aud_proj.log_scale", Array({1}, std::log(1.0 / 0.07)));
}

Var ContrastiveHeads::embed_audio(Tape& tape, Var mels) const {
  Var h = mels;
  for (const auto& c : convs_) h = ops::relu(c(tape, h));
  const std::int64_t b = h.dim(0), c = h.dim(1);
  Var rows = ops::reshape(h, {b * c * pooled_rows_, pooled_frames_});
  Var pooled = ops::matmul(ops::mul(ops::softmax(rows), rows), tape.constant(Array({pooled_frames_, 1}, 1.0)));
  return ops::l2_normalize(audio_fc_(tape, ops::reshape(pooled, {b, c * pooled_rows_})), 1e-8);
}

Var ContrastiveHeads::embed_text(Tape& tape, Var pooled) const {
  return ops::l2_normalize(text_fc_(tape, pooled), 1e-8);
}

Var ContrastiveHeads::logits(Tape& tape, Var audio_unit, Var text_unit) const {
  return ops::mul_scalar(ops::matmul(audio_unit, ops::transpose(text_unit)), ops::exp(tape.param(*log_scale_)));
}

InfoNce info_nce(Var logits) {
  if (logits.shape().size() != 2 || logits.dim(0) != logits.dim(1)) {
    throw ShapeError("info_nce: logits must be square [B, B]");
  }
  const auto b = logits.dim(0);
  if (b < 2) throw std::invalid_argument("info_nce: batch of 1 has no negatives");
  std::vector<int> diag(static_cast<std::size_t>(b));
  std::iota(diag.begin(), diag.end(), 0);
  InfoNce out;
  out.audio_to_text = ops::cross_entropy(logits, diag);
  out.text_to_audio = ops::cross_entropy(ops::transpose(logits), diag);
  out.total = ops::scale(ops::add(out.audio_to_text, out.text_to_audio), 0.5);
  return out;
}

double top1_accuracy(const Array& similarity) {
  const auto n = similarity.dim(0), m = similarity.dim(1);
  if (n == 0) return 0.0;
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < m; ++j) {
      if (similarity[static_cast<std::size_t>(i * m + j)] > similarity[static_cast<std::size_t>(i * m + best)]) best = j;
    }
    hits += best == i ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

struct PairBatch {
  Array mels;
  std::vector<TokenRow> rows;
};

PairBatch pair_batch(const TextEncoder& text, std::span<const data::Clip> clips, std::span<const std::size_t> idx) {
  PairBatch pb;
  std::vector<const Array*> xs;
  for (auto i : idx) {
    xs.push_back(&clips[i].mel.values);
    pb.rows.push_back(make_token_row(clips[i].row->caption.token_ids, text.config().max_len));
  }
  Array x = stack(xs);
  pb.mels = std::move(x).reshaped({static_cast<std::int64_t>(idx.size()), 1, x.dim(1), x.dim(2)});
  return pb;
}

Var pair_logits(Tape& tape, const TextEncoder& text, const ContrastiveHeads& heads, const PairBatch& pb) {
  const auto b = static_cast<std::int64_t>(pb.rows.size());
  Var cls = ops::reshape(text.encode(tape, pb.rows, FeatureMode::pooled).values, {b, text.width()});
  return heads.logits(tape, heads.embed_audio(tape, tape.constant(pb.mels)), heads.embed_text(tape, cls));
}

}  // namespace

double retrieval_eval(const TextEncoder& text, const ContrastiveHeads& heads, std::span<const data::Clip> clips, int b,
                      std::uint64_t seed, int batches) {
  if (b < 2) throw std::invalid_argument("retrieval_eval: batch must be >= 2");
  if (clips.size() < static_cast<std::size_t>(b)) {
    throw std::invalid_argument(fmt::format("retrieval_eval: {} clips cannot fill a batch of {}", clips.size(), b));
  }
  Rng rng(seed, 0x7e1);
  std::vector<std::size_t> order(clips.size());
  double total = 0.0;
  for (int k = 0; k < batches; ++k) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    const PairBatch pb = pair_batch(text, clips, std::span<const std::size_t>(order).first(static_cast<std::size_t>(b)));
    Tape tape;
    total += top1_accuracy(pair_logits(tape, text, heads, pb).value());
  }
  return total / batches;
}

ContrastiveReport contrastive_pretrain(TextEncoder& text, ContrastiveHeads& heads, std::span<const data::Clip> train,
                                       std::span<const data::Clip> heldout, std::ostream* loss_log, int start_step) {
  const auto& cfg = text.config();
  const auto batch = static_cast<std::size_t>(cfg.batch);
  if (train.size() < batch) {
    throw std::invalid_argument(fmt::format("contrastive_pretrain: {} clips cannot fill a batch of {}", train.size(), batch));
  }
  std::vector<Parameter*> params = text.params().all();
  for (auto* p : heads.params().all()) params.push_back(p);
  Parameter& log_scale = heads.params().get("aud_proj.log_scale");

  Rng rng(cfg.seed, 0xc0e);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  ContrastiveReport report;
  double running = 0.0;
  if (loss_log != nullptr && start_step == 0) *loss_log << "step\ttotal\ta2t\tt2a\n";
  for (int step = 0; step < cfg.steps; ++step) {
    if (cursor + batch > order.size()) {
      rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const auto picked = std::span<const std::size_t>(order).subspan(cursor, batch);
    cursor += batch;
    if (step < start_step) continue;
    const PairBatch pb = pair_batch(text, train, picked);
    Tape tape;
    const InfoNce loss = info_nce(pair_logits(tape, text, heads, pb));
    text.params().zero_grad();
    heads.params().zero_grad();
    tape.backward(loss.total);
    clip_grad_norm(params, 5.0);
    const auto res = adam_step(params, {.lr = cosine_lr(cfg.lr, step, cfg.steps, std::max(1, cfg.steps / 20))});
    if (!res.applied) log::warn("contrastive step {}: skipped update, non-finite gradient in {}", step, res.offending);
    log_scale.value[0] = std::clamp(log_scale.value[0], 0.0, std::log(100.0));
    const double l = loss.total.value().item();
    running = step == start_step ? l : 0.95 * running + 0.05 * l;
    if (loss_log != nullptr) {
      *loss_log << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\n", step, l, loss.audio_to_text.value().item(),
                               loss.text_to_audio.value().item());
    }
    if ((step + 1) % 100 == 0) log::info("contrastive step {} loss {:.4f}", step + 1, running);
  }
  report.final_loss = running;
  if (heldout.size() >= 8) {
    report.heldout_accuracy = retrieval_eval(text, heads, heldout, 8, cfg.seed);
    log::info("contrastive held-out batch-of-8 accuracy {:.3f}", report.heldout_accuracy);
  }
  return report;
}

}  // namespace svqa::text
