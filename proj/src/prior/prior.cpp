#include "svqa/prior/prior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/core/optim.hpp"

namespace svqa::prior {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMatMap = Eigen::Map<const RowMat>;
using CVecMap = Eigen::Map<const Eigen::RowVectorXd>;

}  // namespace

IndexSequence flatten(const vq::IndexGrid& grid) {
  IndexSequence s(static_cast<std::size_t>(grid.m * grid.t));
  for (std::int64_t j = 0; j < grid.t; ++j) {
    for (std::int64_t i = 0; i < grid.m; ++i) s[static_cast<std::size_t>(j * grid.m + i)] = grid.at(i, j);
  }
  return s;
}

vq::IndexGrid unflatten(std::span<const int> s, std::int64_t m, std::int64_t t) {
  if (m < 1 || t < 1 || static_cast<std::int64_t>(s.size()) != m * t) {
    throw std::invalid_argument(fmt::format("unflatten: sequence of length {} does not fill {}x{}", s.size(), m, t));
  }
  vq::IndexGrid g{m, t, std::vector<int>(s.size())};
  for (std::int64_t j = 0; j < t; ++j) {
    for (std::int64_t i = 0; i < m; ++i) g.at(i, j) = s[static_cast<std::size_t>(j * m + i)];
  }
  return g;
}

Array lookup(const vq::IndexGrid& grid, const vq::Codebook& cb) {
  return vq::lookup(grid.ids, cb).reshaped({grid.m, grid.t, cb.dim()});
}

std::string_view training_name(TextTraining t) { return t == TextTraining::joint ? "joint" : "frozen"; }

std::optional<TextTraining> training_from_name(std::string_view name) {
  if (name == "joint") return TextTraining::joint;
  if (name == "frozen") return TextTraining::frozen;
  return std::nullopt;
}

void PriorConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw std::invalid_argument(fmt::format("prior: width {} must be a positive multiple of heads {}", width, heads));
  }
  if (layers < 1) throw std::invalid_argument("prior: layers must be >= 1");
  if (codebook_size < 2) throw std::invalid_argument("prior: codebook_size must be >= 2");
  if (seq_len < 1 || max_prefix < 1) throw std::invalid_argument("prior: seq_len and max_prefix must be >= 1");
  if (steps < 0 || batch < 1 || !(lr > 0.0)) throw std::invalid_argument("prior: steps >= 0, batch >= 1 and lr > 0 required");
}

void SamplerConfig::validate(int codebook_size) const {
  if (top_k < 1 || top_k > codebook_size) {
    throw std::invalid_argument(fmt::format("sampler: top_k {} outside [1, {}]", top_k, codebook_size));
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument(fmt::format("sampler: temperature must be positive, got {}", temperature));
  }
}

PriorModel::PriorModel(const PriorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed, 0x9e1);
  const std::int64_t d = cfg_.width;
  tok_ = &store_.add("prior.tok", nn::uniform_init({cfg_.codebook_size + 1, d}, 0.1, rng));
  pos_ = &store_.add("prior.pos", nn::uniform_init({cfg_.max_prefix + cfg_.seq_len, d}, 0.1, rng));
  for (int l = 0; l < cfg_.layers; ++l) blocks_.emplace_back(store_, fmt::format("prior.block{}", l), d, cfg_.heads, rng);
  ln_f_ = nn::LayerNorm(store_, "prior.ln_f", d);
  head_ = nn::Linear(store_, "prior.head", d, cfg_.codebook_size, rng);
}

Var PriorModel::logits(Tape& tape, const text::TextFeatures& prefix, std::span<const IndexSequence> seqs) const {
  const auto b = static_cast<std::int64_t>(seqs.size());
  if (b == 0) throw std::invalid_argument("prior: empty batch");
  const Var& feats = prefix.values;
  if (feats.shape().size() != 3 || feats.dim(0) != b || feats.dim(2) != cfg_.width) {
    throw ShapeError(fmt::format("prior: prefix {} does not match batch {} and width {}", shape_str(feats.shape()), b, cfg_.width));
  }
  const std::int64_t k = feats.dim(1);
  if (k > cfg_.max_prefix) throw ShapeError(fmt::format("prior: prefix of {} rows exceeds {}", k, cfg_.max_prefix));
  const auto n = static_cast<std::int64_t>(seqs[0].size());
  if (n < 1 || n > cfg_.seq_len) throw std::invalid_argument(fmt::format("prior: sequence length {} outside [1, {}]", n, cfg_.seq_len));

  std::vector<int> ids, positions;
  std::vector<std::uint8_t> valid;
  for (std::int64_t r = 0; r < b; ++r) {
    const auto& s = seqs[static_cast<std::size_t>(r)];
    if (static_cast<std::int64_t>(s.size()) != n) throw std::invalid_argument("prior: sequences in a batch must share a length");
    ids.push_back(bos());
    for (std::int64_t i = 0; i + 1 < n; ++i) ids.push_back(s[static_cast<std::size_t>(i)]);
    for (std::int64_t p = 0; p < k + n; ++p) positions.push_back(static_cast<int>(p));
    for (std::int64_t p = 0; p < k; ++p) {
      valid.push_back(prefix.valid.empty() ? 1 : prefix.valid[static_cast<std::size_t>(r * k + p)]);
    }
    valid.insert(valid.end(), static_cast<std::size_t>(n), 1);
  }
  Var tokens = ops::reshape(ops::embedding(tape.param(*tok_), ids), {b, n, cfg_.width});
  const Var parts[] = {feats, tokens};
  Var h = ops::concat(parts, 1);
  h = ops::add(h, ops::reshape(ops::embedding(tape.param(*pos_), positions), {b, k + n, cfg_.width}));
  ops::AttentionMask mask;
  mask.causal = true;
  mask.prefix = k;
  mask.key_valid = std::move(valid);
  for (const auto& blk : blocks_) h = blk(tape, h, mask);
  return head_(tape, ops::narrow(ln_f_(tape, h), 1, k, n));
}

Var sequence_nll(Tape& tape, const PriorModel& model, const text::TextFeatures& prefix, std::span<const IndexSequence> seqs) {
  const int l = model.config().codebook_size;
  std::vector<int> targets;
  for (const auto& s : seqs) {
    for (int id : s) {
      if (id < 0 || id >= l) throw std::out_of_range(fmt::format("prior: code {} outside [0, {})", id, l));
      targets.push_back(id);
    }
  }
  Var lg = model.logits(tape, prefix, seqs);
  return ops::cross_entropy(ops::reshape(lg, {lg.dim(0) * lg.dim(1), l}), targets);
}

IncrementalDecoder::IncrementalDecoder(const PriorModel& model, const Array& prefix, std::span<const std::uint8_t> valid)
    : model_(&model), width_(model.config().width), prefix_(prefix.rank() == 2 ? prefix.dim(0) : 0) {
  if (prefix.rank() != 2 || prefix.dim(1) != width_ || prefix_ < 1 || prefix_ > model.config().max_prefix) {
    throw ShapeError(fmt::format("prior: prefix {} must be [K, {}] with 1 <= K <= {}", shape_str(prefix.shape()), width_,
                                 model.config().max_prefix));
  }
  if (!valid.empty() && static_cast<std::int64_t>(valid.size()) != prefix_) throw ShapeError("prior: prefix mask size mismatch");
  keys_.resize(model.blocks_.size());
  values_.resize(model.blocks_.size());
  if (valid.empty()) {
    valid_.assign(static_cast<std::size_t>(prefix_), 1);
  } else {
    valid_.assign(valid.begin(), valid.end());
  }
  const Array& pos = model.pos_->value;
  Array rows = prefix;
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] += pos[i];
  run(rows, true);
  push(model.bos());
  generated_ = 0;
}

void IncrementalDecoder::push(int id) {
  const auto& cfg = model_->config();
  if (id < 0 || id > cfg.codebook_size) throw std::out_of_range(fmt::format("prior: code {} outside [0, {}]", id, cfg.codebook_size));
  if (length_ >= prefix_ + cfg.seq_len) throw std::logic_error("prior: sequence already complete");
  const std::int64_t d = width_;
  Array row({1, d});
  const Array& tok = model_->tok_->value;
  const Array& pos = model_->pos_->value;
  for (std::int64_t j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = tok[static_cast<std::size_t>(id * d + j)] + pos[static_cast<std::size_t>(length_ * d + j)];
  valid_.push_back(1);
  run(row, false);
  ++generated_;
}

void IncrementalDecoder::run(const Array& rows, bool bidirectional) {
  const std::int64_t d = width_, r = rows.dim(0);
  const std::int64_t start = length_, end = length_ + r;
  RowMat x = CMatMap(rows.data(), r, d);

  auto layer_norm = [d](const RowMat& in, const nn::LayerNorm& ln) {
    RowMat out(in.rows(), d);
    const CVecMap g(ln.gain->value.data(), d), bta(ln.bias->value.data(), d);
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
      const double mu = in.row(i).mean();
      const double var = (in.row(i).array() - mu).square().mean();
      out.row(i) = ((in.row(i).array() - mu) * (1.0 / std::sqrt(var + 1e-5))).matrix().cwiseProduct(g) + bta;
    }
    return out;
  };
  auto linear = [](const RowMat& in, const nn::Linear& lin) {
    const auto& w = lin.weight->value;
    RowMat out = in * CMatMap(w.data(), w.dim(0), w.dim(1));
    out.rowwise() += CVecMap(lin.bias->value.data(), w.dim(1));
    return out;
  };

  for (std::size_t l = 0; l < model_->blocks_.size(); ++l) {
    const auto& blk = model_->blocks_[l];
    const RowMat qkv = linear(layer_norm(x, blk.ln1), blk.qkv);
    auto& kc = keys_[l];
    auto& vc = values_[l];
    for (std::int64_t i = 0; i < r; ++i) {
      for (std::int64_t j = 0; j < d; ++j) {
        kc.push_back(qkv(i, d + j));
        vc.push_back(qkv(i, 2 * d + j));
      }
    }
    const CMatMap kall(kc.data(), end, d), vall(vc.data(), end, d);
    const std::int64_t dh = d / blk.heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    RowMat attn(r, d);
    std::vector<double> p(static_cast<std::size_t>(end));
    for (std::int64_t i = 0; i < r; ++i) {
      const std::int64_t query = start + i;
      for (int h = 0; h < blk.heads; ++h) {
        const auto q = qkv.row(i).segment(h * dh, dh);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < end; ++j) {
          const bool visible = valid_[static_cast<std::size_t>(j)] != 0 && (bidirectional || j <= query || j < prefix_);
          p[static_cast<std::size_t>(j)] = visible ? sc * q.dot(kall.row(j).segment(h * dh, dh)) : -std::numeric_limits<double>::infinity();
          mx = std::max(mx, p[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (auto& v : p) {
          v = std::isinf(v) ? 0.0 : std::exp(v - mx);
          z += v;
        }
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
        if (z > 0.0) {
          for (std::int64_t j = 0; j < end; ++j) {
            if (p[static_cast<std::size_t>(j)] != 0.0) acc += (p[static_cast<std::size_t>(j)] / z) * vall.row(j).segment(h * dh, dh);
          }
        }
        attn.row(i).segment(h * dh, dh) = acc;
      }
    }
    x += linear(attn, blk.proj);
    RowMat hidden = linear(layer_norm(x, blk.ln2), blk.fc1);
    hidden = hidden.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440)); });
    x += linear(hidden, blk.fc2);
  }
  length_ = end;
  const RowMat last = layer_norm(x.bottomRows(1), model_->ln_f_);
  const RowMat out = linear(last, model_->head_);
  logits_.assign(out.data(), out.data() + out.size());
}

int sample_top_k(std::span<const double> logits, int top_k, double temperature, Rng& rng, bool check_support) {
  const auto l = static_cast<int>(logits.size());
  if (top_k < 1 || top_k > l) throw std::invalid_argument(fmt::format("sampler: top_k {} outside [1, {}]", top_k, l));
  if (!(temperature > 0.0)) throw std::invalid_argument("sampler: temperature must be positive");
  std::vector<int> order(static_cast<std::size_t>(l));
  std::iota(order.begin(), order.end(), 0);
  // Ties keep the lower id.
  std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](int a, int b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  const double top = logits[order[0]] / temperature;
  std::vector<double> w(static_cast<std::size_t>(top_k));
  double z = 0.0;
  for (int i = 0; i < top_k; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(logits[order[static_cast<std::size_t>(i)]] / temperature - top);
    z += w[static_cast<std::size_t>(i)];
  }
  const double u = rng.uniform() * z;
  int pick = order[static_cast<std::size_t>(top_k - 1)];
  double acc = 0.0;
  for (int i = 0; i < top_k; ++i) {
    acc += w[static_cast<std::size_t>(i)];
    if (u < acc) {
      pick = order[static_cast<std::size_t>(i)];
      break;
    }
  }
  if (check_support) {
    int above = 0;
    for (int i = 0; i < l; ++i) above += logits[i] > logits[pick] || (logits[i] == logits[pick] && i < pick) ? 1 : 0;
    if (above >= top_k) throw SupportViolation(fmt::format("sampler: id {} ranks {} but top_k is {}", pick, above + 1, top_k));
  }
  return pick;
}

IndexSequence sample_sequence(const PriorModel& model, const Array& prefix, std::span<const std::uint8_t> valid,
                              const SamplerConfig& cfg) {
  cfg.validate(model.config().codebook_size);
  Rng rng(cfg.seed, 0x5a3);
  IncrementalDecoder dec(model, prefix, valid);
  const int n = model.config().seq_len;
  IndexSequence s;
  s.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    s.push_back(sample_top_k(dec.next_logits(), cfg.top_k, cfg.temperature, rng, cfg.check_support));
    if (i + 1 < n) dec.push(s.back());
  }
  return s;
}

namespace {

text::TextFeatures batch_features(Tape& tape, const text::TextEncoder& text, text::FeatureMode mode,
                                  std::span<const PriorExample> examples, std::span<const std::size_t> caption_of,
                                  std::span<const std::size_t> idx, std::vector<IndexSequence>& seqs) {
  std::vector<text::TokenRow> rows;
  seqs.clear();
  for (auto i : idx) {
    rows.push_back(examples[caption_of.empty() ? i : caption_of[i]].tokens);
    seqs.push_back(examples[i].codes);
  }
  return text.encode(tape, rows, mode);
}

}  // namespace

double mean_nll(const PriorModel& model, const text::TextEncoder& text, std::span<const PriorExample> examples,
                std::optional<std::uint64_t> shuffle_seed) {
  if (examples.empty()) return 0.0;
  std::vector<std::size_t> caption_of;
  if (shuffle_seed) {
    if (examples.size() < 2) throw std::invalid_argument("mean_nll: shuffling needs at least two examples");
    std::vector<std::size_t> perm(examples.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(*shuffle_seed, 0x5f1);
    rng.shuffle(std::span<std::size_t>(perm));
    caption_of.resize(examples.size());
    // A cyclic shift of a random order leaves no example with its own caption.
    for (std::size_t i = 0; i < perm.size(); ++i) caption_of[perm[i]] = perm[(i + 1) % perm.size()];
  }
  double total = 0.0;
  std::vector<IndexSequence> seqs;
  for (std::size_t i = 0; i < examples.size(); i += 8) {
    std::vector<std::size_t> idx(std::min<std::size_t>(8, examples.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    Tape tape;
    const auto feats = batch_features(tape, text, model.config().mode, examples, caption_of, idx, seqs);
    total += sequence_nll(tape, model, feats, seqs).value().item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(examples.size());
}

PriorReport train_prior(PriorModel& model, text::TextEncoder& text, std::span<const PriorExample> train,
                        std::span<const PriorExample> val, std::ostream* loss_log, int start_step) {
  const auto& cfg = model.config();
  if (train.empty()) throw std::invalid_argument("train_prior: empty training split");
  if (text.width() != cfg.width) {
    throw std::invalid_argument(fmt::format("train_prior: text width {} differs from prior width {}", text.width(), cfg.width));
  }
  std::vector<Parameter*> params = model.params().all();
  if (cfg.text_training == TextTraining::joint) {
    text.params().set_trainable("txt.", true);
    for (auto* p : text.params().all()) params.push_back(p);
  } else {
    text.params().set_trainable("txt.", false);
  }

  Rng rng(cfg.seed, 0x9a1);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), train.size());
  PriorReport report;
  double running = 0.0;
  std::vector<IndexSequence> seqs;
  if (loss_log != nullptr && start_step == 0) *loss_log << "step\ttotal\n";
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < batch) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    if (step < start_step) continue;
    Tape tape;
    const auto feats = batch_features(tape, text, cfg.mode, train, {}, idx, seqs);
    Var loss = sequence_nll(tape, model, feats, seqs);
    model.params().zero_grad();
    text.params().zero_grad();
    tape.backward(loss);
    clip_grad_norm(params, 1.0);
    const auto res = adam_step(params, {.lr = cosine_lr(cfg.lr, step, cfg.steps, std::max(1, cfg.steps / 20))});
    if (!res.applied) log::warn("prior step {}: skipped update, non-finite gradient in {}", step, res.offending);
    const double l = loss.value().item();
    running = step == start_step ? l : 0.98 * running + 0.02 * l;
    if (loss_log != nullptr) *loss_log << fmt::format("{}\t{:.6f}\n", step, l);
    if ((step + 1) % 100 == 0) log::info("prior step {} nll {:.4f}", step + 1, running);
  }
  report.final_loss = running;
  report.val_nll = mean_nll(model, text, val);
  return report;
}

std::pair<IndexSequence, dsp::MelSpectrogram> generate_mel(const Pipeline& p, std::string_view caption,
                                                           const SamplerConfig& cfg) {
  if (p.text == nullptr || p.prior == nullptr || p.codec == nullptr) {
    throw std::invalid_argument("generate: text encoder, prior and codec must all be loaded");
  }
  if (p.prior->config().codebook_size != p.codec->codebook().size()) {
    throw std::invalid_argument(fmt::format("generate: prior predicts {} codes but the codebook has {}",
                                            p.prior->config().codebook_size, p.codec->codebook().size()));
  }
  if (p.prior->config().seq_len != p.codec->latent_rows() * p.codec->latent_cols()) {
    throw std::invalid_argument("generate: prior sequence length does not match the codec latent grid");
  }
  Tape tape;
  const text::TokenRow row = p.text->tokenize(caption);
  const auto feats = p.text->encode(tape, std::span<const text::TokenRow>(&row, 1), p.prior->config().mode);
  const Array prefix = feats.values.value().reshaped({feats.values.dim(1), feats.values.dim(2)});
  IndexSequence s = sample_sequence(*p.prior, prefix, feats.valid, cfg);
  const auto grid = unflatten(s, p.codec->latent_rows(), p.codec->latent_cols());
  dsp::MelSpectrogram mel;
  mel.values = p.codec->reconstruct(lookup(grid, p.codec->codebook()));
  mel.hop = p.audio.hop;
  mel.window = p.audio.n_fft;
  return {std::move(s), std::move(mel)};
}

Generated generate(const Pipeline& p, std::string_view caption, const SamplerConfig& cfg) {
  if (p.filterbank == nullptr) throw std::invalid_argument("generate: mel filterbank missing");
  auto [codes, mel] = generate_mel(p, caption, cfg);
  dsp::GriffinLimOptions opts;
  opts.iters = p.audio.griffin_lim_iters;
  opts.hop = p.audio.hop;
  opts.length = p.audio.clip_samples();
  Generated g;
  g.audio = dsp::griffin_lim(mel, *p.filterbank, opts).waveform;
  g.codes = std::move(codes);
  g.mel = std::move(mel);
  return g;
}

}  // namespace svqa::prior
