#include "svqa/cli/commands.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "svqa/core/checkpoint.hpp"
#include "svqa/core/log.hpp"
#include "svqa/data/dataset.hpp"
#include "svqa/prior/prior.hpp"

namespace svqa::cli {

namespace fs = std::filesystem;

std::string_view version() { return SVQA_VERSION; }

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["config_hash"] = config_hash;
  j["checkpoints"] = checkpoints;
  j["seconds"] = seconds;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RunManifest m;
  m.version = j.at("version").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
  m.seconds = j.at("seconds").get<std::map<std::string, double>>();
  return m;
}

RunManifest RunManifest::read(const fs::path& path) {
  if (!fs::exists(path)) return {};
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

void write_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    out << contents;
    if (!out.flush()) throw std::runtime_error(fmt::format("write to {} failed", tmp.string()));
  }
  fs::rename(tmp, path);
}

}  // namespace

void RunManifest::write(const fs::path& path) const { write_atomic(path, to_json()); }

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::classifier: return "classifier";
    case Stage::codebook: return "codebook";
    case Stage::text: return "text";
    case Stage::prior: return "prior";
  }
  return "?";
}

std::optional<Stage> stage_from_name(std::string_view name) {
  for (Stage s : {Stage::classifier, Stage::codebook, Stage::text, Stage::prior}) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

namespace {

// Prior checkpoints are kept per feature mode so conditions can sit side by side.
std::string stage_key(Stage s, text::FeatureMode mode) {
  if (s == Stage::prior) return fmt::format("prior_{}", text::mode_name(mode));
  return std::string(stage_name(s));
}

}  // namespace

std::string checkpoint_name(Stage s, text::FeatureMode mode) { return stage_key(s, mode) + ".svqa"; }
std::string loss_log_name(Stage s, text::FeatureMode mode) { return stage_key(s, mode) + "_loss.tsv"; }

void cmd_dataset(const fs::path& out, int num, std::uint64_t seed) {
  if (num < 1) throw UsageError(fmt::format("--num must be at least 1, got {}", num));
  if (out.empty()) throw UsageError("--out is required");
  const auto m = data::generate_corpus(num, seed, out);
  log::info("dataset: {} clips under {}", m.rows.size(), out.string());
}

namespace {

using clk = std::chrono::steady_clock;

constexpr const char* kStepRecord = "train.step";

struct Corpus {
  data::Manifest manifest;
  dsp::MelFilterbank fb;
};

Corpus open_corpus(const Config& cfg, const fs::path& data_dir) {
  const fs::path mpath = data_dir / data::kManifestName;
  if (!fs::exists(mpath)) throw std::runtime_error(fmt::format("no corpus manifest at {}", mpath.string()));
  return {data::Manifest::read(mpath), dsp::MelFilterbank::create(cfg.audio.sample_rate, cfg.audio.n_fft, cfg.audio.mel_bands)};
}

std::vector<data::Clip> clips_of(const Corpus& c, const Config& cfg, const fs::path& data_dir, std::string_view split) {
  auto clips = data::load_clips(c.manifest, data_dir, split, cfg.audio, c.fb);
  if (clips.empty()) throw std::runtime_error(fmt::format("corpus at {} has no '{}' split", data_dir.string(), split));
  return clips;
}

fs::path require(const fs::path& dir, Stage needed, text::FeatureMode mode, Stage for_stage) {
  const fs::path p = dir / checkpoint_name(needed, mode);
  if (!fs::exists(p)) {
    throw std::runtime_error(fmt::format("{} checkpoint required: run `svqa train {}` into {} before training {}",
                                         stage_name(needed), stage_name(needed), dir.string(), stage_name(for_stage)));
  }
  return p;
}

// Step stored in an existing checkpoint of this stage, or 0 for a fresh run.
std::optional<Checkpoint> resume_point(const fs::path& path, int target_steps, int& start) {
  start = 0;
  if (!fs::exists(path)) return std::nullopt;
  Checkpoint ck = Checkpoint::load(path);
  start = ck.contains(kStepRecord) ? static_cast<int>(ck.get_scalar(kStepRecord)) : 0;
  if (start >= target_steps) {
    log::info("{} already holds {} steps (target {}); nothing to train", path.filename().string(), start, target_steps);
  } else {
    log::info("resuming {} at step {}", path.filename().string(), start);
  }
  return ck;
}

std::ofstream open_loss_log(const fs::path& path, bool resume) {
  std::ofstream out(path, resume ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  return out;
}

std::vector<prior::PriorExample> prior_examples(const vq::SpecVqGan& codec, std::span<const data::Clip> clips, int max_len) {
  std::vector<const Array*> mels;
  for (const auto& c : clips) mels.push_back(&c.mel.values);
  const auto grids = codec.tokenize(mels);
  std::vector<prior::PriorExample> out;
  out.reserve(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    out.push_back({text::make_token_row(clips[i].row->caption.token_ids, max_len), prior::flatten(grids[i])});
  }
  return out;
}

vq::SpecVqGan load_codec(const Config& cfg, const fs::path& path) {
  vq::SpecVqGan codec(cfg.codebook_config(), cfg.audio.mel_bands, cfg.audio.frames());
  Checkpoint::load(path).load_params(codec.params(), "");
  return codec;
}

eval::EventClassifier load_classifier(const Config& cfg, const fs::path& path) {
  eval::EventClassifier clf(cfg.classifier_config(), cfg.audio.mel_bands, cfg.audio.frames());
  Checkpoint::load(path).load_params(clf.params(), "clf.");
  return clf;
}

int seq_len_of(const vq::SpecVqGan& codec) { return static_cast<int>(codec.latent_rows() * codec.latent_cols()); }

}  // namespace

void cmd_train(Stage stage, const Config& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  if (out_dir.empty()) throw UsageError("--out is required");
  const auto t0 = clk::now();
  fs::create_directories(out_dir);
  const Corpus corpus = open_corpus(cfg, data_dir);
  const auto train = clips_of(corpus, cfg, data_dir, "train");
  const auto val = clips_of(corpus, cfg, data_dir, "val");
  const fs::path ck_path = out_dir / checkpoint_name(stage, cfg.mode);
  const fs::path log_path = out_dir / loss_log_name(stage, cfg.mode);
  int start = 0;

  switch (stage) {
    case Stage::classifier: {
      const auto cc = cfg.classifier_config();
      eval::EventClassifier clf(cc, cfg.audio.mel_bands, cfg.audio.frames());
      const auto prev = resume_point(ck_path, cc.steps, start);
      if (start >= cc.steps && prev) return;
      if (prev) prev->load_params(clf.params(), "clf.");
      auto log_file = open_loss_log(log_path, start > 0);
      eval::train_classifier(clf, train, val, &log_file, start);
      Checkpoint ck;
      ck.put_params(clf.params(), "clf.", true);
      ck.put_scalar(kStepRecord, cc.steps);
      ck.save(ck_path);
      break;
    }
    case Stage::codebook: {
      const auto vc = cfg.codebook_config();
      std::optional<eval::EventClassifier> clf;
      if (vc.lambda_perc > 0.0) clf.emplace(load_classifier(cfg, require(out_dir, Stage::classifier, cfg.mode, stage)));
      vq::SpecVqGan codec(vc, cfg.audio.mel_bands, cfg.audio.frames());
      const auto prev = resume_point(ck_path, vc.steps, start);
      if (start >= vc.steps && prev) return;
      if (prev) {
        prev->load_params(codec.params(), "");
        codec.set_step(start);
      }
      auto log_file = open_loss_log(log_path, start > 0);
      vq::train_codebook(codec, clf ? &*clf : nullptr, train, val, &log_file);
      Checkpoint ck;
      ck.put_params(codec.params(), "", true);
      ck.put_scalar(kStepRecord, static_cast<double>(codec.step()));
      ck.save(ck_path);
      break;
    }
    case Stage::text: {
      const auto tc = cfg.text_config();
      text::TextEncoder enc(tc);
      text::ContrastiveHeads heads(enc, cfg.audio.mel_bands, cfg.audio.frames());
      const auto prev = resume_point(ck_path, tc.steps, start);
      if (start >= tc.steps && prev) return;
      if (prev) {
        enc.load_from(*prev);
        prev->load_params(heads.params(), "");
      }
      auto log_file = open_loss_log(log_path, start > 0);
      text::contrastive_pretrain(enc, heads, train, val, &log_file, start);
      Checkpoint ck;
      enc.save_to(ck, true);
      ck.put_params(heads.params(), "", true);
      ck.put_scalar(kStepRecord, tc.steps);
      ck.save(ck_path);
      break;
    }
    case Stage::prior: {
      const vq::SpecVqGan codec = load_codec(cfg, require(out_dir, Stage::codebook, cfg.mode, stage));
      std::optional<Checkpoint> text_ck;
      if (cfg.contrastive && cfg.mode != text::FeatureMode::no_feat) {
        text_ck = Checkpoint::load(require(out_dir, Stage::text, cfg.mode, stage));
      }
      const auto pc = cfg.prior_config(codec.codebook().size(), seq_len_of(codec));
      text::TextEncoder enc(cfg.text_config());
      prior::PriorModel model(pc);
      const auto prev = resume_point(ck_path, pc.steps, start);
      if (start >= pc.steps && prev) return;
      if (prev) {
        enc.load_from(*prev);
        prev->load_params(model.params(), "prior.");
      } else if (text_ck) {
        enc.load_from(*text_ck);
      }
      const auto train_ex = prior_examples(codec, train, cfg.text.max_len);
      const auto val_ex = prior_examples(codec, val, cfg.text.max_len);
      auto log_file = open_loss_log(log_path, start > 0);
      const auto rep = prior::train_prior(model, enc, train_ex, val_ex, &log_file, start);
      log::info("prior {} val nll {:.4f}", text::mode_name(pc.mode), rep.val_nll);
      Checkpoint ck;
      enc.save_to(ck, true);
      ck.put_params(model.params(), "prior.", true);
      ck.put_scalar(kStepRecord, pc.steps);
      ck.save(ck_path);
      break;
    }
  }

  write_atomic(out_dir / kConfigSnapshot, serialize_config(cfg));
  RunManifest rm = RunManifest::read(out_dir / kRunManifest);
  rm.version = std::string(version());
  rm.config_hash = config_hash(cfg);
  const std::string key = stage_key(stage, cfg.mode);
  rm.checkpoints[key] = ck_path.string();
  rm.seconds[key] = std::chrono::duration<double>(clk::now() - t0).count();
  rm.write(out_dir / kRunManifest);
  log::info("{} done in {:.1f}s -> {}", key, rm.seconds[key], ck_path.string());
}

namespace {

Config snapshot_of(const fs::path& ckpt_dir) {
  const fs::path p = ckpt_dir / kConfigSnapshot;
  if (!fs::exists(p)) throw std::runtime_error(fmt::format("no {} in {}; train the stages first", kConfigSnapshot, ckpt_dir.string()));
  return load_config(p);
}

struct LoadedPrior {
  text::TextEncoder text;
  prior::PriorModel model;
};

LoadedPrior load_prior(const Config& cfg, const vq::SpecVqGan& codec, const fs::path& path, text::FeatureMode mode) {
  Config c = cfg;
  c.mode = mode;
  const Checkpoint ck = Checkpoint::load(path);
  LoadedPrior lp{text::TextEncoder(c.text_config(), text::TextEncoder::vocabulary_from(ck)),
                 prior::PriorModel(c.prior_config(codec.codebook().size(), seq_len_of(codec)))};
  lp.text.load_from(ck);
  ck.load_params(lp.model.params(), "prior.");
  return lp;
}

}  // namespace

void cmd_generate(const GenerateOptions& opts) {
  if (opts.wav_out.empty()) throw UsageError("--out is required");
  const Config cfg = snapshot_of(opts.ckpt_dir);
  const auto mode = opts.mode.value_or(cfg.mode);
  const fs::path prior_path = opts.ckpt_dir / checkpoint_name(Stage::prior, mode);
  const fs::path codec_path = opts.ckpt_dir / checkpoint_name(Stage::codebook, mode);
  for (const auto& p : {codec_path, prior_path}) {
    if (!fs::exists(p)) throw std::runtime_error(fmt::format("missing checkpoint {}", p.string()));
  }
  const vq::SpecVqGan codec = load_codec(cfg, codec_path);
  const LoadedPrior lp = load_prior(cfg, codec, prior_path, mode);
  if (mode != text::FeatureMode::no_feat && lp.text.tokenize(opts.text).length <= 1) {
    throw UsageError(fmt::format("--text has no tokens; mode {} needs a caption", text::mode_name(mode)));
  }
  auto sc = cfg.sampler_config(opts.seed);
  if (opts.top_k) sc.top_k = *opts.top_k;
  const auto fb = dsp::MelFilterbank::create(cfg.audio.sample_rate, cfg.audio.n_fft, cfg.audio.mel_bands);
  const prior::Pipeline pipe{&lp.text, &lp.model, &codec, cfg.audio, &fb};
  const auto g = prior::generate(pipe, opts.text, sc);
  dsp::write_wav(opts.wav_out, g.audio);
  if (opts.mel_out) {
    Checkpoint ck;
    ck.put("mel", g.mel.values);
    ck.save(*opts.mel_out);
  }
  log::info("generate: '{}' seed {} top-k {} -> {}", opts.text, opts.seed, sc.top_k, opts.wav_out.string());
}

eval::MetricReport cmd_evaluate(const Config& cfg, const fs::path& data_dir, const fs::path& ckpt_dir, const fs::path& report_path) {
  if (report_path.empty()) throw UsageError("--report is required");
  const Corpus corpus = open_corpus(cfg, data_dir);
  const auto test = clips_of(corpus, cfg, data_dir, "test");
  for (Stage s : {Stage::classifier, Stage::codebook}) {
    if (!fs::exists(ckpt_dir / checkpoint_name(s, cfg.mode))) {
      throw std::runtime_error(fmt::format("{} checkpoint required in {}", stage_name(s), ckpt_dir.string()));
    }
  }
  const auto clf = load_classifier(cfg, ckpt_dir / checkpoint_name(Stage::classifier, cfg.mode));
  const auto codec = load_codec(cfg, ckpt_dir / checkpoint_name(Stage::codebook, cfg.mode));
  const auto fb = dsp::MelFilterbank::create(cfg.audio.sample_rate, cfg.audio.n_fft, cfg.audio.mel_bands);

  std::vector<eval::GeneratedSet> sets;
  for (auto mode : {text::FeatureMode::no_feat, text::FeatureMode::pooled, text::FeatureMode::full}) {
    const fs::path p = ckpt_dir / checkpoint_name(Stage::prior, mode);
    if (!fs::exists(p)) {
      log::warn("evaluate: no {} in {}; skipping condition {}", p.filename().string(), ckpt_dir.string(), text::mode_name(mode));
      continue;
    }
    const LoadedPrior lp = load_prior(cfg, codec, p, mode);
    const prior::Pipeline pipe{&lp.text, &lp.model, &codec, cfg.audio, &fb};
    eval::GeneratedSet set{std::string(text::mode_name(mode)), {}, {}};
    for (std::size_t i = 0; i < test.size(); ++i) {
      for (int s = 0; s < cfg.eval.samples_per_caption; ++s) {
        const std::uint64_t seed = (cfg.seed << 32) + i * 1024 + static_cast<std::uint64_t>(s);
        set.mels.push_back(prior::generate_mel(pipe, test[i].row->caption.text, cfg.sampler_config(seed)).second.values);
        set.source.push_back(i);
      }
    }
    log::info("evaluate: generated {} grids for {}", set.mels.size(), set.condition);
    sets.push_back(std::move(set));
  }
  if (sets.empty()) throw std::runtime_error(fmt::format("no prior checkpoints in {}", ckpt_dir.string()));

  const auto report = eval::evaluate_corpus(clf, test, sets, cfg.eval.threshold, cfg.seed);
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  write_atomic(report_path, report.to_json());
  return report;
}

}  // namespace svqa::cli
