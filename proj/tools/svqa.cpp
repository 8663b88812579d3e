// svqa: dataset synthesis, stage training, generation and evaluation.
#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "svqa/cli/commands.hpp"
#include "svqa/core/log.hpp"

namespace {

using namespace svqa;

std::filesystem::path pick(const std::string& flag, const std::string& fallback, const char* name) {
  if (!flag.empty()) return flag;
  if (!fallback.empty()) return fallback;
  throw cli::UsageError(fmt::format("{} is required (or set it in the config)", name));
}

void print_table(const eval::MetricReport& r) {
  fmt::print("{:<10} {:>7} {:>9} {:>10} {:>9} {:>7}\n", "condition", "samples", "psnr_db", "fid", "mmkl", "tag_f1");
  for (const auto& row : r.rows) {
    fmt::print("{:<10} {:>7} {:>9.3f} {:>10.3f} {:>9.3f} {:>7.3f}\n", row.condition, row.samples, row.psnr_db, row.fid,
               row.mmkl_nats, row.tag_f1);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-conditioned spectrogram codebook toolkit"};
  app.set_version_flag("--version", std::string(cli::version()));
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  std::string out, data, config_path, ckpt_dir, report, text, mel_out, stage_arg, mode_arg;
  int num = 0;
  std::uint64_t seed = 0;
  std::optional<int> topk;

  auto* ds = app.add_subcommand("dataset", "Synthesize a captioned corpus");
  ds->add_option("--out", out, "Output directory")->required();
  ds->add_option("--num", num, "Number of clips")->required();
  ds->add_option("--seed", seed, "Corpus seed");

  auto* tr = app.add_subcommand("train", "Train one stage into a checkpoint directory");
  tr->add_option("stage", stage_arg, "classifier, codebook, text or prior")->required()->check(
      CLI::IsMember({"classifier", "codebook", "text", "prior"}));
  tr->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Corpus directory");
  tr->add_option("--out", out, "Checkpoint directory");

  auto* gen = app.add_subcommand("generate", "Sample audio for a caption");
  gen->add_option("--text", text, "Caption")->required();
  gen->add_option("--ckpt-dir", ckpt_dir, "Checkpoint directory")->required();
  gen->add_option("--out", out, "Output WAV")->required();
  gen->add_option("--mel", mel_out, "Also write the generated mel grid here");
  gen->add_option("--seed", seed, "Sampling seed");
  gen->add_option("--topk", topk, "Override the configured top-k");
  gen->add_option("--mode", mode_arg, "Feature mode of the prior to use")->check(CLI::IsMember({"no_feat", "pooled", "full"}));

  auto* ev = app.add_subcommand("evaluate", "Score every trained condition on the test split");
  ev->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Corpus directory");
  ev->add_option("--ckpt-dir", ckpt_dir, "Checkpoint directory");
  ev->add_option("--report", report, "Report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (quiet) log::set_threshold(log::Level::warn);

  try {
    if (ds->parsed()) {
      cli::cmd_dataset(out, num, seed);
    } else if (tr->parsed()) {
      const auto cfg = cli::load_config(config_path);
      cli::cmd_train(*cli::stage_from_name(stage_arg), cfg, pick(data, cfg.paths.data, "--data"),
                     pick(out, cfg.paths.checkpoints, "--out"));
    } else if (gen->parsed()) {
      cli::GenerateOptions opts;
      opts.text = text;
      opts.ckpt_dir = ckpt_dir;
      opts.wav_out = out;
      if (!mel_out.empty()) opts.mel_out = mel_out;
      opts.seed = seed;
      opts.top_k = topk;
      if (!mode_arg.empty()) opts.mode = text::mode_from_name(mode_arg);
      cli::cmd_generate(opts);
    } else if (ev->parsed()) {
      const auto cfg = cli::load_config(config_path);
      const auto r = cli::cmd_evaluate(cfg, pick(data, cfg.paths.data, "--data"), pick(ckpt_dir, cfg.paths.checkpoints, "--ckpt-dir"),
                                       pick(report, cfg.paths.report, "--report"));
      print_table(r);
    }
  } catch (const cli::UsageError& e) {
    log::emit(log::Level::error, "error", "{}", e.what());
    return 2;
  } catch (const cli::ConfigError& e) {
    log::emit(log::Level::error, "error", "{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    log::emit(log::Level::error, "error", "{}", e.what());
    return 1;
  }
  return 0;
}
