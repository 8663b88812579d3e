#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/vq/specvqgan.hpp"

namespace svqa::vq {

Var perceptual_loss(Tape& tape, const eval::EventClassifier& clf, Var x, Var x_hat) {
  const auto real = clf.forward(tape, ops::stop_gradient(x));
  const auto fake = clf.forward(tape, x_hat);
  const auto batch = static_cast<double>(x.dim(0));
  Var total;
  for (int s = 0; s < 3; ++s) {
    // Features are unit-normalized across channels at each location.
    const auto area = static_cast<double>(real.scales[s].dim(2) * real.scales[s].dim(3));
    auto unit = [](Var f) { return ops::l2_normalize(ops::permute(f, {0, 2, 3, 1}), 1e-4); };
    Var d = ops::sub(unit(fake.scales[s]), unit(real.scales[s]));
    Var term = ops::scale(ops::sum(ops::mul(d, d)), 1.0 / (area * batch));
    total = total.valid() ? ops::add(total, term) : term;
  }
  return total;
}

GeneratorLoss specvqgan_loss(Tape& tape, const SpecVqGan& model, const eval::EventClassifier* clf, Var x, Var x_hat,
                             Var z_e_cells, Var z_q_cells, std::int64_t step) {
  const auto& cfg = model.config();
  const VqTerms vq = vq_loss(x, x_hat, z_e_cells, z_q_cells, cfg.beta);
  GeneratorLoss out;
  out.parts.reconstruction = vq.reconstruction.value().item();
  out.parts.codebook_term = vq.codebook.value().item();
  out.parts.commitment_term = vq.commitment.value().item();
  out.total = vq.total;
  if (clf != nullptr && cfg.lambda_perc > 0.0) {
    Var perc = perceptual_loss(tape, *clf, x, x_hat);
    out.parts.perceptual = perc.value().item();
    out.total = ops::add(out.total, ops::scale(perc, cfg.lambda_perc));
  }
  if (cfg.lambda_adv > 0.0) {
    if (step >= cfg.warmup_steps) {
      Var logits = model.discriminate(tape, x_hat);
      Var adv = ops::bce_with_logits(logits, Array(logits.shape(), 1.0));
      out.parts.adversarial_g = adv.value().item();
      out.total = ops::add(out.total, ops::scale(adv, cfg.lambda_adv));
    } else {
      // Reported for the loss curve; zero weight during warm-up.
      Tape scratch;
      Var logits = model.discriminate(scratch, scratch.constant(x_hat.value()));
      out.parts.adversarial_g = ops::bce_with_logits(logits, Array(logits.shape(), 1.0)).value().item();
    }
  }
  out.parts.total = out.total.value().item();
  return out;
}

Var discriminator_loss(Tape& tape, const SpecVqGan& model, const Array& x, const Array& x_hat) {
  Var real = model.discriminate(tape, tape.constant(x));
  Var fake = model.discriminate(tape, tape.constant(x_hat));
  return ops::add(ops::bce_with_logits(real, Array(real.shape(), 1.0)), ops::bce_with_logits(fake, Array(fake.shape(), 0.0)));
}

namespace {

Array batch_of(std::span<const data::Clip> clips, std::span<const std::size_t> idx) {
  std::vector<const Array*> xs;
  for (auto i : idx) xs.push_back(&clips[i].mel.values);
  Array x = stack(xs);
  return std::move(x).reshaped({static_cast<std::int64_t>(idx.size()), 1, x.dim(1), x.dim(2)});
}

std::vector<Parameter*> concat_params(std::initializer_list<std::vector<Parameter*>> groups) {
  std::vector<Parameter*> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace

double reconstruction_mse(const SpecVqGan& model, std::span<const data::Clip> clips) {
  if (clips.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < clips.size(); i += 16) {
    std::vector<std::size_t> idx(std::min<std::size_t>(16, clips.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    const Array x = batch_of(clips, idx);
    Tape t;
    Var cells = to_cells(model.encode(t, t.constant(x)));
    const auto ids = nearest_codes(cells.value(), model.codebook());
    Var zq = t.constant(lookup(ids, model.codebook()));
    Var x_hat = model.decode(t, from_cells(zq, x.dim(0), model.latent_rows(), model.latent_cols()));
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = x_hat.value()[k] - x[k];
      total += d * d;
    }
    count += x.size();
  }
  return total / static_cast<double>(count);
}

CodebookReport train_codebook(SpecVqGan& model, eval::EventClassifier* perceptual, std::span<const data::Clip> train,
                              std::span<const data::Clip> val, std::ostream* loss_log) {
  if (train.empty()) throw std::invalid_argument("train_codebook: empty training split");
  const auto& cfg = model.config();
  auto& store = model.params();
  if (perceptual != nullptr) perceptual->params().set_trainable("", false);
  const auto gen_params = concat_params({store.with_prefix("enc."), store.with_prefix("dec."), store.with_prefix("codebook")});
  const auto disc_params = store.with_prefix("disc.");
  Codebook& cb = model.codebook();

  CodebookReport report;
  report.initial_val_mse = reconstruction_mse(model, val);
  Rng rng(cfg.seed, 0xb47 + static_cast<std::uint64_t>(model.step()));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), train.size());
  const std::int64_t epoch_steps = static_cast<std::int64_t>((train.size() + batch - 1) / batch);
  const std::int64_t m = model.latent_rows(), t_cols = model.latent_cols();
  if (loss_log != nullptr && model.step() == 0) *loss_log << "step\ttotal\trec\tcommit\tadv\tperc\n";

  while (model.step() < cfg.steps) {
    const std::int64_t step = model.step();
    std::vector<std::size_t> idx;
    while (idx.size() < batch) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const Array x = batch_of(train, idx);
    const double lr = cosine_lr(cfg.lr, step, cfg.steps, std::min<std::int64_t>(100, cfg.steps / 10));

    store.set_trainable("disc.", false);
    Tape tape;
    Var xv = tape.constant(x);
    Var cells = to_cells(model.encode(tape, xv));
    const Quantized q = quantize(cells.value(), cb);
    Var zq = ops::embedding(tape.param(cb.entries()), q.indices);
    Var x_hat = model.decode(tape, from_cells(ops::straight_through(zq, cells), x.dim(0), m, t_cols));
    GeneratorLoss gl = specvqgan_loss(tape, model, perceptual, xv, x_hat, cells, zq, step);
    store.zero_grad();
    tape.backward(gl.total);
    const auto res = adam_step(gen_params, {.lr = lr});
    if (!res.applied) log::warn("codebook step {}: skipped update, non-finite gradient in {}", step, res.offending);

    if (cfg.lambda_adv > 0.0 && step >= cfg.warmup_steps) {
      store.set_trainable("disc.", true);
      Tape dt;
      Var ld = discriminator_loss(dt, model, x, x_hat.value());
      dt.backward(ld);
      adam_step(disc_params, {.lr = lr});
      gl.parts.adversarial_d = ld.value().item();
    }
    store.set_trainable("disc.", true);

    model.set_step(step + 1);
    report.last = gl.parts;
    if (loss_log != nullptr) {
      *loss_log << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\n", step, gl.parts.total, gl.parts.reconstruction,
                               gl.parts.commitment_term, gl.parts.adversarial_g, gl.parts.perceptual);
    }
    if ((step + 1) % epoch_steps == 0) {
      report.perplexity = codebook_perplexity(cb.usage());
      const int restarted = dead_code_restart(cb, cells.value(), cfg.restart_threshold, rng);
      report.restarts += restarted;
      cb.reset_usage();
      log::info("codebook step {} rec {:.4f} perplexity {:.1f} restarted {}", step + 1, gl.parts.reconstruction,
                report.perplexity, restarted);
    }
  }
  report.final_val_mse = reconstruction_mse(model, val);
  if (!val.empty()) log::info("codebook val mse {:.4f} -> {:.4f}", report.initial_val_mse, report.final_val_mse);
  return report;
}

}  // namespace svqa::vq
