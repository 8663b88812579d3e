#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "grad_cases.hpp"
#include "svqa/vq/specvqgan.hpp"

using namespace svqa;

namespace {

vq::VqConfig small_config() {
  vq::VqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_z = 8;
  cfg.channels = {4, 8, 8};
  cfg.disc_channels = 4;
  return cfg;
}

Array random_mel(std::int64_t m, std::int64_t t, std::uint64_t seed) {
  Rng rng(seed, 5);
  return testing::random_array({m, t}, rng, -1.0, 1.0);
}

vq::Codebook make_codebook(ParameterStore& store, std::vector<double> rows, int dim) {
  Rng rng(1);
  const int size = static_cast<int>(rows.size()) / dim;
  vq::Codebook cb(store, size, dim, rng);
  cb.entries().value = Array({size, dim}, std::move(rows));
  return cb;
}

double grad_abs_sum(const std::vector<Parameter*>& ps) {
  double s = 0.0;
  for (const auto* p : ps) {
    for (double g : p->grad.values()) s += std::abs(g);
  }
  return s;
}

}  // namespace

TEST_CASE("encode shape, determinism and finiteness") {
  vq::VqConfig cfg = small_config();
  vq::SpecVqGan model(cfg, 40, 320);
  CHECK(model.latent_rows() == 40 / 8);
  CHECK(model.latent_cols() == 320 / 8);
  const Array x = random_mel(40, 320, 1);
  const Array z = model.encode(x);
  CHECK(z.shape() == Shape{5, 40, cfg.n_z});
  CHECK(model.encode(x) == z);
  const Array floor = model.encode(Array({40, 320}, -1.0));
  for (double v : floor.values()) CHECK(std::isfinite(v));
  CHECK_THROWS(model.encode(Array({40, 300}, 0.0)));
  CHECK_THROWS(vq::SpecVqGan(cfg, 42, 320));
}

TEST_CASE("quantize picks the nearest entry") {
  ParameterStore store;
  vq::Codebook cb = make_codebook(store, {0, 0, 1, 1}, 2);
  SUBCASE("distance oracle") {
    const Array cell({1, 2}, std::vector<double>{0.2, 0.1});
    // 0.2^2 + 0.1^2 = 0.05 against 0.8^2 + 0.9^2 = 1.45.
    const auto q = vq::quantize(cell, cb);
    CHECK(q.indices == std::vector<int>{0});
    CHECK(q.z_q == Array({1, 2}, std::vector<double>{0, 0}));
    CHECK(cb.usage()[0] == 1);
    CHECK(cb.usage()[1] == 0);
  }
  SUBCASE("tie goes to the lowest index") {
    const auto q = vq::quantize(Array({1, 2}, std::vector<double>{0.5, 0.5}), cb);
    CHECK(q.indices == std::vector<int>{0});
  }
  SUBCASE("cell equal to an entry") {
    ParameterStore s2;
    vq::Codebook four = make_codebook(s2, {0, 0, 1, 1, -1, 2, 0.3, -0.7}, 2);
    const auto q = vq::quantize(Array({1, 2}, std::vector<double>{0.3, -0.7}), four);
    CHECK(q.indices == std::vector<int>{3});
    CHECK(q.z_q == Array({1, 2}, std::vector<double>{0.3, -0.7}));
  }
  SUBCASE("usage accumulates and resets") {
    vq::quantize(Array({3, 2}, std::vector<double>{0, 0, 1, 1, 0.9, 0.8}), cb);
    CHECK(cb.usage()[0] == 1);
    CHECK(cb.usage()[1] == 2);
    cb.reset_usage();
    CHECK(cb.usage()[1] == 0);
  }
  SUBCASE("width mismatch and bad ids") {
    CHECK_THROWS(vq::quantize(Array({1, 3}, 0.0), cb));
    const std::vector<int> bad{2};
    CHECK_THROWS_AS(vq::lookup(bad, cb), std::out_of_range);
  }
}

TEST_CASE("quantize inverts lookup on random grids") {
  Rng rng(17);
  ParameterStore store;
  vq::Codebook cb(store, 128, 8, rng);
  cb.entries().value = testing::random_array({128, 8}, rng);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> ids(12);
    for (auto& id : ids) id = static_cast<int>(rng.below(128));
    const Array rows = vq::lookup(ids, cb);
    CHECK(vq::nearest_codes(rows, cb) == ids);
  }
}

TEST_CASE("z_q rows are codebook rows") {
  vq::SpecVqGan model(small_config(), 40, 320);
  const auto [grid, z_q] = model.quantize(model.encode(random_mel(40, 320, 2)));
  CHECK(grid.m == 5);
  CHECK(grid.t == 40);
  const auto& book = model.codebook().entries().value;
  const auto dim = model.codebook().dim();
  for (std::int64_t c = 0; c < grid.m * grid.t; ++c) {
    const int id = grid.ids[static_cast<std::size_t>(c)];
    REQUIRE(id >= 0);
    REQUIRE(id < model.codebook().size());
    for (int k = 0; k < dim; ++k) CHECK(z_q[static_cast<std::size_t>(c * dim + k)] == book[static_cast<std::size_t>(id * dim + k)]);
  }
}

TEST_CASE("reconstruct shape and range") {
  vq::SpecVqGan model(small_config(), 40, 320);
  Rng rng(8);
  const Array z = testing::random_array({5, 40, 8}, rng, -20.0, 20.0);
  const Array mel = model.reconstruct(z);
  CHECK(mel.shape() == Shape{40, 320});
  for (double v : mel.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  vq::IndexGrid grid{5, 40, std::vector<int>(200, 3)};
  CHECK(model.decode_indices(grid).shape() == Shape{40, 320});
}

TEST_CASE("vq_loss terms") {
  Tape t;
  Rng rng(3);
  const Array x = testing::random_array({2, 5}, rng);
  const Array z = testing::random_array({4, 3}, rng);
  SUBCASE("exact match gives zero") {
    auto terms = vq::vq_loss(t.constant(x), t.constant(x), t.constant(z), t.constant(z), 0.25);
    CHECK(terms.total.value().item() == 0.0);
  }
  SUBCASE("beta zero removes commitment") {
    const Array zq = testing::random_array({4, 3}, rng);
    const Array xh = testing::random_array({2, 5}, rng);
    auto with = vq::vq_loss(t.constant(x), t.constant(xh), t.constant(z), t.constant(zq), 0.25);
    auto without = vq::vq_loss(t.constant(x), t.constant(xh), t.constant(z), t.constant(zq), 0.0);
    CHECK(without.commitment.value().item() == 0.0);
    CHECK(without.total.value().item() ==
          doctest::Approx(with.reconstruction.value().item() + with.codebook.value().item()).epsilon(1e-14));
    // Commitment equals beta times the codebook term's value.
    CHECK(with.commitment.value().item() == doctest::Approx(0.25 * with.codebook.value().item()).epsilon(1e-14));
  }
}

TEST_CASE("composed vq objective matches finite differences of its surrogate") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const auto c = testing::vq_loss_case(seed);
    CAPTURE(seed);
    CHECK(testing::max_grad_rel_error(c.fn, c.surrogate, c.inputs, seed) < 1e-4);
  }
}

TEST_CASE("stop-gradient placement in the model graph") {
  vq::SpecVqGan model(small_config(), 16, 32);
  auto& store = model.params();
  const auto enc = store.with_prefix("enc.");
  const auto book = store.with_prefix("codebook");
  Rng rng(21);
  const Array x = testing::random_array({2, 1, 16, 32}, rng, -1.0, 1.0);

  auto run = [&](int which) {
    store.zero_grad();
    Tape tape;
    Var xv = tape.constant(x);
    Var cells = vq::to_cells(model.encode(tape, xv));
    const auto ids = vq::nearest_codes(cells.value(), model.codebook());
    Var zq = ops::embedding(tape.param(model.codebook().entries()), ids);
    Var x_hat = model.decode(tape, vq::from_cells(ops::straight_through(zq, cells), 2, 2, 4));
    auto terms = vq::vq_loss(xv, x_hat, cells, zq, 0.25);
    const Var pick[] = {terms.reconstruction, terms.codebook, terms.commitment};
    tape.backward(pick[which]);
    return std::make_pair(cells.value(), ids);
  };

  SUBCASE("codebook term leaves the encoder untouched") {
    const auto [cells, ids] = run(1);
    CHECK(grad_abs_sum(enc) == 0.0);
    // d/dZ mean((sg(z_e) - z_q)^2) = 2 (z_q - z_e) / N, accumulated per chosen row.
    const auto& cb = model.codebook().entries();
    Array expect(cb.value.shape(), 0.0);
    const auto n = static_cast<double>(cells.size());
    const auto dim = cells.dim(1);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      for (std::int64_t k = 0; k < dim; ++k) {
        const auto row = static_cast<std::size_t>(ids[c] * dim + k);
        expect[row] += 2.0 * (cb.value[row] - cells[c * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)]) / n;
      }
    }
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(cb.grad[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  }
  SUBCASE("commitment term leaves the codebook untouched") {
    run(2);
    CHECK(grad_abs_sum(book) == 0.0);
    CHECK(grad_abs_sum(enc) > 0.0);
  }
  SUBCASE("reconstruction reaches the encoder through straight-through") {
    run(0);
    CHECK(grad_abs_sum(enc) > 0.0);
    CHECK(grad_abs_sum(book) == 0.0);
  }
}

TEST_CASE("discriminator output") {
  vq::SpecVqGan model(small_config(), 40, 320);
  Rng rng(4);
  const Array x = testing::random_array({1, 1, 40, 320}, rng, -1.0, 1.0);
  auto run = [&] {
    Tape t;
    return model.discriminate(t, t.constant(x)).value();
  };
  const Array out = run();
  REQUIRE(out.rank() == 4);
  CHECK(out.dim(2) >= 2);
  CHECK(out.dim(3) >= 2);
  CHECK(run() == out);
}

TEST_CASE("generator objective") {
  vq::VqConfig cfg = small_config();
  cfg.warmup_steps = 10;
  vq::SpecVqGan model(cfg, 40, 320);
  eval::EventClassifier clf(eval::ClassifierConfig{}, 40, 320);
  Rng rng(6);
  const Array x = testing::random_array({2, 1, 40, 320}, rng, -1.0, 1.0);
  const Array xh = testing::random_array({2, 1, 40, 320}, rng, -1.0, 1.0);
  const Array ze = testing::random_array({400, 8}, rng);
  const Array zq = testing::random_array({400, 8}, rng);

  SUBCASE("identical inputs give zero perceptual distance") {
    Tape t;
    CHECK(vq::perceptual_loss(t, clf, t.constant(x), t.constant(x)).value().item() == 0.0);
  }
  SUBCASE("per-scale formula") {
    Tape t;
    const double got = vq::perceptual_loss(t, clf, t.constant(x), t.constant(xh)).value().item();
    Tape t2;
    const auto fa = clf.forward(t2, t2.constant(x));
    const auto fb = clf.forward(t2, t2.constant(xh));
    double expect = 0.0;
    for (int s = 0; s < 3; ++s) {
      const Array& a = fa.scales[s].value();
      const Array& b = fb.scales[s].value();
      const auto batch = a.dim(0), ch = a.dim(1), h = a.dim(2), w = a.dim(3);
      double sq = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t i = 0; i < h * w; ++i) {
          double na = 0.0, nb = 0.0;
          for (std::int64_t c = 0; c < ch; ++c) {
            const auto k = static_cast<std::size_t>((n * ch + c) * h * w + i);
            na += a[k] * a[k];
            nb += b[k] * b[k];
          }
          na = std::sqrt(na + 1e-4);
          nb = std::sqrt(nb + 1e-4);
          for (std::int64_t c = 0; c < ch; ++c) {
            const auto k = static_cast<std::size_t>((n * ch + c) * h * w + i);
            const double d = a[k] / na - b[k] / nb;
            sq += d * d;
          }
        }
      }
      expect += sq / static_cast<double>(h * w * batch);
    }
    CHECK(got == doctest::Approx(expect).epsilon(1e-9));
  }
  SUBCASE("adversarial term is excluded during warm-up") {
    auto total_at = [&](std::int64_t step) {
      Tape t;
      auto g = vq::specvqgan_loss(t, model, &clf, t.constant(x), t.constant(xh), t.constant(ze), t.constant(zq), step);
      return g.parts;
    };
    const auto early = total_at(0);
    CHECK(early.adversarial_g > 0.0);
    CHECK(early.total == doctest::Approx(early.reconstruction + early.codebook_term + early.commitment_term +
                                         cfg.lambda_perc * early.perceptual)
                             .epsilon(1e-12));
    const auto late = total_at(10);
    CHECK(late.total == doctest::Approx(late.reconstruction + late.codebook_term + late.commitment_term +
                                        cfg.lambda_perc * late.perceptual + cfg.lambda_adv * late.adversarial_g)
                            .epsilon(1e-12));
  }
}

TEST_CASE("codebook perplexity") {
  std::vector<std::int64_t> one(128, 0);
  one[5] = 400;
  CHECK(vq::codebook_perplexity(one) == doctest::Approx(1.0));
  std::vector<std::int64_t> uniform(128, 3);
  CHECK(vq::codebook_perplexity(uniform) == doctest::Approx(128.0).epsilon(1e-12));
  std::vector<std::int64_t> half(128, 0);
  for (int i = 0; i < 128; i += 2) half[static_cast<std::size_t>(i)] = 7;
  // exp(-sum 1/64 ln 1/64) = 64.
  CHECK(vq::codebook_perplexity(half) == doctest::Approx(64.0).epsilon(1e-12));
  CHECK_THROWS(vq::codebook_perplexity(std::vector<std::int64_t>(4, 0)));
}

TEST_CASE("dead code restart") {
  Rng rng(9);
  ParameterStore store;
  vq::Codebook cb(store, 128, 4, rng);
  const Array cells = testing::random_array({50, 4}, rng);
  SUBCASE("all codes used") {
    std::vector<int> ids(128);
    std::iota(ids.begin(), ids.end(), 0);
    cb.count(ids);
    Rng r(1);
    CHECK(vq::dead_code_restart(cb, cells, 1.0, r) == 0);
  }
  SUBCASE("collapse onto one code") {
    std::vector<int> ids(300, 0);
    cb.count(ids);
    const Array before = cb.entries().value;
    Rng r(1);
    CHECK(vq::dead_code_restart(cb, cells, 1.0, r) == 127);
    const auto& book = cb.entries().value;
    for (int k = 0; k < 4; ++k) CHECK(book[static_cast<std::size_t>(k)] == before[static_cast<std::size_t>(k)]);
    for (int row = 1; row < 128; ++row) {
      bool found = false;
      for (int c = 0; c < 50 && !found; ++c) {
        bool same = true;
        for (int k = 0; k < 4; ++k) same = same && book[static_cast<std::size_t>(row * 4 + k)] == cells[static_cast<std::size_t>(c * 4 + k)];
        found = same;
      }
      CHECK(found);
    }
  }
  SUBCASE("deterministic given the stream") {
    std::vector<int> ids(10, 2);
    ParameterStore s2;
    Rng init(9);
    vq::Codebook other(s2, 128, 4, init);
    other.entries().value = cb.entries().value;
    cb.count(ids);
    other.count(ids);
    Rng r1(4), r2(4);
    vq::dead_code_restart(cb, cells, 1.0, r1);
    vq::dead_code_restart(other, cells, 1.0, r2);
    CHECK(cb.entries().value == other.entries().value);
  }
}

TEST_CASE("short training lowers validation error below the mean baseline") {
  const auto dir = std::filesystem::temp_directory_path() / "svqa_vq_test";
  std::filesystem::remove_all(dir);
  const auto manifest = data::generate_corpus(60, 5, dir);
  const dsp::AudioConfig audio;
  const auto fb = dsp::MelFilterbank::create(audio.sample_rate, audio.n_fft, audio.mel_bands);
  const auto train = data::load_clips(manifest, dir, "train", audio, fb);
  const auto val = data::load_clips(manifest, dir, "val", audio, fb);
  REQUIRE(!val.empty());

  vq::VqConfig cfg;
  cfg.codebook_size = 32;
  cfg.n_z = 16;
  cfg.channels = {8, 16, 16};
  cfg.disc_channels = 8;
  cfg.steps = 240;
  cfg.warmup_steps = 160;
  cfg.lr = 3e-3;
  cfg.batch = 4;
  vq::SpecVqGan model(cfg, audio.mel_bands, audio.frames());
  std::ostringstream log;
  const auto report = vq::train_codebook(model, nullptr, train, val, &log);
  CHECK(report.final_val_mse < report.initial_val_mse);

  Array mean(val.front().mel.values.shape(), 0.0);
  for (const auto& c : train) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += c.mel.values[i] / static_cast<double>(train.size());
  }
  double baseline = 0.0;
  for (const auto& c : val) {
    for (std::size_t i = 0; i < mean.size(); ++i) baseline += (c.mel.values[i] - mean[i]) * (c.mel.values[i] - mean[i]);
  }
  baseline /= static_cast<double>(val.size() * mean.size());
  CHECK(report.final_val_mse < baseline);
  CHECK(report.perplexity >= 1.0);
  CHECK(report.perplexity <= 32.0);

  std::istringstream lines(log.str());
  std::string line;
  int rows = 0;
  std::getline(lines, line);
  CHECK(line == "step\ttotal\trec\tcommit\tadv\tperc");
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 240);
  std::filesystem::remove_all(dir);
}
