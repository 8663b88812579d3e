#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "grad_check.hpp"
#include "svqa/eval/metrics.hpp"

using namespace svqa;
using data::EventClass;

TEST_CASE("psnr") {
  const Array lo({40, 32}, -1.0), hi({40, 32}, 1.0);
  CHECK(eval::psnr(lo, lo) == 100.0);
  // MSE 4 against range^2 = 4.
  CHECK(eval::psnr(lo, hi) == 0.0);
  CHECK_THROWS_AS(eval::psnr(lo, Array({40, 31}, 0.0)), ShapeError);

  Rng rng(2);
  const Array x = testing::random_array({40, 32}, rng, -0.5, 0.5);
  const Array noise = testing::random_array({40, 32}, rng, -1.0, 1.0);
  double prev = 101.0;
  for (double amp : {0.001, 0.01, 0.05, 0.1, 0.3}) {
    Array y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += amp * noise[i];
    const double v = eval::psnr(x, y);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("frechet distance") {
  auto gauss = [](double mu, double var) {
    eval::Gaussian g;
    g.mean = Eigen::VectorXd::Constant(1, mu);
    g.cov = Eigen::MatrixXd::Constant(1, 1, var);
    return g;
  };
  CHECK(eval::frechet_distance(gauss(0, 1), gauss(1, 1)) == doctest::Approx(1.0).epsilon(1e-6));
  // (sigma_a - sigma_b)^2 with sigma = 1 and 2.
  CHECK(std::abs(eval::frechet_distance(gauss(0, 1), gauss(0, 4)) - 1.0) < 1e-6);
  CHECK(std::abs(eval::frechet_distance(gauss(2, 0.01), gauss(-1, 100)) - (9.0 + 9.9 * 9.9)) < 1e-9);
  CHECK(std::abs(eval::frechet_distance(gauss(0, 0), gauss(0, 9)) - 9.0) < 1e-12);

  SUBCASE("sample sets") {
    Rng rng(3);
    const Array a = testing::random_array({300, 4}, rng);
    const Array b = testing::random_array({250, 4}, rng, -0.5, 1.5);
    CHECK(eval::fid(a, a) < 1e-3);
    CHECK(eval::fid(a, b) == doctest::Approx(eval::fid(b, a)).epsilon(1e-9));
    Array shuffled({300, 4});
    for (std::int64_t i = 0; i < 300; ++i) {
      for (std::int64_t k = 0; k < 4; ++k) shuffled[static_cast<std::size_t>(i * 4 + k)] = a[static_cast<std::size_t>((299 - i) * 4 + k)];
    }
    CHECK(eval::fid(shuffled, b) == doctest::Approx(eval::fid(a, b)).epsilon(1e-9));
    CHECK(eval::fid(a, b) >= 0.0);
  }
  SUBCASE("samples with known moments") {
    // {-1, 1} has mean 0 and unbiased variance 2; {0, 2} has mean 1, variance 2.
    const Array a({2, 1}, std::vector<double>{-1, 1});
    const Array b({2, 1}, std::vector<double>{0, 2});
    CHECK(eval::fid(a, b) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(eval::fid(Array({1, 3}, 0.0), Array({4, 3}, 0.0)), std::invalid_argument);
    CHECK_THROWS_AS(eval::fid(Array({2, 3}, 0.0), Array({4, 2}, 0.0)), ShapeError);
  }
  SUBCASE("degenerate features") {
    // Zero covariance is lifted by the regularizer; result stays finite.
    CHECK(std::isfinite(eval::fid(Array({5, 3}, 0.0), Array({5, 3}, 1.0))));
    CHECK(eval::fid(Array({5, 3}, 0.0), Array({5, 3}, 1.0)) == doctest::Approx(3.0).epsilon(1e-6));
  }
}

TEST_CASE("mmkl") {
  const std::vector<double> p{0.9};
  const std::vector<double> q{0.5};
  CHECK(eval::mmkl(p, q) == doctest::Approx(0.9 * std::log(1.8) + 0.1 * std::log(0.2)).epsilon(1e-12));
  CHECK(std::abs(eval::mmkl(p, q) - 0.368) < 1e-3);
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    CHECK(eval::mmkl(a, a) == 0.0);
    CHECK(eval::mmkl(a, b) >= 0.0);
    CHECK(std::isfinite(eval::mmkl(a, b)));
  }
  const std::vector<double> one{1.0}, zero{0.0};
  CHECK(std::isfinite(eval::mmkl(one, zero)));
}

TEST_CASE("tag relevance") {
  const std::vector<EventClass> truth{EventClass::tone, EventClass::noise_burst};
  const std::vector<EventClass> only_tone{EventClass::tone};
  const auto s = eval::tag_scores(truth, only_tone);
  CHECK(s.precision == 1.0);
  CHECK(s.recall == 0.5);
  CHECK(s.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(eval::tag_scores(truth, truth).f1 == 1.0);
  const auto empty = eval::tag_scores(truth, {});
  CHECK(empty.precision == 0.0);
  CHECK(empty.recall == 0.0);
  CHECK(empty.f1 == 0.0);

  const std::vector<double> post{0.9, 0.2, 0.51, 0.5, 0.0, 0.7};
  CHECK(eval::predicted_tags(post) == std::vector<EventClass>{EventClass::tone, EventClass::noise_burst, EventClass::click_train});
}

TEST_CASE("mean average precision") {
  const Array scores({3, 1}, std::vector<double>{0.9, 0.8, 0.3});
  const Array targets({3, 1}, std::vector<double>{1, 0, 1});
  CHECK(eval::mean_average_precision(scores, targets) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  // Random scores land near the positive rate.
  Rng rng(6);
  Array rs({4000, 2}), rt({4000, 2});
  for (std::size_t i = 0; i < rs.size(); ++i) {
    rs[i] = rng.uniform();
    rt[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  CHECK(std::abs(eval::mean_average_precision(rs, rt) - 0.3) < 0.03);
}

TEST_CASE("classifier and corpus report") {
  const auto dir = std::filesystem::temp_directory_path() / "svqa_eval_test";
  std::filesystem::remove_all(dir);
  const auto manifest = data::generate_corpus(120, 4, dir);
  const dsp::AudioConfig audio;
  const auto fb = dsp::MelFilterbank::create(audio.sample_rate, audio.n_fft, audio.mel_bands);
  const auto clips = data::load_clips(manifest, dir, "", audio, fb);
  const std::span<const data::Clip> train(clips.data(), 90), held(clips.data() + 90, clips.size() - 90);

  eval::ClassifierConfig cfg;
  cfg.steps = 150;
  cfg.lr = 3e-3;
  eval::EventClassifier clf(cfg, audio.mel_bands, audio.frames());

  std::vector<const Array*> xs;
  for (const auto& c : clips) xs.push_back(&c.mel.values);
  const Array post = clf.posteriors(xs);
  CHECK(post.shape() == Shape{120, data::kNumClasses});
  for (double v : post.values()) CHECK((v > 0.0 && v < 1.0));

  SUBCASE("training beats an untrained network") {
    Array targets({static_cast<std::int64_t>(held.size()), data::kNumClasses});
    std::vector<const Array*> hx;
    for (std::size_t i = 0; i < held.size(); ++i) {
      hx.push_back(&held[i].mel.values);
      std::copy(held[i].tags.begin(), held[i].tags.end(), targets.data() + i * data::kNumClasses);
    }
    const double before = eval::mean_average_precision(clf.posteriors(hx), targets);
    const auto report = eval::train_classifier(clf, train, held);
    CHECK(report.heldout_map > before);
    CHECK(report.heldout_map > 0.6);
  }
  SUBCASE("a single labelled class is rejected") {
    std::vector<data::Clip> tone_only;
    for (const auto& c : clips) {
      if (c.row->caption.class_tags == std::vector<EventClass>{EventClass::tone}) tone_only.push_back(c);
    }
    REQUIRE(!tone_only.empty());
    CHECK_THROWS_AS(eval::train_classifier(clf, tone_only, {}), std::invalid_argument);
  }
  SUBCASE("ground truth against itself is the upper bound row") {
    eval::GeneratedSet self{"ground_truth", {}, {}};
    eval::GeneratedSet zeros{"silence", {}, {}};
    for (std::size_t i = 0; i < held.size(); ++i) {
      self.mels.push_back(held[i].mel.values);
      self.source.push_back(i);
      zeros.mels.push_back(Array(held[i].mel.values.shape(), -1.0));
      zeros.source.push_back(i);
    }
    const std::vector<eval::GeneratedSet> sets{self, zeros};
    const auto report = eval::evaluate_corpus(clf, held, sets, 0.5, 9);
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].psnr_db == 100.0);
    CHECK(report.rows[0].fid < 1e-3);
    CHECK(report.rows[0].mmkl_nats < 1e-6);
    CHECK(report.rows[1].fid > report.rows[0].fid);
    const auto back = eval::MetricReport::from_json(report.to_json());
    CHECK(back.to_json() == report.to_json());
    CHECK(back.seed == 9);
    CHECK(eval::evaluate_corpus(clf, held, sets, 0.5, 9).to_json() == report.to_json());
  }
  std::filesystem::remove_all(dir);
}
