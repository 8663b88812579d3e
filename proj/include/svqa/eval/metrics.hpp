#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "svqa/core/array.hpp"
#include "svqa/data/dataset.hpp"
#include "svqa/eval/classifier.hpp"

namespace svqa::eval {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(range^2 / MSE), capped at 100 dB.
double psnr(const Array& x, const Array& x_hat, double data_range = 2.0);

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance of rows [N, D]; N < 2 throws std::invalid_argument.
Gaussian fit_gaussian(const Array& features);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with 1e-6 I added to both covariances.
double frechet_distance(const Gaussian& a, const Gaussian& b);

/// Frechet distance between Gaussian fits of two feature sets.
double fid(const Array& real, const Array& generated);

inline constexpr double kProbClamp = 1e-6;

/// Sum over classes of Bernoulli KL(p || q), both clamped to [1e-6, 1 - 1e-6].
double mmkl(std::span<const double> p_real, std::span<const double> q_gen);

struct TagScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Set overlap scores. An empty prediction has precision 0; an empty truth has recall 0.
TagScore tag_scores(std::span<const data::EventClass> truth, std::span<const data::EventClass> predicted);

/// Classes whose posterior exceeds the threshold.
std::vector<data::EventClass> predicted_tags(std::span<const double> posterior, double threshold = 0.5);

/// Generated grids for one condition, each paired with the real clip it was conditioned on.
struct GeneratedSet {
  std::string condition;
  std::vector<Array> mels;
  std::vector<std::size_t> source;
};

struct MetricRow {
  std::string condition;
  std::size_t samples = 0;
  double psnr_db = 0.0;
  double fid = 0.0;
  double mmkl_nats = 0.0;
  double tag_precision = 0.0;
  double tag_recall = 0.0;
  double tag_f1 = 0.0;
};

struct MetricReport {
  std::uint64_t seed = 0;
  std::vector<MetricRow> rows;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

/// One row per generated set, scored against the real clips it was paired with.
MetricReport evaluate_corpus(const EventClassifier& clf, std::span<const data::Clip> real,
                             std::span<const GeneratedSet> conditions, double threshold = 0.5, std::uint64_t seed = 0);

}  // namespace svqa::eval
