#include "svqa/eval/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "svqa/core/log.hpp"

namespace svqa::eval {

double psnr(const Array& x, const Array& x_hat, double data_range) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError(fmt::format("psnr: shapes {} and {} differ", shape_str(x.shape()), shape_str(x_hat.shape())));
  }
  if (x.size() == 0) throw ShapeError("psnr: empty grids");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

Gaussian fit_gaussian(const Array& features) {
  if (features.rank() != 2) throw ShapeError("fit_gaussian: features must be [N, D]");
  const auto n = features.dim(0), d = features.dim(1);
  if (n < 2) throw std::invalid_argument(fmt::format("fid: need at least 2 samples, got {}", n));
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(features.data(), n, d);
  Gaussian g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  return g;
}

double frechet_distance(const Gaussian& a, const Gaussian& b) {
  if (a.mean.size() != b.mean.size()) throw ShapeError("fid: feature widths differ");
  const Eigen::MatrixXd& sa = a.cov;
  const Eigen::MatrixXd& sb = b.cov;
  // tr((Sa Sb)^(1/2)) = tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), both symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const Eigen::MatrixXd root_a = ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                                 ea.eigenvectors().transpose();
  const Eigen::MatrixXd inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lam = em.eigenvalues();
  if (lam.minCoeff() < -1e-8 * std::max(1.0, lam.maxCoeff())) {
    log::warn("fid: covariance product has negative eigenvalue {:.3e}; clamped", lam.minCoeff());
  }
  const double tr_root = lam.cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root;
  return std::max(0.0, value);
}

double fid(const Array& real, const Array& generated) { return frechet_distance(fit_gaussian(real), fit_gaussian(generated)); }

double mmkl(std::span<const double> p_real, std::span<const double> q_gen) {
  if (p_real.size() != q_gen.size()) throw ShapeError("mmkl: posterior widths differ");
  double kl = 0.0;
  for (std::size_t c = 0; c < p_real.size(); ++c) {
    const double p = std::clamp(p_real[c], kProbClamp, 1.0 - kProbClamp);
    const double q = std::clamp(q_gen[c], kProbClamp, 1.0 - kProbClamp);
    kl += p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
  }
  return kl;
}

TagScore tag_scores(std::span<const data::EventClass> truth, std::span<const data::EventClass> predicted) {
  std::size_t hit = 0;
  for (auto c : predicted) hit += std::find(truth.begin(), truth.end(), c) != truth.end() ? 1 : 0;
  TagScore s;
  s.precision = predicted.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(predicted.size());
  s.recall = truth.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(truth.size());
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::vector<data::EventClass> predicted_tags(std::span<const double> posterior, double threshold) {
  std::vector<data::EventClass> out;
  for (std::size_t c = 0; c < posterior.size(); ++c) {
    if (posterior[c] > threshold) out.push_back(static_cast<data::EventClass>(c));
  }
  return out;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"condition", r.condition},
                         {"samples", r.samples},
                         {"psnr_db", r.psnr_db},
                         {"fid", r.fid},
                         {"mmkl_nats", r.mmkl_nats},
                         {"tag_precision", r.tag_precision},
                         {"tag_recall", r.tag_recall},
                         {"tag_f1", r.tag_f1}});
  }
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport rep;
  rep.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& r : j.at("rows")) {
    MetricRow row;
    row.condition = r.at("condition").get<std::string>();
    row.samples = r.at("samples").get<std::size_t>();
    row.psnr_db = r.at("psnr_db").get<double>();
    row.fid = r.at("fid").get<double>();
    row.mmkl_nats = r.at("mmkl_nats").get<double>();
    row.tag_precision = r.at("tag_precision").get<double>();
    row.tag_recall = r.at("tag_recall").get<double>();
    row.tag_f1 = r.at("tag_f1").get<double>();
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

MetricReport evaluate_corpus(const EventClassifier& clf, std::span<const data::Clip> real,
                             std::span<const GeneratedSet> conditions, double threshold, std::uint64_t seed) {
  if (real.size() < 2) throw std::invalid_argument("evaluate_corpus: need at least two real clips");
  std::vector<const Array*> real_mels;
  for (const auto& c : real) real_mels.push_back(&c.mel.values);
  const Array real_post = clf.posteriors(real_mels);
  const Array real_emb = clf.embeddings(real_mels);
  const auto classes = static_cast<std::size_t>(real_post.dim(1));

  MetricReport report;
  report.seed = seed;
  for (const auto& set : conditions) {
    if (set.mels.size() != set.source.size()) throw std::invalid_argument("evaluate_corpus: mels and sources differ in length");
    if (set.mels.size() < 2) throw std::invalid_argument(fmt::format("evaluate_corpus: condition '{}' has fewer than two samples", set.condition));
    std::vector<const Array*> gen;
    for (const auto& m : set.mels) gen.push_back(&m);
    const Array post = clf.posteriors(gen);
    MetricRow row;
    row.condition = set.condition;
    row.samples = set.mels.size();
    row.fid = fid(real_emb, clf.embeddings(gen));
    for (std::size_t i = 0; i < set.mels.size(); ++i) {
      const std::size_t src = set.source[i];
      if (src >= real.size()) throw std::out_of_range("evaluate_corpus: source index out of range");
      row.psnr_db += psnr(real[src].mel.values, set.mels[i]);
      const std::span<const double> p(real_post.data() + src * classes, classes);
      const std::span<const double> q(post.data() + i * classes, classes);
      row.mmkl_nats += mmkl(p, q);
      const auto truth = real[src].row->caption.class_tags;
      const auto s = tag_scores(truth, predicted_tags(q, threshold));
      row.tag_precision += s.precision;
      row.tag_recall += s.recall;
      row.tag_f1 += s.f1;
    }
    const auto n = static_cast<double>(set.mels.size());
    row.psnr_db /= n;
    row.mmkl_nats /= n;
    row.tag_precision /= n;
    row.tag_recall /= n;
    row.tag_f1 /= n;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace svqa::eval
