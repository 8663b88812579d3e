#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "svqa/vq/specvqgan.hpp"

namespace svqa::vq {

Codebook::Codebook(ParameterStore& store, int size, int dim, Rng& rng) {
  if (size < 2) throw std::invalid_argument(fmt::format("codebook: size must be >= 2, got {}", size));
  if (dim < 1) throw std::invalid_argument(fmt::format("codebook: dim must be >= 1, got {}", dim));
  entries_ = &store.add("codebook", nn::uniform_init({size, dim}, 1.0 / size, rng));
  usage_.assign(static_cast<std::size_t>(size), 0);
}

void Codebook::count(std::span<const int> ids) {
  for (int id : ids) ++usage_[static_cast<std::size_t>(id)];
}

void Codebook::reset_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

std::vector<int> nearest_codes(const Array& cells, const Codebook& cb) {
  const Array& table = cb.entries().value;
  if (table.rank() != 2 || table.dim(0) < 1) throw std::invalid_argument("quantize: empty codebook");
  if (cells.rank() != 2 || cells.dim(1) != table.dim(1)) {
    throw ShapeError(fmt::format("quantize: cells {} do not match codebook {}", shape_str(cells.shape()),
                                 shape_str(table.shape())));
  }
  const std::int64_t n = cells.dim(0), l = table.dim(0), d = table.dim(1);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* c = cells.data() + i * d;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::int64_t k = 0; k < l; ++k) {
      const double* e = table.data() + k * d;
      double dist = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double diff = c[j] - e[j];
        dist += diff * diff;
      }
      // Strict comparison keeps the lowest index on ties.
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(k);
      }
    }
    ids[static_cast<std::size_t>(i)] = arg;
  }
  return ids;
}

Array lookup(std::span<const int> ids, const Codebook& cb) {
  const Array& table = cb.entries().value;
  const std::int64_t d = table.dim(1);
  Array out({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cb.size()) {
      throw std::out_of_range(fmt::format("lookup: index {} outside codebook of size {}", ids[i], cb.size()));
    }
    std::copy_n(table.data() + ids[i] * d, d, out.data() + i * static_cast<std::size_t>(d));
  }
  return out;
}

Quantized quantize(const Array& cells, Codebook& cb) {
  Quantized q;
  q.indices = nearest_codes(cells, cb);
  q.z_q = lookup(q.indices, cb);
  cb.count(q.indices);
  return q;
}

double codebook_perplexity(std::span<const std::int64_t> usage) {
  double total = 0.0;
  for (auto u : usage) total += static_cast<double>(u);
  if (total <= 0.0) throw std::invalid_argument("codebook_perplexity: no quantizations recorded");
  double h = 0.0;
  for (auto u : usage) {
    if (u == 0) continue;
    const double p = static_cast<double>(u) / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

int dead_code_restart(Codebook& cb, const Array& recent_cells, double threshold, Rng& rng) {
  const auto usage = cb.usage();
  Array& table = cb.entries().value;
  const std::int64_t d = table.dim(1);
  if (recent_cells.rank() != 2 || recent_cells.dim(1) != d || recent_cells.dim(0) < 1) {
    throw ShapeError("dead_code_restart: recent cells " + shape_str(recent_cells.shape()));
  }
  int restarted = 0;
  for (int k = 0; k < cb.size(); ++k) {
    if (static_cast<double>(usage[static_cast<std::size_t>(k)]) >= threshold) continue;
    const auto src = rng.below(recent_cells.dim(0));
    std::copy_n(recent_cells.data() + src * d, d, table.data() + k * d);
    ++restarted;
  }
  return restarted;
}

Var to_cells(Var z) {
  const std::int64_t b = z.dim(0), c = z.dim(1), m = z.dim(2), t = z.dim(3);
  return ops::reshape(ops::permute(z, {0, 2, 3, 1}), {b * m * t, c});
}

Var from_cells(Var cells, std::int64_t batch, std::int64_t m, std::int64_t t) {
  return ops::permute(ops::reshape(cells, {batch, m, t, cells.dim(1)}), {0, 3, 1, 2});
}

VqTerms vq_loss(Var x, Var x_hat, Var z_e, Var z_q, double beta) {
  VqTerms out;
  out.reconstruction = ops::mse(x_hat, x);
  out.codebook = ops::mse(ops::stop_gradient(z_e), z_q);
  out.commitment = ops::scale(ops::mse(ops::stop_gradient(z_q), z_e), beta);
  out.total = ops::add(ops::add(out.reconstruction, out.codebook), out.commitment);
  return out;
}

}  // namespace svqa::vq
