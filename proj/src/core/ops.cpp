#include "svqa/core/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

namespace svqa::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError("op '" + std::string(op) + "': " + what);
}

void require_valid(std::string_view op, Var a) {
  if (!a.valid()) shape_fail(op, "invalid operand");
}

void require_same_tape(std::string_view op, Var a, Var b) {
  require_valid(op, a);
  require_valid(op, b);
  if (&a.tape() != &b.tape()) shape_fail(op, "operands on different tapes");
}

void require_same_shape(std::string_view op, Var a, Var b) {
  require_same_tape(op, a, b);
  if (a.shape() != b.shape()) shape_fail(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void accumulate(Array* sink, const Array& g) {
  if (sink == nullptr) return;
  double* s = sink->data();
  const double* p = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) s[i] += p[i];
}

/// Elementwise op; `deriv(x, y)` gives dy/dx from input x and output y.
template <typename Fwd, typename Deriv>
Var unary(std::string_view op, Var a, Fwd fwd, Deriv deriv) {
  require_valid(op, a);
  const Array& x = a.value();
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  const int ia = a.id();
  return a.tape().record(op, {ia}, std::move(out), [ia, deriv](Tape& t, const Array& y, const Array& g) {
    Array* sink = t.grad_sink(ia);
    if (sink == nullptr) return;
    const Array& xin = t.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * deriv(xin[i], y[i]);
  });
}

std::int64_t last_dim(std::string_view op, const Array& a) {
  if (a.rank() < 1) shape_fail(op, "needs rank >= 1, got scalar");
  return a.dim(-1);
}

Array permute_array(const Array& in, const std::vector<int>& perm) {
  const int r = in.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in.shape()[i + 1];
  std::vector<std::int64_t> stride_for_out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in.shape()[perm[i]];
    stride_for_out[i] = in_strides[perm[i]];
  }
  Array out(out_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = in[static_cast<std::size_t>(src)];
    for (int ax = r - 1; ax >= 0; --ax) {
      if (++idx[ax] < out_shape[ax]) {
        src += stride_for_out[ax];
        break;
      }
      src -= stride_for_out[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

struct ConvGeom {
  std::int64_t channels, height, width;  // image the columns are taken from
  std::int64_t kh, kw;
  std::int64_t out_h, out_w;
  Conv2dSpec spec;

  std::int64_t rows() const { return channels * kh * kw; }
  std::int64_t cols() const { return out_h * out_w; }
};

// col[(c*kh + i)*kw + j, oy*out_w + ox] = img[c, oy*sh - ph + i, ox*sw - pw + j]
void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.spec.stride_h - g.spec.pad_h + i;
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.height + y) * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t x = ox * g.spec.stride_w - g.spec.pad_w + j;
            dst[ox] = (x >= 0 && x < g.width) ? src[x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, double* img) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.spec.stride_h - g.spec.pad_h + i;
          if (y < 0 || y >= g.height) continue;
          const double* src = row + oy * g.out_w;
          double* dst = img + (c * g.height + y) * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t x = ox * g.spec.stride_w - g.spec.pad_w + j;
            if (x >= 0 && x < g.width) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

void check_spec(std::string_view op, const Conv2dSpec& s) {
  if (s.stride_h < 1 || s.stride_w < 1 || s.pad_h < 0 || s.pad_w < 0) shape_fail(op, "invalid stride/padding");
}

}  // namespace

Var matmul(Var a, Var b) {
  constexpr std::string_view op = "matmul";
  require_same_tape(op, a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (bv.rank() != 2) shape_fail(op, "rhs must be 2-D, got " + shape_str(bv.shape()));
  const std::int64_t k = last_dim(op, av);
  if (k != bv.dim(0)) shape_fail(op, shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::int64_t n = bv.dim(1);
  const std::int64_t m = static_cast<std::int64_t>(av.size()) / std::max<std::int64_t>(k, 1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Array out(out_shape);
  MatMap(out.data(), m, n).noalias() = CMatMap(av.data(), m, k) * CMatMap(bv.data(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(op, {ia, ib}, std::move(out), [ia, ib, m, k, n](Tape& t, const Array&, const Array& g) {
    CMatMap gm(g.data(), m, n);
    if (Array* da = t.grad_sink(ia)) {
      MatMap(da->data(), m, k).noalias() += gm * CMatMap(t.value(ib).data(), k, n).transpose();
    }
    if (Array* db = t.grad_sink(ib)) {
      MatMap(db->data(), k, n).noalias() += CMatMap(t.value(ia).data(), m, k).transpose() * gm;
    }
  });
}

Var transpose(Var a) {
  constexpr std::string_view op = "transpose";
  require_valid(op, a);
  if (a.value().rank() != 2) shape_fail(op, "expects 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Var permute(Var a, std::vector<int> perm) {
  constexpr std::string_view op = "permute";
  require_valid(op, a);
  const Array& x = a.value();
  const int r = x.rank();
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expected(static_cast<std::size_t>(r));
  std::iota(expected.begin(), expected.end(), 0);
  if (sorted != expected) shape_fail(op, "invalid permutation for rank " + std::to_string(r));
  std::vector<int> inverse(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) inverse[perm[i]] = i;
  const int ia = a.id();
  return a.tape().record(op, {ia}, permute_array(x, perm), [ia, inverse](Tape& t, const Array&, const Array& g) {
    if (Array* da = t.grad_sink(ia)) accumulate(da, permute_array(g, inverse));
  });
}

Var reshape(Var a, Shape shape) {
  constexpr std::string_view op = "reshape";
  require_valid(op, a);
  if (shape_size(shape) != static_cast<std::int64_t>(a.size())) {
    shape_fail(op, shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const int ia = a.id();
  return a.tape().record(op, {ia}, a.value().reshaped(std::move(shape)),
                         [ia](Tape& t, const Array&, const Array& g) { accumulate(t.grad_sink(ia), g); });
}

Var add(Var a, Var b) {
  constexpr std::string_view op = "add";
  require_same_shape(op, a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(op, {ia, ib}, std::move(out), [ia, ib](Tape& t, const Array&, const Array& g) {
    accumulate(t.grad_sink(ia), g);
    accumulate(t.grad_sink(ib), g);
  });
}

Var sub(Var a, Var b) {
  constexpr std::string_view op = "sub";
  require_same_shape(op, a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(op, {ia, ib}, std::move(out), [ia, ib](Tape& t, const Array&, const Array& g) {
    accumulate(t.grad_sink(ia), g);
    if (Array* db = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  constexpr std::string_view op = "mul";
  require_same_shape(op, a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(op, {ia, ib}, std::move(out), [ia, ib](Tape& t, const Array&, const Array& g) {
    if (Array* da = t.grad_sink(ia)) {
      const Array& bv2 = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv2[i];
    }
    if (Array* db = t.grad_sink(ib)) {
      const Array& av2 = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av2[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  constexpr std::string_view op = "add_bias";
  require_same_tape(op, x, bias);
  const std::int64_t d = last_dim(op, x.value());
  if (static_cast<std::int64_t>(bias.size()) != d) {
    shape_fail(op, "bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  Array out = x.value();
  const Array& bv = bias.value();
  const std::int64_t rows = static_cast<std::int64_t>(out.size()) / std::max<std::int64_t>(d, 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] += bv[static_cast<std::size_t>(j)];
  }
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(op, {ix, ib}, std::move(out), [ix, ib, rows, d](Tape& t, const Array&, const Array& g) {
    accumulate(t.grad_sink(ix), g);
    if (Array* db = t.grad_sink(ib)) {
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < d; ++j) (*db)[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
      }
    }
  });
}

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var mul_scalar(Var a, Var s) {
  constexpr std::string_view op = "mul_scalar";
  require_same_tape(op, a, s);
  if (s.size() != 1) shape_fail(op, "scalar operand has shape " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Array out = a.value();
  for (auto& v : out.values()) v *= sv;
  const int ia = a.id(), is = s.id();
  return a.tape().record(op, {ia, is}, std::move(out), [ia, is](Tape& t, const Array&, const Array& g) {
    const double s2 = t.value(is)[0];
    if (Array* da = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * s2;
    }
    if (Array* ds = t.grad_sink(is)) {
      const Array& av = t.value(ia);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*ds)[0] += acc;
    }
  });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  constexpr std::string_view op = "layer_norm";
  require_same_tape(op, x, gain);
  require_same_tape(op, x, bias);
  const std::int64_t d = last_dim(op, x.value());
  if (static_cast<std::int64_t>(gain.size()) != d || static_cast<std::int64_t>(bias.size()) != d) {
    shape_fail(op, "gain/bias must have " + std::to_string(d) + " elements");
  }
  const Array& xv = x.value();
  const std::int64_t rows = static_cast<std::int64_t>(xv.size()) / std::max<std::int64_t>(d, 1);
  Array out(xv.shape());
  Array xhat(xv.shape());
  std::vector<double> rstd(static_cast<std::size_t>(rows));
  const Array& gv = gain.value();
  const Array& bv = bias.value();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = xv.data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += px[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const double h = (px[j] - mu) * rs;
      xhat[static_cast<std::size_t>(r * d + j)] = h;
      out[static_cast<std::size_t>(r * d + j)] = h * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      op, {ix, ig, ib}, std::move(out),
      [ix, ig, ib, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Array&, const Array& g) {
        const Array& gv2 = t.value(ig);
        Array* dx = t.grad_sink(ix);
        Array* dg = t.grad_sink(ig);
        Array* db = t.grad_sink(ib);
        std::vector<double> dxhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r * d);
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double gj = g[off + j];
            if (dg) (*dg)[static_cast<std::size_t>(j)] += gj * xhat[off + j];
            if (db) (*db)[static_cast<std::size_t>(j)] += gj;
            dxhat[j] = gj * gv2[static_cast<std::size_t>(j)];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[off + j];
          }
          if (!dx) continue;
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          const double rs = rstd[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < d; ++j) {
            (*dx)[off + j] += rs * (dxhat[j] - mean_dxhat - xhat[off + j] * mean_dxhat_xhat);
          }
        }
      });
}

Var softmax(Var x) {
  constexpr std::string_view op = "softmax";
  require_valid(op, x);
  const Array& xv = x.value();
  const std::int64_t d = last_dim(op, xv);
  const std::int64_t rows = static_cast<std::int64_t>(xv.size()) / std::max<std::int64_t>(d, 1);
  Array out(xv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* px = xv.data() + r * d;
    double* py = out.data() + r * d;
    const double mx = *std::max_element(px, px + d);
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) z += (py[j] = std::exp(px[j] - mx));
    for (std::int64_t j = 0; j < d; ++j) py[j] /= z;
  }
  const int ix = x.id();
  return x.tape().record(op, {ix}, std::move(out), [ix, rows, d](Tape& t, const Array& y, const Array& g) {
    Array* dx = t.grad_sink(ix);
    if (!dx) return;
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r * d);
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += g[off + j] * y[off + j];
      for (std::int64_t j = 0; j < d; ++j) (*dx)[off + j] += y[off + j] * (g[off + j] - dot);
    }
  });
}

Var l2_normalize(Var x, double eps) {
  constexpr std::string_view op = "l2_normalize";
  require_valid(op, x);
  const Array& xv = x.value();
  const std::int64_t d = last_dim(op, xv);
  const std::int64_t rows = static_cast<std::int64_t>(xv.size()) / std::max<std::int64_t>(d, 1);
  Array out(xv.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += xv[static_cast<std::size_t>(r * d + j)] * xv[static_cast<std::size_t>(r * d + j)];
    const double nrm = std::sqrt(ss + eps);
    norms[static_cast<std::size_t>(r)] = nrm;
    for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] = xv[static_cast<std::size_t>(r * d + j)] / nrm;
  }
  const int ix = x.id();
  return x.tape().record(op, {ix}, std::move(out),
                         [ix, rows, d, norms = std::move(norms)](Tape& t, const Array& y, const Array& g) {
                           Array* dx = t.grad_sink(ix);
                           if (!dx) return;
                           for (std::int64_t r = 0; r < rows; ++r) {
                             const std::size_t off = static_cast<std::size_t>(r * d);
                             double dot = 0.0;
                             for (std::int64_t j = 0; j < d; ++j) dot += g[off + j] * y[off + j];
                             const double nrm = norms[static_cast<std::size_t>(r)];
                             for (std::int64_t j = 0; j < d; ++j) (*dx)[off + j] += (g[off + j] - y[off + j] * dot) / nrm;
                           }
                         });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  constexpr std::string_view op = "cross_entropy";
  require_valid(op, logits);
  const Array& lv = logits.value();
  if (lv.rank() != 2) shape_fail(op, "logits must be [N, C], got " + shape_str(lv.shape()));
  const std::int64_t n = lv.dim(0), c = lv.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    shape_fail(op, std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  if (n == 0) shape_fail(op, "empty batch");
  Array probs(lv.shape());
  double loss = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= c) throw ContractViolation("cross_entropy: target " + std::to_string(tgt) + " out of range");
    const double* px = lv.data() + r * c;
    double* pp = probs.data() + r * c;
    const double mx = *std::max_element(px, px + c);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += (pp[j] = std::exp(px[j] - mx));
    for (std::int64_t j = 0; j < c; ++j) pp[j] /= z;
    loss += (std::log(z) + mx) - px[tgt];
  }
  loss /= static_cast<double>(n);
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape().record(op, {il}, Array::scalar(loss),
                              [il, n, c, tg = std::move(tg), probs = std::move(probs)](Tape& t, const Array&, const Array& g) {
                                Array* dl = t.grad_sink(il);
                                if (!dl) return;
                                const double s = g[0] / static_cast<double>(n);
                                for (std::int64_t r = 0; r < n; ++r) {
                                  for (std::int64_t j = 0; j < c; ++j) {
                                    (*dl)[static_cast<std::size_t>(r * c + j)] += s * probs[static_cast<std::size_t>(r * c + j)];
                                  }
                                  (*dl)[static_cast<std::size_t>(r * c + tg[static_cast<std::size_t>(r)])] -= s;
                                }
                              });
}

Var bce_with_logits(Var logits, const Array& targets) {
  constexpr std::string_view op = "bce_with_logits";
  require_valid(op, logits);
  const Array& lv = logits.value();
  if (lv.shape() != targets.shape()) shape_fail(op, shape_str(lv.shape()) + " vs targets " + shape_str(targets.shape()));
  if (lv.empty()) shape_fail(op, "empty input");
  double loss = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double x = lv[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(lv.size());
  const int il = logits.id();
  return logits.tape().record(op, {il}, Array::scalar(loss), [il, targets](Tape& t, const Array&, const Array& g) {
    Array* dl = t.grad_sink(il);
    if (!dl) return;
    const Array& x = t.value(il);
    const double s = g[0] / static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sig = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      (*dl)[i] += s * (sig - targets[i]);
    }
  });
}

Var mse(Var a, Var b) {
  constexpr std::string_view op = "mse";
  require_same_shape(op, a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.empty()) shape_fail(op, "empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double n = static_cast<double>(av.size());
  const int ia = a.id(), ib = b.id();
  return a.tape().record(op, {ia, ib}, Array::scalar(acc / n), [ia, ib, n](Tape& t, const Array&, const Array& g) {
    const Array& x = t.value(ia);
    const Array& y = t.value(ib);
    const double s = 2.0 * g[0] / n;
    if (Array* da = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*da)[i] += s * (x[i] - y[i]);
    }
    if (Array* db = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*db)[i] -= s * (x[i] - y[i]);
    }
  });
}

Var sum(Var a) {
  constexpr std::string_view op = "sum";
  require_valid(op, a);
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  const int ia = a.id();
  return a.tape().record(op, {ia}, Array::scalar(acc), [ia](Tape& t, const Array&, const Array& g) {
    if (Array* da = t.grad_sink(ia)) {
      for (auto& v : da->values()) v += g[0];
    }
  });
}

Var mean(Var a) {
  if (a.size() == 0) shape_fail("mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var embedding(Var table, std::span<const int> ids) {
  constexpr std::string_view op = "embedding";
  require_valid(op, table);
  const Array& tv = table.value();
  if (tv.rank() != 2) shape_fail(op, "table must be [V, d], got " + shape_str(tv.shape()));
  const std::int64_t vocab = tv.dim(0), d = tv.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  Array out(Shape{n, d});
  for (std::int64_t r = 0; r < n; ++r) {
    const int id = ids[static_cast<std::size_t>(r)];
    if (id < 0 || id >= vocab) {
      throw ContractViolation("embedding: index " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + id * d, d, out.data() + r * d);
  }
  const int it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape().record(op, {it}, std::move(out), [it, d, idv = std::move(idv)](Tape& t, const Array&, const Array& g) {
    Array* dt = t.grad_sink(it);
    if (!dt) return;
    for (std::size_t r = 0; r < idv.size(); ++r) {
      double* dst = dt->data() + idv[r] * d;
      const double* src = g.data() + static_cast<std::int64_t>(r) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var concat(std::span<const Var> xs, int axis) {
  constexpr std::string_view op = "concat";
  if (xs.empty()) shape_fail(op, "no inputs");
  for (Var x : xs) require_same_tape(op, xs[0], x);
  const Shape& s0 = xs[0].shape();
  const int r = static_cast<int>(s0.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail(op, "axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (Var x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != r) shape_fail(op, "rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && s[i] != s0[i]) shape_fail(op, shape_str(s) + " vs " + shape_str(s0));
    }
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < r; ++i) inner *= s0[i];
  Array out(out_shape);
  const std::int64_t out_row = out_shape[axis] * inner;
  std::vector<std::int64_t> widths;
  std::vector<int> ids;
  std::int64_t offset = 0;
  for (Var x : xs) {
    const std::int64_t w = x.shape()[axis] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(x.value().data() + o * w, w, out.data() + o * out_row + offset);
    }
    widths.push_back(w);
    ids.push_back(x.id());
    offset += w;
  }
  std::vector<int> inputs = ids;
  return xs[0].tape().record(op, std::move(inputs), std::move(out),
                             [ids, widths, outer, out_row](Tape& t, const Array&, const Array& g) {
                               std::int64_t off = 0;
                               for (std::size_t k = 0; k < ids.size(); ++k) {
                                 const std::int64_t w = widths[k];
                                 if (Array* dx = t.grad_sink(ids[k])) {
                                   for (std::int64_t o = 0; o < outer; ++o) {
                                     const double* src = g.data() + o * out_row + off;
                                     double* dst = dx->data() + o * w;
                                     for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
                                   }
                                 }
                                 off += w;
                               }
                             });
}

Var narrow(Var x, int axis, std::int64_t start, std::int64_t length) {
  constexpr std::string_view op = "narrow";
  require_valid(op, x);
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail(op, "axis out of range");
  if (start < 0 || length < 0 || start + length > s[axis]) {
    shape_fail(op, "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " + shape_str(s));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = length;
  Array out(out_shape);
  const std::int64_t in_row = s[axis] * inner, w = length * inner, off = start * inner;
  for (std::int64_t o = 0; o < outer; ++o) std::copy_n(x.value().data() + o * in_row + off, w, out.data() + o * w);
  const int ix = x.id();
  return x.tape().record(op, {ix}, std::move(out), [ix, outer, in_row, w, off](Tape& t, const Array&, const Array& g) {
    Array* dx = t.grad_sink(ix);
    if (!dx) return;
    for (std::int64_t o = 0; o < outer; ++o) {
      double* dst = dx->data() + o * in_row + off;
      const double* src = g.data() + o * w;
      for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
    }
  });
}

Var conv2d(Var x, Var weight, Var bias, Conv2dSpec spec) {
  constexpr std::string_view op = "conv2d";
  require_same_tape(op, x, weight);
  check_spec(op, spec);
  const Array& xv = x.value();
  const Array& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1)) {
    shape_fail(op, "input " + shape_str(xv.shape()) + " with weight " + shape_str(wv.shape()));
  }
  const bool has_bias = bias.valid();
  if (has_bias && static_cast<std::int64_t>(bias.size()) != wv.dim(0)) shape_fail(op, "bias size mismatch");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::int64_t o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const std::int64_t oh = (h + 2 * spec.pad_h - kh) / spec.stride_h + 1;
  const std::int64_t ow = (w + 2 * spec.pad_w - kw) / spec.stride_w + 1;
  if (h + 2 * spec.pad_h < kh || w + 2 * spec.pad_w < kw || oh < 1 || ow < 1) {
    shape_fail(op, "kernel larger than padded input " + shape_str(xv.shape()));
  }
  const ConvGeom geom{c, h, w, kh, kw, oh, ow, spec};
  Array out(Shape{n, o, oh, ow});
  std::vector<double> col(static_cast<std::size_t>(geom.rows() * geom.cols()));
  CMatMap wm(wv.data(), o, geom.rows());
  for (std::int64_t b = 0; b < n; ++b) {
    im2col(xv.data() + b * c * h * w, geom, col.data());
    MatMap om(out.data() + b * o * oh * ow, o, oh * ow);
    om.noalias() = wm * CMatMap(col.data(), geom.rows(), geom.cols());
    if (has_bias) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), o);
  }
  std::vector<int> inputs{x.id(), weight.id()};
  if (has_bias) inputs.push_back(bias.id());
  const int ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : -1;
  return x.tape().record(op, std::move(inputs), std::move(out), [=](Tape& t, const Array&, const Array& g) {
    Array* dx = t.grad_sink(ix);
    Array* dw = t.grad_sink(iw);
    Array* db = ib >= 0 ? t.grad_sink(ib) : nullptr;
    const Array& xin = t.value(ix);
    CMatMap wmat(t.value(iw).data(), o, geom.rows());
    std::vector<double> colb(static_cast<std::size_t>(geom.rows() * geom.cols()));
    for (std::int64_t b = 0; b < n; ++b) {
      CMatMap gm(g.data() + b * o * oh * ow, o, oh * ow);
      if (db) Eigen::Map<Eigen::VectorXd>(db->data(), o) += gm.rowwise().sum();
      if (dw) {
        im2col(xin.data() + b * c * h * w, geom, colb.data());
        MatMap(dw->data(), o, geom.rows()).noalias() += gm * CMatMap(colb.data(), geom.rows(), geom.cols()).transpose();
      }
      if (dx) {
        MatMap(colb.data(), geom.rows(), geom.cols()).noalias() = wmat.transpose() * gm;
        col2im(colb.data(), geom, dx->data() + b * c * h * w);
      }
    }
  });
}

Var conv_transpose2d(Var x, Var weight, Var bias, Conv2dSpec spec) {
  constexpr std::string_view op = "conv_transpose2d";
  require_same_tape(op, x, weight);
  check_spec(op, spec);
  const Array& xv = x.value();
  const Array& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(0) != xv.dim(1)) {
    shape_fail(op, "input " + shape_str(xv.shape()) + " with weight " + shape_str(wv.shape()));
  }
  const bool has_bias = bias.valid();
  if (has_bias && static_cast<std::int64_t>(bias.size()) != wv.dim(1)) shape_fail(op, "bias size mismatch");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::int64_t o = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  const std::int64_t oh = (h - 1) * spec.stride_h - 2 * spec.pad_h + kh;
  const std::int64_t ow = (w - 1) * spec.stride_w - 2 * spec.pad_w + kw;
  if (oh < 1 || ow < 1) shape_fail(op, "non-positive output size");
  // Columns are taken from the output image; the input plays the role of conv output.
  const ConvGeom geom{o, oh, ow, kh, kw, h, w, spec};
  Array out(Shape{n, o, oh, ow});
  std::vector<double> col(static_cast<std::size_t>(geom.rows() * geom.cols()));
  CMatMap wm(wv.data(), c, geom.rows());
  for (std::int64_t b = 0; b < n; ++b) {
    MatMap(col.data(), geom.rows(), geom.cols()).noalias() = wm.transpose() * CMatMap(xv.data() + b * c * h * w, c, h * w);
    col2im(col.data(), geom, out.data() + b * o * oh * ow);
    if (has_bias) {
      MatMap(out.data() + b * o * oh * ow, o, oh * ow).colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), o);
    }
  }
  std::vector<int> inputs{x.id(), weight.id()};
  if (has_bias) inputs.push_back(bias.id());
  const int ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : -1;
  return x.tape().record(op, std::move(inputs), std::move(out), [=](Tape& t, const Array&, const Array& g) {
    Array* dx = t.grad_sink(ix);
    Array* dw = t.grad_sink(iw);
    Array* db = ib >= 0 ? t.grad_sink(ib) : nullptr;
    const Array& xin = t.value(ix);
    CMatMap wmat(t.value(iw).data(), c, geom.rows());
    std::vector<double> colb(static_cast<std::size_t>(geom.rows() * geom.cols()));
    for (std::int64_t b = 0; b < n; ++b) {
      const double* gb = g.data() + b * o * oh * ow;
      if (db) Eigen::Map<Eigen::VectorXd>(db->data(), o) += CMatMap(gb, o, oh * ow).rowwise().sum();
      if (!dx && !dw) continue;
      im2col(gb, geom, colb.data());
      CMatMap cm(colb.data(), geom.rows(), geom.cols());
      if (dx) MatMap(dx->data() + b * c * h * w, c, h * w).noalias() += wmat * cm;
      if (dw) MatMap(dw->data(), c, geom.rows()).noalias() += CMatMap(xin.data() + b * c * h * w, c, h * w) * cm.transpose();
    }
  });
}

Var global_avg_pool(Var x) {
  constexpr std::string_view op = "global_avg_pool";
  require_valid(op, x);
  const Array& xv = x.value();
  if (xv.rank() != 4) shape_fail(op, "expects [N,C,H,W], got " + shape_str(xv.shape()));
  const std::int64_t nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Array out(Shape{xv.dim(0), xv.dim(1)});
  for (std::int64_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < hw; ++j) acc += xv[static_cast<std::size_t>(i * hw + j)];
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(hw);
  }
  const int ix = x.id();
  return x.tape().record(op, {ix}, std::move(out), [ix, nc, hw](Tape& t, const Array&, const Array& g) {
    Array* dx = t.grad_sink(ix);
    if (!dx) return;
    for (std::int64_t i = 0; i < nc; ++i) {
      const double gi = g[static_cast<std::size_t>(i)] / static_cast<double>(hw);
      for (std::int64_t j = 0; j < hw; ++j) (*dx)[static_cast<std::size_t>(i * hw + j)] += gi;
    }
  });
}

Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask) {
  constexpr std::string_view op = "attention";
  require_same_shape(op, q, k);
  require_same_shape(op, q, v);
  const Array& qv = q.value();
  if (qv.rank() != 3) shape_fail(op, "expects [B, S, d], got " + shape_str(qv.shape()));
  const std::int64_t batch = qv.dim(0), seq = qv.dim(1), d = qv.dim(2);
  if (heads < 1 || d % heads != 0) shape_fail(op, "width " + std::to_string(d) + " not divisible by heads");
  if (!mask.key_valid.empty() && static_cast<std::int64_t>(mask.key_valid.size()) != batch * seq) {
    shape_fail(op, "key mask size mismatch");
  }
  const std::int64_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Array out(qv.shape());
  // Attention probabilities, [B, H, S, S], kept for backward.
  Array probs(Shape{batch, heads, seq, seq});
  RowMat scores(seq, seq);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t hd = 0; hd < heads; ++hd) {
      const std::int64_t off = b * seq * d + hd * dh;
      CStridedMap qm(qv.data() + off, seq, dh, Eigen::OuterStride<>(d));
      CStridedMap km(k.value().data() + off, seq, dh, Eigen::OuterStride<>(d));
      CStridedMap vm(v.value().data() + off, seq, dh, Eigen::OuterStride<>(d));
      scores.noalias() = sc * (qm * km.transpose());
      MatMap pm(probs.data() + (b * heads + hd) * seq * seq, seq, seq);
      for (std::int64_t i = 0; i < seq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < seq; ++j) {
          if (mask.allows(b, seq, i, j)) mx = std::max(mx, scores(i, j));
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < seq; ++j) {
          const double e = mask.allows(b, seq, i, j) ? std::exp(scores(i, j) - mx) : 0.0;
          pm(i, j) = e;
          z += e;
        }
        if (z > 0.0) pm.row(i) /= z;
      }
      StridedMap(out.data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() = pm * vm;
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(op, {iq, ik, iv}, std::move(out),
                         [=, probs = std::move(probs)](Tape& t, const Array&, const Array& g) {
                           Array* dq = t.grad_sink(iq);
                           Array* dk = t.grad_sink(ik);
                           Array* dv = t.grad_sink(iv);
                           RowMat dp(seq, seq);
                           for (std::int64_t b = 0; b < batch; ++b) {
                             for (std::int64_t hd = 0; hd < heads; ++hd) {
                               const std::int64_t off = b * seq * d + hd * dh;
                               CStridedMap gm(g.data() + off, seq, dh, Eigen::OuterStride<>(d));
                               CStridedMap qm(t.value(iq).data() + off, seq, dh, Eigen::OuterStride<>(d));
                               CStridedMap km(t.value(ik).data() + off, seq, dh, Eigen::OuterStride<>(d));
                               CStridedMap vm(t.value(iv).data() + off, seq, dh, Eigen::OuterStride<>(d));
                               CMatMap pm(probs.data() + (b * heads + hd) * seq * seq, seq, seq);
                               if (dv) StridedMap(dv->data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() += pm.transpose() * gm;
                               if (!dq && !dk) continue;
                               dp.noalias() = gm * vm.transpose();
                               // Softmax backward: dS = P o (dP - rowsum(dP o P)).
                               Eigen::VectorXd rs = (dp.array() * pm.array()).rowwise().sum();
                               dp = (pm.array() * (dp.array().colwise() - rs.array())).matrix() * sc;
                               if (dq) StridedMap(dq->data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() += dp * km;
                               if (dk) StridedMap(dk->data() + off, seq, dh, Eigen::OuterStride<>(d)).noalias() += dp.transpose() * qm;
                             }
                           }
                         });
}

Var stop_gradient(Var a) {
  require_valid("stop_gradient", a);
  return a.tape().record_detached("stop_gradient", a.value());
}

Var straight_through(Var quantized, Var pre_quant) {
  constexpr std::string_view op = "straight_through";
  require_same_tape(op, quantized, pre_quant);
  if (quantized.shape() != pre_quant.shape()) {
    throw ContractViolation("straight_through: shape " + shape_str(quantized.shape()) + " vs " + shape_str(pre_quant.shape()));
  }
  const int ip = pre_quant.id();
  return quantized.tape().record(op, {ip}, quantized.value(),
                                 [ip](Tape& t, const Array&, const Array& g) { accumulate(t.grad_sink(ip), g); });
}

}  // namespace svqa::ops
