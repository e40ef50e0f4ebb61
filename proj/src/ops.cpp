#include "multipath/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

namespace {

using RowMatrix = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw ShapeError(op + ": " + what);
}

void accumulate(const Tensor& target, std::span<const real> delta) {
  if (!target.requires_grad()) return;
  auto g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

struct ImageDims {
  std::size_t n, c, h, w;
};

ImageDims image_dims(const Tensor& t, const std::string& op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw ShapeError(op + ": expected [C,H,W] or [N,C,H,W], got " + to_string(t.shape()));
}

Shape image_shape(bool batched, const ImageDims& d) {
  return batched ? Shape{d.n, d.c, d.h, d.w} : Shape{d.c, d.h, d.w};
}

// Rows of the patch matrix are (channel, dy, dx), columns are (example, y, x).
void im2col(std::span<const real> x, const ImageDims& d, std::vector<real>& col) {
  const std::size_t hw = d.h * d.w;
  const std::size_t cols = d.n * hw;
  col.assign(d.c * 9 * cols, real(0));
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t dy = 0; dy < 3; ++dy)
      for (std::size_t dx = 0; dx < 3; ++dx) {
        real* row = col.data() + ((c * 3 + dy) * 3 + dx) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          const real* plane = x.data() + (n * d.c + c) * hw;
          real* dst = row + n * hw;
          for (std::size_t y = 0; y < d.h; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t xx = 0; xx < d.w; ++xx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + dx) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              dst[y * d.w + xx] = plane[iy * d.w + ix];
            }
          }
        }
      }
}

void col2im_add(std::span<const real> col, const ImageDims& d, std::span<real> gx) {
  const std::size_t hw = d.h * d.w;
  const std::size_t cols = d.n * hw;
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t dy = 0; dy < 3; ++dy)
      for (std::size_t dx = 0; dx < 3; ++dx) {
        const real* row = col.data() + ((c * 3 + dy) * 3 + dx) * cols;
        for (std::size_t n = 0; n < d.n; ++n) {
          real* plane = gx.data() + (n * d.c + c) * hw;
          const real* src = row + n * hw;
          for (std::size_t y = 0; y < d.h; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t xx = 0; xx < d.w; ++xx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + dx) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              plane[iy * d.w + ix] += src[y * d.w + xx];
            }
          }
        }
      }
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

struct RowDims {
  std::size_t rows, cols;
};

RowDims row_dims(const Tensor& t, const std::string& op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(op + ": expected [K] or [N,K], got " + to_string(t.shape()));
}

}  // namespace

Tensor conv2d_3x3(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const std::string op = "conv2d_3x3";
  const ImageDims d = image_dims(input, op);
  require(kernel.rank() == 4 && kernel.dim(2) == 3 && kernel.dim(3) == 3, op,
          "kernel must be [C_out,C_in,3,3], got " + to_string(kernel.shape()));
  require(kernel.dim(1) == d.c, op,
          "kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
              std::to_string(d.c));
  const std::size_t cout = kernel.dim(0);
  require(bias.shape() == Shape{cout}, op, "bias must be [" + std::to_string(cout) + "]");
  require(d.h >= 1 && d.w >= 1, op, "empty spatial extent");

  const std::size_t hw = d.h * d.w;
  const std::size_t cols = d.n * hw;
  const std::size_t patch = d.c * 9;
  auto col = std::make_shared<std::vector<real>>();
  im2col(input.data(), d, *col);

  RowMatrix product = ConstMatrixMap(kernel.data().data(), cout, patch) *
                      ConstMatrixMap(col->data(), patch, cols);
  const ImageDims od{d.n, cout, d.h, d.w};
  Tensor out(image_shape(input.rank() == 4, od));
  auto y = out.data();
  auto b = bias.data();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < cout; ++co) {
      const real* src = product.data() + co * cols + n * hw;
      real* dst = y.data() + (n * cout + co) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + b[co];
    }

  if (tape.wants({&input, &kernel, &bias})) {
    tape.record(op, {input, kernel, bias}, out,
                [input, kernel, bias, out, col, d, cout, hw, cols, patch]() mutable {
                  auto gy = out.grad();
                  RowMatrix g(cout, cols);
                  for (std::size_t n = 0; n < d.n; ++n)
                    for (std::size_t co = 0; co < cout; ++co)
                      std::copy_n(gy.data() + (n * cout + co) * hw, hw,
                                  g.data() + co * cols + n * hw);
                  if (kernel.requires_grad()) {
                    MatrixMap gk(kernel.ensure_grad().data(), cout, patch);
                    gk.noalias() += g * ConstMatrixMap(col->data(), patch, cols).transpose();
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.ensure_grad();
                    for (std::size_t co = 0; co < cout; ++co) {
                      double s = 0;
                      for (std::size_t j = 0; j < cols; ++j) s += g(co, j);
                      gb[co] += static_cast<real>(s);
                    }
                  }
                  if (input.requires_grad()) {
                    RowMatrix gcol =
                        ConstMatrixMap(kernel.data().data(), cout, patch).transpose() * g;
                    col2im_add({gcol.data(), static_cast<std::size_t>(gcol.size())}, d,
                               input.ensure_grad());
                  }
                });
  }
  return out;
}

Tensor maxpool_2x2(Tape& tape, const Tensor& input) {
  const std::string op = "maxpool_2x2";
  const ImageDims d = image_dims(input, op);
  require(d.h >= 2 && d.w >= 2 && d.h % 2 == 0 && d.w % 2 == 0, op,
          "spatial extent must be even and >= 2, got " + to_string(input.shape()));
  const std::size_t oh = d.h / 2, ow = d.w / 2;
  const ImageDims od{d.n, d.c, oh, ow};
  Tensor out(image_shape(input.rank() == 4, od));
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  auto x = input.data();
  auto y = out.data();
  const std::size_t planes = d.n * d.c;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = p * d.h * d.w;
        std::size_t best = base + (2 * oy) * d.w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * d.w + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        y[o] = x[best];
        (*argmax)[o] = best;
      }

  if (tape.wants({&input})) {
    tape.record(op, {input}, out, [input, out, argmax]() mutable {
      auto gy = out.grad();
      auto gx = input.ensure_grad();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
    });
  }
  return out;
}

Tensor dense(Tape& tape, const Tensor& input, const Tensor& weights, const Tensor& bias) {
  const std::string op = "dense";
  const RowDims d = row_dims(input, op);
  require(weights.rank() == 2, op, "weights must be [M,N], got " + to_string(weights.shape()));
  require(weights.dim(1) == d.cols, op,
          "weights expect " + std::to_string(weights.dim(1)) + " inputs, got " +
              std::to_string(d.cols));
  const std::size_t m = weights.dim(0);
  require(bias.shape() == Shape{m}, op, "bias must be [" + std::to_string(m) + "]");

  Tensor out(input.rank() == 2 ? Shape{d.rows, m} : Shape{m});
  MatrixMap y(out.data().data(), d.rows, m);
  y.noalias() = ConstMatrixMap(input.data().data(), d.rows, d.cols) *
                ConstMatrixMap(weights.data().data(), m, d.cols).transpose();
  auto b = bias.data();
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t j = 0; j < m; ++j) y(r, j) += b[j];

  if (tape.wants({&input, &weights, &bias})) {
    tape.record(op, {input, weights, bias}, out, [input, weights, bias, out, d, m]() mutable {
      ConstMatrixMap g(out.grad().data(), d.rows, m);
      if (input.requires_grad()) {
        MatrixMap gx(input.ensure_grad().data(), d.rows, d.cols);
        gx.noalias() += g * ConstMatrixMap(weights.data().data(), m, d.cols);
      }
      if (weights.requires_grad()) {
        MatrixMap gw(weights.ensure_grad().data(), m, d.cols);
        gw.noalias() += g.transpose() * ConstMatrixMap(input.data().data(), d.rows, d.cols);
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t j = 0; j < m; ++j) {
          double s = 0;
          for (std::size_t r = 0; r < d.rows; ++r) s += g(r, j);
          gb[j] += static_cast<real>(s);
        }
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& input) {
  Tensor out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > real(0) ? x[i] : real(0);
  if (tape.wants({&input})) {
    tape.record("relu", {input}, out, [input, out]() mutable {
      auto gy = out.grad();
      auto x = input.data();
      auto gx = input.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (x[i] > real(0)) gx[i] += gy[i];
    });
  }
  return out;
}

Tensor batchnorm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BatchNormMode mode, const Tensor& weights,
                 const BatchNormOptions& options) {
  const std::string op = "batchnorm";
  require(input.rank() >= 2, op, "expected [N,C,...], got " + to_string(input.shape()));
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t spatial = input.numel() / std::max<std::size_t>(1, n * c);
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, op,
          "gamma/beta must be [" + std::to_string(c) + "]");
  if (weights.defined())
    require(weights.shape() == Shape{n}, op, "weights must be [" + std::to_string(n) + "]");

  auto x = input.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  Tensor out(input.shape());
  auto y = out.data();
  auto at = [&](std::size_t i, std::size_t ch) { return (i * c + ch) * spatial; };

  if (mode == BatchNormMode::infer) {
    if (!state.initialized || state.mean.size() != c)
      throw StateError("batchnorm: inference mode requires initialized running moments");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double r = 1.0 / std::sqrt(state.var[ch] + options.epsilon);
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t k = at(i, ch) + s;
          y[k] = static_cast<real>(gm[ch] * ((x[k] - state.mean[ch]) * r) + bt[ch]);
        }
      }
    if (tape.wants({&input, &gamma, &beta})) {
      auto mean = state.mean;
      auto var = state.var;
      const double eps = options.epsilon;
      tape.record(op, {input, gamma, beta}, out,
                  [input, gamma, beta, out, mean, var, eps, n, c, spatial]() mutable {
                    auto gy = out.grad();
                    auto x = input.data();
                    auto gm = gamma.data();
                    std::vector<real> gx(input.numel()), gg(c), gb(c);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const double r = 1.0 / std::sqrt(var[ch] + eps);
                        double sg = 0, sb = 0;
                        for (std::size_t s = 0; s < spatial; ++s) {
                          const std::size_t k = (i * c + ch) * spatial + s;
                          gx[k] = static_cast<real>(gy[k] * gm[ch] * r);
                          sg += gy[k] * (x[k] - mean[ch]) * r;
                          sb += gy[k];
                        }
                        gg[ch] += static_cast<real>(sg);
                        gb[ch] += static_cast<real>(sb);
                      }
                    accumulate(input, gx);
                    accumulate(gamma, gg);
                    accumulate(beta, gb);
                  });
    }
    return out;
  }

  std::vector<double> w(n, 1.0);
  if (weights.defined())
    for (std::size_t i = 0; i < n; ++i) w[i] = weights.data()[i];
  double total = 0;
  for (double wi : w) total += wi;
  if (!(total >= 0)) throw ArgumentError("batchnorm: batch weights must be non-negative");
  // A node that received no mass still needs finite features; its output is
  // weighted by zero downstream.
  const bool massless = total == 0;
  if (massless) {
    w.assign(n, 1.0);
    total = static_cast<double>(n);
  }
  const double mass = total * static_cast<double>(spatial);

  std::vector<double> mean(c, 0.0), var(c, 0.0), inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0;
      for (std::size_t s = 0; s < spatial; ++s) row += x[at(i, ch) + s];
      acc += w[i] * row;
    }
    mean[ch] = acc / mass;
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0;
      for (std::size_t s = 0; s < spatial; ++s) {
        const double dlt = x[at(i, ch) + s] - mean[ch];
        row += dlt * dlt;
      }
      sq += w[i] * row;
    }
    var[ch] = sq / mass;
    inv[ch] = 1.0 / std::sqrt(var[ch] + options.epsilon);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t k = at(i, ch) + s;
        y[k] = static_cast<real>(gm[ch] * ((x[k] - mean[ch]) * inv[ch]) + bt[ch]);
      }
  }

  if (options.update_running && !massless) {
    if (!state.initialized || state.mean.size() != c) {
      state.mean = mean;
      state.var = var;
      state.initialized = true;
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        state.mean[ch] = options.decay * state.mean[ch] + (1.0 - options.decay) * mean[ch];
        state.var[ch] = options.decay * state.var[ch] + (1.0 - options.decay) * var[ch];
      }
    }
  }

  if (tape.wants({&input, &gamma, &beta, &weights})) {
    Tensor wt = weights;
    tape.record(op, {input, gamma, beta, weights}, out,
                [input, gamma, beta, wt, out, w, mean, var, inv, mass, n, c, spatial,
                 massless]() mutable {
                  auto gy = out.grad();
                  auto x = input.data();
                  auto gm = gamma.data();
                  std::vector<real> gx(input.numel()), gg(c), gb(c), gw(n);
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double g1 = 0, g2 = 0, sg = 0, sb = 0;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t s = 0; s < spatial; ++s) {
                        const std::size_t k = (i * c + ch) * spatial + s;
                        const double centered = x[k] - mean[ch];
                        const double gxhat = gy[k] * static_cast<double>(gm[ch]);
                        g1 += gxhat;
                        g2 += gxhat * centered;
                        sg += gy[k] * centered * inv[ch];
                        sb += gy[k];
                      }
                    gg[ch] = static_cast<real>(sg);
                    gb[ch] = static_cast<real>(sb);
                    const double r = inv[ch];
                    const double dmean = -r * g1;
                    const double dvar = -0.5 * r * r * r * g2;
                    for (std::size_t i = 0; i < n; ++i) {
                      double first = 0, second = 0;
                      for (std::size_t s = 0; s < spatial; ++s) {
                        const std::size_t k = (i * c + ch) * spatial + s;
                        const double centered = x[k] - mean[ch];
                        const double gxhat = gy[k] * static_cast<double>(gm[ch]);
                        gx[k] = static_cast<real>(gxhat * r +
                                                  w[i] / mass * (dmean + 2.0 * dvar * centered));
                        first += centered;
                        second += centered * centered;
                      }
                      const double spatial_d = static_cast<double>(spatial);
                      gw[i] += static_cast<real>(dmean * first / mass +
                                                 dvar * (second - spatial_d * var[ch]) / mass);
                    }
                  }
                  accumulate(input, gx);
                  accumulate(gamma, gg);
                  accumulate(beta, gb);
                  if (wt.defined() && !massless) accumulate(wt, gw);
                });
  }
  return out;
}

namespace {

Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, std::span<const int> labels,
                          bool scalar_result) {
  const RowDims d = row_dims(logits, "softmax_cross_entropy");
  if (labels.size() != d.rows)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(d.rows) + " rows");
  for (int label : labels)
    if (label < 0 || static_cast<std::size_t>(label) >= d.cols)
      throw ArgumentError("softmax_cross_entropy: label " + std::to_string(label) +
                          " outside [0," + std::to_string(d.cols) + ")");
  auto z = logits.data();
  auto probs = std::make_shared<std::vector<real>>(logits.numel());
  Tensor out(scalar_result ? Shape{} : Shape{d.rows});
  auto y = out.data();
  for (std::size_t r = 0; r < d.rows; ++r) {
    const real* row = z.data() + r * d.cols;
    const real top = *std::max_element(row, row + d.cols);
    double norm = 0;
    for (std::size_t k = 0; k < d.cols; ++k) norm += std::exp(static_cast<double>(row[k] - top));
    const double log_norm = std::log(norm);
    for (std::size_t k = 0; k < d.cols; ++k)
      (*probs)[r * d.cols + k] = static_cast<real>(std::exp(row[k] - top - log_norm));
    y[r] = static_cast<real>(log_norm - static_cast<double>(row[labels[r]] - top));
  }
  if (tape.wants({&logits})) {
    std::vector<int> kept(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", {logits}, out, [logits, out, probs, kept, d]() mutable {
      auto gy = out.grad();
      auto gz = logits.ensure_grad();
      for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t k = 0; k < d.cols; ++k) {
          const real target = static_cast<int>(k) == kept[r] ? real(1) : real(0);
          gz[r * d.cols + k] += gy[r] * ((*probs)[r * d.cols + k] - target);
        }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, int label) {
  if (logits.rank() != 1)
    throw ShapeError("softmax_cross_entropy: expected [K] logits, got " +
                     to_string(logits.shape()));
  const int labels[1] = {label};
  return cross_entropy_rows(tape, logits, labels, true);
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy: expected [N,K] logits, got " +
                     to_string(logits.shape()));
  return cross_entropy_rows(tape, logits, labels, false);
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (tape.wants({&a, &b}))
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      accumulate(a, out.grad());
      accumulate(b, out.grad());
    });
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (tape.wants({&a, &b}))
    tape.record("sub", {a, b}, out, [a, b, out]() mutable {
      accumulate(a, out.grad());
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        auto go = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (tape.wants({&a, &b}))
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * x[i];
      }
    });
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto x = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<real>(x[i] * factor);
  if (tape.wants({&a}))
    tape.record("scale", {a}, out, [a, out, factor]() mutable {
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<real>(go[i] * factor);
    });
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double acc = 0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<real>(acc));
  if (tape.wants({&a}))
    tape.record("sum", {a}, out, [a, out]() mutable {
      const real go = out.grad()[0];
      for (real& g : a.ensure_grad()) g += go;
    });
  return out;
}

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("dot: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double acc = 0;
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * y[i];
  Tensor out = Tensor::scalar(static_cast<real>(acc));
  if (tape.wants({&a, &b}))
    tape.record("dot", {a, b}, out, [a, b, out]() mutable {
      const real go = out.grad()[0];
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * y[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * x[i];
      }
    });
  return out;
}

Tensor sum_squares(Tape& tape, const Tensor& a) {
  double acc = 0;
  for (real v : a.data()) acc += static_cast<double>(v) * v;
  Tensor out = Tensor::scalar(static_cast<real>(acc));
  if (tape.wants({&a}))
    tape.record("sum_squares", {a}, out, [a, out]() mutable {
      const real go = out.grad()[0];
      auto g = a.ensure_grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2 * go * x[i];
    });
  return out;
}

Tensor row_squared_norm(Tape& tape, const Tensor& x) {
  const RowDims d = row_dims(x, "row_squared_norm");
  Tensor out(x.rank() == 2 ? Shape{d.rows} : Shape{});
  auto v = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < d.rows; ++r) {
    double acc = 0;
    for (std::size_t k = 0; k < d.cols; ++k) {
      const double e = v[r * d.cols + k];
      acc += e * e;
    }
    o[r] = static_cast<real>(acc);
  }
  if (tape.wants({&x}))
    tape.record("row_squared_norm", {x}, out, [x, out, d]() mutable {
      auto go = out.grad();
      auto g = x.ensure_grad();
      auto v = x.data();
      for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t k = 0; k < d.cols; ++k) g[r * d.cols + k] += 2 * go[r] * v[r * d.cols + k];
    });
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x, double temperature) {
  if (!(temperature > 0))
    throw ArgumentError("softmax_rows: temperature must be positive, got " +
                        std::to_string(temperature));
  const RowDims d = row_dims(x, "softmax_rows");
  Tensor out(x.shape());
  auto z = x.data();
  auto y = out.data();
  for (std::size_t r = 0; r < d.rows; ++r) {
    const real* row = z.data() + r * d.cols;
    const double top = *std::max_element(row, row + d.cols);
    double norm = 0;
    for (std::size_t k = 0; k < d.cols; ++k) norm += std::exp((row[k] - top) / temperature);
    for (std::size_t k = 0; k < d.cols; ++k)
      y[r * d.cols + k] = static_cast<real>(std::exp((row[k] - top) / temperature) / norm);
  }
  if (tape.wants({&x}))
    tape.record("softmax_rows", {x}, out, [x, out, d, temperature]() mutable {
      auto go = out.grad();
      auto y = out.data();
      auto g = x.ensure_grad();
      for (std::size_t r = 0; r < d.rows; ++r) {
        double inner = 0;
        for (std::size_t k = 0; k < d.cols; ++k)
          inner += static_cast<double>(go[r * d.cols + k]) * y[r * d.cols + k];
        for (std::size_t k = 0; k < d.cols; ++k) {
          const std::size_t i = r * d.cols + k;
          g[i] += static_cast<real>(y[i] * (go[i] - inner) / temperature);
        }
      }
    });
  return out;
}

Tensor column(Tape& tape, const Tensor& x, std::size_t index) {
  if (x.rank() != 2 || index >= x.dim(1))
    throw ShapeError("column: index " + std::to_string(index) + " invalid for " +
                     to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) out.data()[r] = x.data()[r * cols + index];
  if (tape.wants({&x}))
    tape.record("column", {x}, out, [x, out, rows, cols, index]() mutable {
      auto g = x.ensure_grad();
      auto go = out.grad();
      for (std::size_t r = 0; r < rows; ++r) g[r * cols + index] += go[r];
    });
  return out;
}

Tensor concat_columns(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_columns: " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t rows = a.dim(0), fa = a.dim(1), fb = b.dim(1);
  Tensor out(Shape{rows, fa + fb});
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * fa, fa, o.data() + r * (fa + fb));
    std::copy_n(b.data().data() + r * fb, fb, o.data() + r * (fa + fb) + fa);
  }
  if (tape.wants({&a, &b}))
    tape.record("concat_columns", {a, b}, out, [a, b, out, rows, fa, fb]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < fa; ++k) g[r * fa + k] += go[r * (fa + fb) + k];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < fb; ++k) g[r * fb + k] += go[r * (fa + fb) + fa + k];
      }
    });
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, o.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, o.data() + (i * (ca + cb) + ca) * hw);
  }
  if (tape.wants({&a, &b}))
    tape.record("concat_channels", {a, b}, out, [a, b, out, n, ca, cb, hw]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < ca * hw; ++k) g[i * ca * hw + k] += go[i * (ca + cb) * hw + k];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < cb * hw; ++k)
            g[i * cb * hw + k] += go[(i * (ca + cb) + ca) * hw + k];
      }
    });
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (element_count(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor out(std::move(shape), std::vector<real>(x.data().begin(), x.data().end()));
  if (tape.wants({&x}))
    tape.record("reshape", {x}, out, [x, out]() mutable { accumulate(x, out.grad()); });
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t stride = n ? x.numel() / n : 0;
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n)
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(x.data().data() + rows[r] * stride, stride, out.data().data() + r * stride);
  }
  if (tape.wants({&x})) {
    std::vector<std::size_t> kept(rows.begin(), rows.end());
    tape.record("gather_rows", {x}, out, [x, out, kept, stride]() mutable {
      auto g = x.ensure_grad();
      auto go = out.grad();
      for (std::size_t r = 0; r < kept.size(); ++r)
        for (std::size_t k = 0; k < stride; ++k) g[kept[r] * stride + k] += go[r * stride + k];
    });
  }
  return out;
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
