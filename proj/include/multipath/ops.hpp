#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "multipath/tape.hpp"
#include "multipath/tensor.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

// Layer operations. Image tensors are [C,H,W] or batched [N,C,H,W]; vector
// tensors are [F] or batched [N,F]. Every operation is recorded on `tape` when
// the tape is recording and an input requires a gradient.

/// 3x3 convolution, stride 1, one pixel of zero padding on every border.
/// kernel: [C_out,C_in,3,3], bias: [C_out].
Tensor conv2d_3x3(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias);

/// 2x2 max pooling with stride 2. Gradient goes to the first maximal element
/// of each window in row-major order.
Tensor maxpool_2x2(Tape& tape, const Tensor& input);

/// weights·input + bias. weights: [M,N], bias: [M].
Tensor dense(Tape& tape, const Tensor& input, const Tensor& weights, const Tensor& bias);

Tensor relu(Tape& tape, const Tensor& input);

struct BatchNormState {
  std::vector<double> mean;
  std::vector<double> var;
  bool initialized = false;
};

enum class BatchNormMode { train, infer };

struct BatchNormOptions {
  double epsilon = 1e-6;
  double decay = 0.9;
  bool update_running = true;
};

/// Per-channel normalization of a batch [N,C,...].
///
/// In train mode the moments are weighted by `weights` ([N], defaults to all
/// ones) and the result is differentiable in the weights too. The running
/// moments are seeded with the first batch and then follow an exponential
/// moving average. All-zero weights fall back to unweighted moments and leave
/// the running moments untouched. Infer mode reads the running moments only.
Tensor batchnorm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BatchNormMode mode, const Tensor& weights = {},
                 const BatchNormOptions& options = {});

/// −log softmax(logits)[label] for logits [K]; returns a scalar.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, int label);
/// Row-wise cross-entropy for logits [N,K]; returns [N].
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

// Elementwise and reduction helpers used to assemble losses.

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);
Tensor dot(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum_squares(Tape& tape, const Tensor& a);
/// Σ_k x[i,k]^2 for x [N,K]; returns [N].
Tensor row_squared_norm(Tape& tape, const Tensor& x);

/// softmax(x/temperature) along the last axis of [K] or [N,K].
Tensor softmax_rows(Tape& tape, const Tensor& x, double temperature);
/// x[:,index] for x [N,K]; returns [N].
Tensor column(Tape& tape, const Tensor& x, std::size_t index);
/// [N,F] ++ [N,G] -> [N,F+G].
Tensor concat_columns(Tape& tape, const Tensor& a, const Tensor& b);
/// Channel concatenation of [N,C1,H,W] and [N,C2,H,W].
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
/// Selects entries of the leading axis.
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
