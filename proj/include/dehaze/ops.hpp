#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Layout conventions: activations are (N, C, H, W); convolution weights are
// (Cout, Cin, kh, kw); transposed-convolution weights are (Cin, Cout, kh, kw);
// biases are (Cout, 1, 1, 1). Scalars are (1, 1, 1, 1).

#include <utility>
#include <vector>

#include "dehaze/autograd.hpp"

namespace dehaze::ops {

Var conv2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad);
Var conv_transpose2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad);

Var relu(Tape& tape, Var x);
/// Logistic function, saturating at the nearest doubles strictly inside (0, 1).
Var sigmoid(Tape& tape, Var x);

Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, double factor);
Var concat_channels(Tape& tape, const std::vector<Var>& parts);
Var slice_channels(Tape& tape, Var x, int first, int count);

/// (N, C, H, W) -> (N, C, 1, 1)
Var global_avg_pool(Tape& tape, Var x);
Var global_max_pool(Tape& tape, Var x);
/// (N, C, H, W) -> (N, 1, H, W)
Var channel_mean(Tape& tape, Var x);
Var channel_max(Tape& tape, Var x);
/// 2x2 mean pooling with stride 2; H and W must be even.
Var avg_pool2(Tape& tape, Var x);

/// x * s with s of shape (N, C, 1, 1).
Var mul_channelwise(Tape& tape, Var x, Var s);
/// x * s with s of shape (N, 1, H, W).
Var mul_spatial(Tape& tape, Var x, Var s);

/// Scattering-model inversion J = (I - A (1 - t')) / t', t' = max(t, t_min),
/// with I (N, C, H, W), t (N, 1, H, W) and A (N, 1, 1, 1).
Var asm_invert(Tape& tape, Var hazy, Var transmission, Var airlight, double t_min);

/// Scalar losses.
Var smooth_l1_mean(Tape& tape, Var pred, Var target);
/// Sum of squared differences divided by the element count.
Var mse_mean(Tape& tape, Var a, Var b);
/// Sum of absolute differences (no normalisation).
Var l1_sum(Tape& tape, Var a, Var b);
/// sum_i w_i * term_i over scalar terms.
Var weighted_sum(Tape& tape, const std::vector<std::pair<Var, double>>& terms);

}  // namespace dehaze::ops
