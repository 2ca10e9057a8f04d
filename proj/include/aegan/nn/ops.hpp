#pragma once

#include "aegan/nn/autograd.hpp"

#include <span>
#include <vector>

namespace aegan::nn {

/// Sliding-window geometry shared by convolution, its transpose, and im2col.
/// `in` is the fine grid, `out` the coarse one.
struct ConvGeometry {
    Extent3 in;
    Extent3 out;
    Extent3 stride{1, 1, 1};
    Extent3 pad{1, 1, 1};
    int kernel = 3;

    static ConvGeometry forward(Extent3 in, int kernel, Extent3 stride, Extent3 pad);
    /// Geometry whose coarse grid is `coarse`, with the fine grid sized for a
    /// transposed convolution with output padding `output_pad`.
    static ConvGeometry transposed(Extent3 coarse, int kernel, Extent3 stride, Extent3 pad, Extent3 output_pad);
};

template <typename Scalar>
void im2col(const Scalar* image, Index channels, const ConvGeometry& g, Scalar* columns);
template <typename Scalar>
void col2im(const Scalar* columns, Index channels, const ConvGeometry& g, Scalar* image);

/// 3-D convolution. `weight` is (out, in, k, k, k); `bias` may be empty.
template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Extent3 stride,
                   Extent3 pad);

/// Transposed 3-D convolution. `weight` is (in, out, k, k, k).
template <typename Scalar>
Var<Scalar> conv_transpose3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                             Extent3 stride, Extent3 pad, Extent3 output_pad);

template <typename Scalar>
struct BatchNormBuffers {
    Tensor<Scalar> running_mean;
    Tensor<Scalar> running_var;
};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates `buffers`; eval mode uses the running ones.
template <typename Scalar>
Var<Scalar> batch_norm3d(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                         BatchNormBuffers<Scalar>& buffers, bool training, double momentum = 0.1,
                         double eps = 1e-5);

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, double negative_slope);
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);

/// Non-overlapping max pooling; window equals stride and must divide the extent.
template <typename Scalar>
Var<Scalar> max_pool3d(const Var<Scalar>& x, Extent3 window);

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts);
/// Stacks along the batch axis; channels and extent must match.
template <typename Scalar>
Var<Scalar> concat_batch(const Var<Scalar>& a, const Var<Scalar>& b);

/// Spatial mean per (sample, channel) -> (N, C, 1, 1, 1).
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x);

/// x (N, F) -> (N, O); `weight` is (O, F), `bias` (1, O) or empty.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, double s);
template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, double s);
template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a);

/// Mean over every element -> one-element tensor.
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a);
/// Mean absolute value -> one-element tensor.
template <typename Scalar>
Var<Scalar> mean_abs(const Var<Scalar>& a);
/// Sum of weighted one-element tensors.
template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms, std::span<const double> weights);

/// Mean over the batch of -log softmax(logits)[label]. logits is (N, K).
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

/// Contrastive loss over M codes (M, D): codes are L2-normalized, then for
/// anchor i: -log(exp(cos(i, partner[i]) / t) / sum_{k != i} exp(cos(i, k) / t)),
/// averaged over all anchors.
template <typename Scalar>
Var<Scalar> nt_xent(const Var<Scalar>& codes, std::span<const int> partner, double temperature);

} // namespace aegan::nn
