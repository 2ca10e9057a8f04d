#pragma once

#include "aegan/nn/ops.hpp"
#include "aegan/rng.hpp"

#include <random>
#include <string>
#include <vector>

namespace aegan::nn {

template <typename Scalar>
struct NamedParam {
    std::string name;
    Var<Scalar> var;
};

template <typename Scalar>
struct NamedBuffer {
    std::string name;
    Tensor<Scalar>* tensor;
};

/// Flat views over a module tree, in a fixed traversal order.
template <typename Scalar>
struct StateList {
    std::vector<NamedParam<Scalar>> params;
    std::vector<NamedBuffer<Scalar>> buffers;

    void add(const std::string& name, const Var<Scalar>& v) { params.push_back({name, v}); }
    void add(const std::string& name, Tensor<Scalar>& t) { buffers.push_back({name, &t}); }
};

template <typename Scalar>
void fill_normal(Tensor<Scalar>& t, double mean, double sd, Rng& rng) {
    std::normal_distribution<double> dist(mean, sd);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(Index in, Index out, Extent3 stride, bool bias, int kernel = 3)
        : weight_(Tensor<Scalar>(out, in, {kernel, kernel, kernel}), true), stride_(stride),
          pad_{kernel / 2, kernel / 2, kernel / 2} {
        if (bias) bias_ = Var<Scalar>(Tensor<Scalar>::vector(1, out), true);
    }

    void init(Rng& rng) {
        fill_normal(weight_.mutable_value(), 0.0, 0.02, rng);
        if (bias_) bias_.mutable_value().array().setZero();
    }
    Var<Scalar> operator()(const Var<Scalar>& x) const { return conv3d(x, weight_, bias_, stride_, pad_); }

    void collect(const std::string& prefix, StateList<Scalar>& out) const {
        out.add(prefix + ".weight", weight_);
        if (bias_) out.add(prefix + ".bias", bias_);
    }
    Index in_channels() const { return weight_.value().channels(); }
    Index out_channels() const { return weight_.value().batch(); }
    Var<Scalar>& weight() { return weight_; }
    Var<Scalar>& bias() { return bias_; }

private:
    Var<Scalar> weight_;
    Var<Scalar> bias_;
    Extent3 stride_{1, 1, 1};
    Extent3 pad_{1, 1, 1};
};

/// 3x3x3 transposed convolution with output padding stride - 1, so each axis
/// grows by exactly its stride.
template <typename Scalar>
class ConvTranspose3d {
public:
    ConvTranspose3d() = default;
    ConvTranspose3d(Index in, Index out, Extent3 stride, bool bias)
        : weight_(Tensor<Scalar>(in, out, {3, 3, 3}), true), stride_(stride) {
        if (bias) bias_ = Var<Scalar>(Tensor<Scalar>::vector(1, out), true);
    }

    void init(Rng& rng) {
        fill_normal(weight_.mutable_value(), 0.0, 0.02, rng);
        if (bias_) bias_.mutable_value().array().setZero();
    }
    Var<Scalar> operator()(const Var<Scalar>& x) const {
        const Extent3 out_pad{stride_.x - 1, stride_.y - 1, stride_.z - 1};
        return conv_transpose3d(x, weight_, bias_, stride_, Extent3{1, 1, 1}, out_pad);
    }

    void collect(const std::string& prefix, StateList<Scalar>& out) const {
        out.add(prefix + ".weight", weight_);
        if (bias_) out.add(prefix + ".bias", bias_);
    }

private:
    Var<Scalar> weight_;
    Var<Scalar> bias_;
    Extent3 stride_{2, 2, 2};
};

template <typename Scalar>
class BatchNorm3d {
public:
    BatchNorm3d() = default;
    explicit BatchNorm3d(Index channels)
        : gamma_(Tensor<Scalar>::vector(1, channels), true), beta_(Tensor<Scalar>::vector(1, channels), true),
          buffers_{Tensor<Scalar>::vector(1, channels), Tensor<Scalar>(1, channels, Extent3{}, Scalar(1))} {}

    void init(Rng& rng) {
        fill_normal(gamma_.mutable_value(), 1.0, 0.02, rng);
        beta_.mutable_value().array().setZero();
        buffers_.running_mean.array().setZero();
        buffers_.running_var.array().setOnes();
    }
    Var<Scalar> operator()(const Var<Scalar>& x, bool training) {
        return batch_norm3d(x, gamma_, beta_, buffers_, training);
    }

    void collect(const std::string& prefix, StateList<Scalar>& out) {
        out.add(prefix + ".gamma", gamma_);
        out.add(prefix + ".beta", beta_);
        out.add(prefix + ".running_mean", buffers_.running_mean);
        out.add(prefix + ".running_var", buffers_.running_var);
    }
    BatchNormBuffers<Scalar>& buffers() { return buffers_; }

private:
    Var<Scalar> gamma_;
    Var<Scalar> beta_;
    BatchNormBuffers<Scalar> buffers_;
};

template <typename Scalar>
class Linear {
public:
    Linear() = default;
    Linear(Index in, Index out) : weight_(Tensor<Scalar>::vector(out, in), true), bias_(Tensor<Scalar>::vector(1, out), true) {}

    void init(Rng& rng) {
        fill_normal(weight_.mutable_value(), 0.0, 0.02, rng);
        bias_.mutable_value().array().setZero();
    }
    Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight_, bias_); }

    void collect(const std::string& prefix, StateList<Scalar>& out) const {
        out.add(prefix + ".weight", weight_);
        out.add(prefix + ".bias", bias_);
    }
    Index in_features() const { return weight_.value().channels(); }

private:
    Var<Scalar> weight_;
    Var<Scalar> bias_;
};

} // namespace aegan::nn
