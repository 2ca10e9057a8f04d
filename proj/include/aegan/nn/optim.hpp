#pragma once

#include "aegan/nn/layers.hpp"

#include <vector>

namespace aegan::nn {

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Decoupled (AdamW) decay; 0 gives plain Adam.
    double weight_decay = 0.0;
};

/// Adam with optional decoupled weight decay. Parameters without a grad
/// buffer are skipped for the step.
template <typename Scalar>
class Adam {
public:
    Adam(std::vector<NamedParam<Scalar>> params, AdamOptions opts);

    void step();
    void zero_grad();

    double lr() const noexcept { return opts_.lr; }
    void set_lr(double lr) noexcept { opts_.lr = lr; }
    const AdamOptions& options() const noexcept { return opts_; }
    long steps() const noexcept { return t_; }

    /// Moment buffers named "<param>.m" / "<param>.v" plus the step count.
    void collect(StateList<Scalar>& out);

private:
    std::vector<NamedParam<Scalar>> params_;
    std::vector<Tensor<Scalar>> m_;
    std::vector<Tensor<Scalar>> v_;
    Tensor<Scalar> t_buffer_;
    AdamOptions opts_;
    long t_ = 0;
};

} // namespace aegan::nn
