#include "aegan/nn/optim.hpp"

#include <cmath>

namespace aegan::nn {

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<NamedParam<Scalar>> params, AdamOptions opts)
    : params_(std::move(params)), t_buffer_(Tensor<Scalar>::scalar(0)), opts_(opts) {
    for (const auto& p : params_) {
        m_.push_back(Tensor<Scalar>::zeros_like(p.var.value()));
        v_.push_back(Tensor<Scalar>::zeros_like(p.var.value()));
    }
}

template <typename Scalar>
void Adam<Scalar>::step() {
    t_ = static_cast<long>(t_buffer_.item()) + 1;
    t_buffer_[0] = static_cast<Scalar>(t_);
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const Scalar b1(opts_.beta1), b2(opts_.beta2);
    const Scalar step_size(opts_.lr / bc1);
    const Scalar inv_sqrt_bc2(1.0 / std::sqrt(bc2));
    const Scalar decay(1.0 - opts_.lr * opts_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& var = params_[i].var;
        if (!var.has_grad()) continue;
        const auto& g = var.grad().array();
        auto& m = m_[i].array();
        auto& v = v_[i].array();
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.square();
        auto& w = var.mutable_value().array();
        if (opts_.weight_decay != 0.0) w *= decay;
        w -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + Scalar(opts_.eps));
    }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

template <typename Scalar>
void Adam<Scalar>::collect(StateList<Scalar>& out) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.add(params_[i].name + ".m", m_[i]);
        out.add(params_[i].name + ".v", v_[i]);
    }
    out.add("step", t_buffer_);
}

template class Adam<float>;
template class Adam<double>;

} // namespace aegan::nn
