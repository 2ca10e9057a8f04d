#include "aegan/nn/ops.hpp"

#include "aegan/error.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace aegan::nn {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }
void set_grad_enabled(bool on) noexcept { g_grad_enabled = on; }

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
    if (!loss) throw ArgumentError("backward on an empty Var");
    if (loss.value().size() != 1) throw ArgumentError("backward needs a one-element loss");
    if (!loss.requires_grad()) return;

    using NodePtr = Node<Scalar>*;
    std::vector<NodePtr> order;
    std::unordered_set<NodePtr> visited;
    std::vector<std::pair<NodePtr, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodePtr p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer().array() += Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodePtr n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Geometry and im2col

ConvGeometry ConvGeometry::forward(Extent3 in, int kernel, Extent3 stride, Extent3 pad) {
    ConvGeometry g{in, {}, stride, pad, kernel};
    for (int d = 0; d < 3; ++d) {
        if (stride[d] < 1) throw SpecError("convolution stride must be >= 1");
        const Index span = in[d] + 2 * pad[d] - kernel;
        if (span < 0) throw SpecError("convolution input " + to_string(in) + " smaller than its kernel");
        g.out[d] = span / stride[d] + 1;
    }
    return g;
}

ConvGeometry ConvGeometry::transposed(Extent3 coarse, int kernel, Extent3 stride, Extent3 pad, Extent3 output_pad) {
    ConvGeometry g{{}, coarse, stride, pad, kernel};
    for (int d = 0; d < 3; ++d) {
        if (output_pad[d] < 0 || output_pad[d] >= stride[d]) throw SpecError("output padding must be < stride");
        g.in[d] = (coarse[d] - 1) * stride[d] - 2 * pad[d] + kernel + output_pad[d];
        if (g.in[d] < 1) throw SpecError("transposed convolution output would be empty");
    }
    return g;
}

template <typename Scalar>
void im2col(const Scalar* image, Index channels, const ConvGeometry& g, Scalar* columns) {
    const Index k = g.kernel;
    const Index plane = g.out.volume();
    for (Index c = 0; c < channels; ++c) {
        const Scalar* img = image + c * g.in.volume();
        for (Index kz = 0; kz < k; ++kz)
            for (Index ky = 0; ky < k; ++ky)
                for (Index kx = 0; kx < k; ++kx) {
                    Scalar* row = columns + (((c * k + kz) * k + ky) * k + kx) * plane;
                    for (Index oz = 0; oz < g.out.z; ++oz) {
                        const Index iz = oz * g.stride.z - g.pad.z + kz;
                        Scalar* dst_plane = row + oz * g.out.y * g.out.x;
                        if (iz < 0 || iz >= g.in.z) {
                            std::fill(dst_plane, dst_plane + g.out.y * g.out.x, Scalar(0));
                            continue;
                        }
                        for (Index oy = 0; oy < g.out.y; ++oy) {
                            const Index iy = oy * g.stride.y - g.pad.y + ky;
                            Scalar* dst = dst_plane + oy * g.out.x;
                            if (iy < 0 || iy >= g.in.y) {
                                std::fill(dst, dst + g.out.x, Scalar(0));
                                continue;
                            }
                            const Scalar* src = img + (iz * g.in.y + iy) * g.in.x;
                            for (Index ox = 0; ox < g.out.x; ++ox) {
                                const Index ix = ox * g.stride.x - g.pad.x + kx;
                                dst[ox] = (ix >= 0 && ix < g.in.x) ? src[ix] : Scalar(0);
                            }
                        }
                    }
                }
    }
}

template <typename Scalar>
void col2im(const Scalar* columns, Index channels, const ConvGeometry& g, Scalar* image) {
    const Index k = g.kernel;
    const Index plane = g.out.volume();
    for (Index c = 0; c < channels; ++c) {
        Scalar* img = image + c * g.in.volume();
        for (Index kz = 0; kz < k; ++kz)
            for (Index ky = 0; ky < k; ++ky)
                for (Index kx = 0; kx < k; ++kx) {
                    const Scalar* row = columns + (((c * k + kz) * k + ky) * k + kx) * plane;
                    for (Index oz = 0; oz < g.out.z; ++oz) {
                        const Index iz = oz * g.stride.z - g.pad.z + kz;
                        if (iz < 0 || iz >= g.in.z) continue;
                        for (Index oy = 0; oy < g.out.y; ++oy) {
                            const Index iy = oy * g.stride.y - g.pad.y + ky;
                            if (iy < 0 || iy >= g.in.y) continue;
                            const Scalar* src = row + (oz * g.out.y + oy) * g.out.x;
                            Scalar* dst = img + (iz * g.in.y + iy) * g.in.x;
                            for (Index ox = 0; ox < g.out.x; ++ox) {
                                const Index ix = ox * g.stride.x - g.pad.x + kx;
                                if (ix >= 0 && ix < g.in.x) dst[ix] += src[ox];
                            }
                        }
                    }
                }
    }
}

namespace {

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

void require_same_shape(const auto& a, const auto& b, const char* op) {
    if (!a.same_shape(b)) throw ArgumentError(std::string(op) + ": operand shapes differ");
}

} // namespace

// ---------------------------------------------------------------------------
// Convolutions

template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Extent3 stride,
                   Extent3 pad) {
    const auto& X = x.value();
    const auto& W = weight.value();
    const Index cin = X.channels();
    const Index cout = W.batch();
    const int k = static_cast<int>(W.extent().x);
    if (W.channels() != cin)
        throw SpecError("conv3d: weight expects " + std::to_string(W.channels()) + " input channels, got " +
                        std::to_string(cin));
    const ConvGeometry g = ConvGeometry::forward(X.extent(), k, stride, pad);
    const Index rows = cin * k * k * k;
    const Index plane = g.out.volume();

    Tensor<Scalar> Y(X.batch(), cout, g.out);
    std::vector<Scalar> col(static_cast<std::size_t>(rows * plane));
    MatrixMap<Scalar> C(col.data(), rows, plane);
    const auto Wm = W.rows();
    for (Index n = 0; n < X.batch(); ++n) {
        im2col(X.data() + n * cin * X.spatial_size(), cin, g, col.data());
        auto Yn = Y.sample(n);
        Yn.noalias() = Wm * C;
        if (bias) Yn.colwise() += bias.value().array().matrix();
    }

    std::vector<Var<Scalar>> parents{x, weight};
    if (bias) parents.push_back(bias);
    return make_result(std::move(Y), std::move(parents), [g, rows, plane, cin](Node<Scalar>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        Node<Scalar>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const auto& dY = self.grad;
        const auto Wm = wn.value.rows();
        std::vector<Scalar> col(static_cast<std::size_t>(rows * plane));
        MatrixMap<Scalar> C(col.data(), rows, plane);
        for (Index n = 0; n < dY.batch(); ++n) {
            const auto dYn = dY.sample(n);
            if (wn.requires_grad) {
                im2col(xn.value.data() + n * cin * xn.value.spatial_size(), cin, g, col.data());
                wn.grad_buffer().rows().noalias() += dYn * C.transpose();
            }
            if (bn && bn->requires_grad) bn->grad_buffer().array() += dYn.rowwise().sum().transpose().array();
            if (xn.requires_grad) {
                C.noalias() = Wm.transpose() * dYn;
                col2im(col.data(), cin, g, xn.grad_buffer().data() + n * cin * xn.value.spatial_size());
            }
        }
    });
}

template <typename Scalar>
Var<Scalar> conv_transpose3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                             Extent3 stride, Extent3 pad, Extent3 output_pad) {
    const auto& X = x.value();
    const auto& W = weight.value();
    const Index cin = X.channels();
    const Index cout = W.channels();
    const int k = static_cast<int>(W.extent().x);
    if (W.batch() != cin)
        throw SpecError("conv_transpose3d: weight expects " + std::to_string(W.batch()) + " input channels, got " +
                        std::to_string(cin));
    const ConvGeometry g = ConvGeometry::transposed(X.extent(), k, stride, pad, output_pad);
    const Index rows = cout * k * k * k;
    const Index plane = g.out.volume();

    Tensor<Scalar> Y(X.batch(), cout, g.in);
    std::vector<Scalar> col(static_cast<std::size_t>(rows * plane));
    MatrixMap<Scalar> C(col.data(), rows, plane);
    const auto Wm = W.rows();
    for (Index n = 0; n < X.batch(); ++n) {
        C.noalias() = Wm.transpose() * X.sample(n);
        col2im(col.data(), cout, g, Y.data() + n * cout * Y.spatial_size());
        if (bias) Y.sample(n).colwise() += bias.value().array().matrix();
    }

    std::vector<Var<Scalar>> parents{x, weight};
    if (bias) parents.push_back(bias);
    return make_result(std::move(Y), std::move(parents), [g, rows, plane, cout](Node<Scalar>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        Node<Scalar>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const auto& dY = self.grad;
        const auto Wm = wn.value.rows();
        std::vector<Scalar> col(static_cast<std::size_t>(rows * plane));
        MatrixMap<Scalar> C(col.data(), rows, plane);
        for (Index n = 0; n < dY.batch(); ++n) {
            const auto dYn = dY.sample(n);
            if (bn && bn->requires_grad) bn->grad_buffer().array() += dYn.rowwise().sum().transpose().array();
            if (!xn.requires_grad && !wn.requires_grad) continue;
            im2col(dY.data() + n * cout * dY.spatial_size(), cout, g, col.data());
            if (wn.requires_grad) wn.grad_buffer().rows().noalias() += xn.value.sample(n) * C.transpose();
            if (xn.requires_grad) xn.grad_buffer().sample(n).noalias() += Wm * C;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <typename Scalar>
Var<Scalar> batch_norm3d(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                         BatchNormBuffers<Scalar>& buffers, bool training, double momentum, double eps) {
    const auto& X = x.value();
    const Index N = X.batch();
    const Index C = X.channels();
    const Index P = X.spatial_size();
    const Index M = N * P;
    if (gamma.value().size() != C) throw SpecError("batch_norm3d: channel count mismatch");

    Eigen::Array<Scalar, Eigen::Dynamic, 1> mu(C), inv_std(C);
    if (training) {
        if (M < 2) throw NumericError("batch_norm3d: training mode needs more than one value per channel");
        for (Index c = 0; c < C; ++c) {
            Scalar s = 0, ss = 0;
            for (Index n = 0; n < N; ++n) s += X.sample(n).row(c).sum();
            const Scalar m = s / Scalar(M);
            for (Index n = 0; n < N; ++n) ss += (X.sample(n).row(c).array() - m).square().sum();
            const Scalar var = ss / Scalar(M);
            mu[c] = m;
            inv_std[c] = Scalar(1) / std::sqrt(var + Scalar(eps));
            auto& rm = buffers.running_mean[c];
            auto& rv = buffers.running_var[c];
            rm = Scalar(1 - momentum) * rm + Scalar(momentum) * m;
            rv = Scalar(1 - momentum) * rv + Scalar(momentum) * (ss / Scalar(M - 1));
        }
    } else {
        for (Index c = 0; c < C; ++c) {
            mu[c] = buffers.running_mean[c];
            inv_std[c] = Scalar(1) / std::sqrt(buffers.running_var[c] + Scalar(eps));
        }
    }

    Tensor<Scalar> xhat = Tensor<Scalar>::zeros_like(X);
    Tensor<Scalar> Y = Tensor<Scalar>::zeros_like(X);
    const auto& g = gamma.value();
    const auto& b = beta.value();
    for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) {
            xhat.sample(n).row(c) = (X.sample(n).row(c).array() - mu[c]) * inv_std[c];
            Y.sample(n).row(c) = xhat.sample(n).row(c).array() * g[c] + b[c];
        }

    return make_result(std::move(Y), {x, gamma, beta},
                       [xhat = std::move(xhat), inv_std, training, M](Node<Scalar>& self) {
                           auto& xn = *self.parents[0];
                           auto& gn = *self.parents[1];
                           auto& bn = *self.parents[2];
                           const auto& dY = self.grad;
                           const Index N = dY.batch();
                           const Index C = dY.channels();
                           for (Index c = 0; c < C; ++c) {
                               Scalar sum_dy = 0, sum_dy_xhat = 0;
                               for (Index n = 0; n < N; ++n) {
                                   sum_dy += dY.sample(n).row(c).sum();
                                   sum_dy_xhat += (dY.sample(n).row(c).array() * xhat.sample(n).row(c).array()).sum();
                               }
                               if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xhat;
                               if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
                               if (!xn.requires_grad) continue;
                               const Scalar gc = gn.value[c];
                               for (Index n = 0; n < N; ++n) {
                                   auto dx = xn.grad_buffer().sample(n).row(c).array();
                                   const auto dy = dY.sample(n).row(c).array();
                                   if (training) {
                                       const auto xh = xhat.sample(n).row(c).array();
                                       dx += gc * inv_std[c] / Scalar(M) *
                                             (Scalar(M) * dy - sum_dy - xh * sum_dy_xhat);
                                   } else {
                                       dx += gc * inv_std[c] * dy;
                                   }
                               }
                           }
                       });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, double negative_slope) {
    const Scalar slope(negative_slope);
    Tensor<Scalar> Y = x.value();
    Y.array() = (Y.array() > Scalar(0)).select(Y.array(), Y.array() * slope);
    return make_result(std::move(Y), {x}, [slope](Node<Scalar>& self) {
        auto& xn = *self.parents[0];
        xn.grad_buffer().array() +=
            (xn.value.array() > Scalar(0)).select(self.grad.array(), self.grad.array() * slope);
    });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
    Tensor<Scalar> Y = x.value();
    Y.array() = Y.array().max(Scalar(0));
    return make_result(std::move(Y), {x}, [](Node<Scalar>& self) {
        auto& xn = *self.parents[0];
        xn.grad_buffer().array() += (xn.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
    });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
    Tensor<Scalar> Y = x.value();
    Y.array() = Scalar(1) / (Scalar(1) + (-Y.array()).exp());
    return make_result(std::move(Y), {x}, [](Node<Scalar>& self) {
        const auto& y = self.value.array();
        self.parents[0]->grad_buffer().array() += self.grad.array() * y * (Scalar(1) - y);
    });
}

template <typename Scalar>
Var<Scalar> max_pool3d(const Var<Scalar>& x, Extent3 window) {
    const auto& X = x.value();
    Extent3 out;
    for (int d = 0; d < 3; ++d) {
        if (window[d] < 1 || X.extent()[d] % window[d] != 0)
            throw SpecError("max_pool3d: window " + to_string(window) + " does not divide extent " +
                            to_string(X.extent()));
        out[d] = X.extent()[d] / window[d];
    }
    Tensor<Scalar> Y(X.batch(), X.channels(), out);
    std::vector<Index> argmax(static_cast<std::size_t>(Y.size()));
    const Extent3 in = X.extent();
    Index o = 0;
    for (Index n = 0; n < X.batch(); ++n)
        for (Index c = 0; c < X.channels(); ++c)
            for (Index z = 0; z < out.z; ++z)
                for (Index y = 0; y < out.y; ++y)
                    for (Index xo = 0; xo < out.x; ++xo, ++o) {
                        Index best = X.offset(n, c, xo * window.x, y * window.y, z * window.z);
                        for (Index dz = 0; dz < window.z; ++dz)
                            for (Index dy = 0; dy < window.y; ++dy)
                                for (Index dx = 0; dx < window.x; ++dx) {
                                    const Index i =
                                        X.offset(n, c, xo * window.x + dx, y * window.y + dy, z * window.z + dz);
                                    if (X[i] > X[best]) best = i;
                                }
                        argmax[static_cast<std::size_t>(o)] = best;
                        Y[o] = X[best];
                    }
    (void)in;
    return make_result(std::move(Y), {x}, [argmax = std::move(argmax)](Node<Scalar>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (Index i = 0; i < self.grad.size(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts) {
    if (parts.empty()) throw ArgumentError("concat_channels: no inputs");
    const auto& first = parts.front().value();
    Index channels = 0;
    for (const auto& p : parts) {
        if (p.value().batch() != first.batch() || !(p.value().extent() == first.extent()))
            throw ArgumentError("concat_channels: batch or extent mismatch");
        channels += p.value().channels();
    }
    Tensor<Scalar> Y(first.batch(), channels, first.extent());
    for (Index n = 0; n < first.batch(); ++n) {
        Index c0 = 0;
        for (const auto& p : parts) {
            const Index c = p.value().channels();
            Y.sample(n).middleRows(c0, c) = p.value().sample(n);
            c0 += c;
        }
    }
    std::vector<Var<Scalar>> parents(parts.begin(), parts.end());
    return make_result(std::move(Y), std::move(parents), [](Node<Scalar>& self) {
        for (Index n = 0; n < self.grad.batch(); ++n) {
            Index c0 = 0;
            for (auto& p : self.parents) {
                const Index c = p->value.channels();
                if (p->requires_grad) p->grad_buffer().sample(n) += self.grad.sample(n).middleRows(c0, c);
                c0 += c;
            }
        }
    });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
    const Var<Scalar> parts[2] = {a, b};
    return concat_channels<Scalar>(std::span<const Var<Scalar>>(parts));
}

template <typename Scalar>
Var<Scalar> concat_batch(const Var<Scalar>& a, const Var<Scalar>& b) {
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.channels() != B.channels() || !(A.extent() == B.extent()))
        throw ArgumentError("concat_batch: channel or extent mismatch");
    Tensor<Scalar> Y(A.batch() + B.batch(), A.channels(), A.extent());
    Y.array().head(A.size()) = A.array();
    Y.array().tail(B.size()) = B.array();
    return make_result(std::move(Y), {a, b}, [](Node<Scalar>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) an.grad_buffer().array() += self.grad.array().head(an.value.size());
        if (bn.requires_grad) bn.grad_buffer().array() += self.grad.array().tail(bn.value.size());
    });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
    const auto& X = x.value();
    Tensor<Scalar> Y = Tensor<Scalar>::vector(X.batch(), X.channels());
    const Scalar inv = Scalar(1) / Scalar(X.spatial_size());
    for (Index n = 0; n < X.batch(); ++n) Y.sample(n) = X.sample(n).rowwise().sum() * inv;
    return make_result(std::move(Y), {x}, [inv](Node<Scalar>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (Index n = 0; n < dx.batch(); ++n) dx.sample(n).colwise() += self.grad.sample(n).col(0) * inv;
    });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
    const auto Xm = x.value().rows();
    const auto Wm = weight.value().rows();
    if (Xm.cols() != Wm.cols())
        throw SpecError("linear: expected " + std::to_string(Wm.cols()) + " features, got " + std::to_string(Xm.cols()));
    Tensor<Scalar> Y = Tensor<Scalar>::vector(Xm.rows(), Wm.rows());
    Y.rows().noalias() = Xm * Wm.transpose();
    if (bias) Y.rows().rowwise() += bias.value().rows().row(0);
    std::vector<Var<Scalar>> parents{x, weight};
    if (bias) parents.push_back(bias);
    return make_result(std::move(Y), std::move(parents), [](Node<Scalar>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        const auto dY = self.grad.rows();
        if (xn.requires_grad) xn.grad_buffer().rows().noalias() += dY * wn.value.rows();
        if (wn.requires_grad) wn.grad_buffer().rows().noalias() += dY.transpose() * xn.value.rows();
        if (self.parents.size() > 2 && self.parents[2]->requires_grad)
            self.parents[2]->grad_buffer().rows().row(0) += dY.colwise().sum();
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<Scalar> Y = a.value();
    Y.array() += b.value().array();
    return make_result(std::move(Y), {a, b}, [](Node<Scalar>& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->grad_buffer().array() += self.grad.array();
    });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<Scalar> Y = a.value();
    Y.array() -= b.value().array();
    return make_result(std::move(Y), {a, b}, [](Node<Scalar>& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().array() += self.grad.array();
        if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer().array() -= self.grad.array();
    });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<Scalar> Y = a.value();
    Y.array() *= b.value().array();
    return make_result(std::move(Y), {a, b}, [](Node<Scalar>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) an.grad_buffer().array() += self.grad.array() * bn.value.array();
        if (bn.requires_grad) bn.grad_buffer().array() += self.grad.array() * an.value.array();
    });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, double s) {
    Tensor<Scalar> Y = a.value();
    Y.array() *= Scalar(s);
    return make_result(std::move(Y), {a}, [s](Node<Scalar>& self) {
        self.parents[0]->grad_buffer().array() += self.grad.array() * Scalar(s);
    });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, double s) {
    Tensor<Scalar> Y = a.value();
    Y.array() += Scalar(s);
    return make_result(std::move(Y), {a},
                       [](Node<Scalar>& self) { self.parents[0]->grad_buffer().array() += self.grad.array(); });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
    Tensor<Scalar> Y = a.value();
    Y.array() = Y.array().square();
    return make_result(std::move(Y), {a}, [](Node<Scalar>& self) {
        auto& an = *self.parents[0];
        an.grad_buffer().array() += Scalar(2) * an.value.array() * self.grad.array();
    });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
    const Index n = a.value().size();
    if (n == 0) throw ArgumentError("mean of an empty tensor");
    auto Y = Tensor<Scalar>::scalar(a.value().array().sum() / Scalar(n));
    return make_result(std::move(Y), {a}, [n](Node<Scalar>& self) {
        self.parents[0]->grad_buffer().array() += self.grad[0] / Scalar(n);
    });
}

template <typename Scalar>
Var<Scalar> mean_abs(const Var<Scalar>& a) {
    const Index n = a.value().size();
    if (n == 0) throw ArgumentError("mean_abs of an empty tensor");
    auto Y = Tensor<Scalar>::scalar(a.value().array().abs().sum() / Scalar(n));
    return make_result(std::move(Y), {a}, [n](Node<Scalar>& self) {
        auto& an = *self.parents[0];
        an.grad_buffer().array() += an.value.array().sign() * (self.grad[0] / Scalar(n));
    });
}

template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms, std::span<const double> weights) {
    if (terms.size() != weights.size()) throw ArgumentError("weighted_sum: term/weight count mismatch");
    Scalar total = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) throw ArgumentError("weighted_sum: terms must be one-element");
        total += Scalar(weights[i]) * terms[i].value().item();
    }
    std::vector<double> w(weights.begin(), weights.end());
    std::vector<Var<Scalar>> parents(terms.begin(), terms.end());
    return make_result(Tensor<Scalar>::scalar(total), std::move(parents), [w = std::move(w)](Node<Scalar>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
            if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += Scalar(w[i]) * self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Losses

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
    const auto L = logits.value().rows();
    const Index N = L.rows();
    const Index K = L.cols();
    if (static_cast<Index>(labels.size()) != N) throw ArgumentError("cross_entropy: label count mismatch");
    if (!L.allFinite()) throw NumericError("cross_entropy: non-finite logits");
    RowMatrix<Scalar> prob(N, K);
    Scalar loss = 0;
    for (Index n = 0; n < N; ++n) {
        const int y = labels[static_cast<std::size_t>(n)];
        if (y < 0 || y >= K) throw ArgumentError("cross_entropy: label out of range");
        const Scalar m = L.row(n).maxCoeff();
        const auto e = (L.row(n).array() - m).exp();
        const Scalar z = e.sum();
        prob.row(n) = e / z;
        loss += -(L(n, y) - m - std::log(z));
    }
    loss /= Scalar(N);
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result(Tensor<Scalar>::scalar(loss), {logits},
                       [prob = std::move(prob), lab = std::move(lab)](Node<Scalar>& self) {
                           auto d = self.parents[0]->grad_buffer().rows();
                           const Index N = prob.rows();
                           const Scalar g = self.grad[0] / Scalar(N);
                           for (Index n = 0; n < N; ++n) {
                               d.row(n) += g * prob.row(n);
                               d(n, lab[static_cast<std::size_t>(n)]) -= g;
                           }
                       });
}

template <typename Scalar>
Var<Scalar> nt_xent(const Var<Scalar>& codes, std::span<const int> partner, double temperature) {
    if (!(temperature > 0.0)) throw ArgumentError("nt_xent: temperature must be positive");
    const auto Cm = codes.value().rows();
    const Index M = Cm.rows();
    if (M < 2 || static_cast<Index>(partner.size()) != M) throw ArgumentError("nt_xent: need >= 2 codes with partners");
    for (Index i = 0; i < M; ++i) {
        const int p = partner[static_cast<std::size_t>(i)];
        if (p < 0 || p >= M || p == i) throw ArgumentError("nt_xent: invalid positive pairing");
    }
    Eigen::Array<Scalar, Eigen::Dynamic, 1> norms = Cm.rowwise().norm().array();
    if (!(norms > Scalar(0)).all() || !norms.allFinite()) throw NumericError("nt_xent: zero-norm or non-finite code");
    const RowMatrix<Scalar> U = norms.inverse().matrix().asDiagonal() * Cm;
    const Scalar inv_t = Scalar(1.0 / temperature);
    RowMatrix<Scalar> S = (U * U.transpose()) * inv_t;

    // Softmax over k != i per row, stored in P (diagonal zero).
    RowMatrix<Scalar> P = RowMatrix<Scalar>::Zero(M, M);
    Scalar loss = 0;
    for (Index i = 0; i < M; ++i) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        for (Index k = 0; k < M; ++k)
            if (k != i) m = std::max(m, S(i, k));
        Scalar z = 0;
        for (Index k = 0; k < M; ++k)
            if (k != i) z += (P(i, k) = std::exp(S(i, k) - m));
        P.row(i) /= z;
        loss += -(S(i, partner[static_cast<std::size_t>(i)]) - m - std::log(z));
    }
    loss /= Scalar(M);
    std::vector<int> pairs(partner.begin(), partner.end());
    return make_result(Tensor<Scalar>::scalar(loss), {codes},
                       [U, P = std::move(P), pairs = std::move(pairs), norms, inv_t](Node<Scalar>& self) {
                           const Index M = U.rows();
                           RowMatrix<Scalar> G = P;
                           for (Index i = 0; i < M; ++i) G(i, pairs[static_cast<std::size_t>(i)]) -= Scalar(1);
                           G *= self.grad[0] / Scalar(M);
                           const RowMatrix<Scalar> dU = (G + G.transpose()) * U * inv_t;
                           auto dC = self.parents[0]->grad_buffer().rows();
                           for (Index i = 0; i < M; ++i) {
                               const Scalar proj = U.row(i).dot(dU.row(i));
                               dC.row(i) += (dU.row(i) - proj * U.row(i)) / norms[i];
                           }
                       });
}

// ---------------------------------------------------------------------------

#define AEGAN_INSTANTIATE_OPS(S)                                                                                     \
    template void backward<S>(const Var<S>&);                                                                        \
    template void im2col<S>(const S*, Index, const ConvGeometry&, S*);                                               \
    template void col2im<S>(const S*, Index, const ConvGeometry&, S*);                                               \
    template Var<S> conv3d<S>(const Var<S>&, const Var<S>&, const Var<S>&, Extent3, Extent3);                        \
    template Var<S> conv_transpose3d<S>(const Var<S>&, const Var<S>&, const Var<S>&, Extent3, Extent3, Extent3);     \
    template Var<S> batch_norm3d<S>(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormBuffers<S>&, bool, double, \
                                    double);                                                                         \
    template Var<S> leaky_relu<S>(const Var<S>&, double);                                                            \
    template Var<S> relu<S>(const Var<S>&);                                                                          \
    template Var<S> sigmoid<S>(const Var<S>&);                                                                       \
    template Var<S> max_pool3d<S>(const Var<S>&, Extent3);                                                           \
    template Var<S> concat_channels<S>(const Var<S>&, const Var<S>&);                                                \
    template Var<S> concat_channels<S>(std::span<const Var<S>>);                                                     \
    template Var<S> concat_batch<S>(const Var<S>&, const Var<S>&);                                                   \
    template Var<S> global_avg_pool<S>(const Var<S>&);                                                               \
    template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                          \
    template Var<S> add<S>(const Var<S>&, const Var<S>&);                                                            \
    template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                                            \
    template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                                            \
    template Var<S> scale<S>(const Var<S>&, double);                                                                 \
    template Var<S> add_scalar<S>(const Var<S>&, double);                                                            \
    template Var<S> square<S>(const Var<S>&);                                                                        \
    template Var<S> mean<S>(const Var<S>&);                                                                          \
    template Var<S> mean_abs<S>(const Var<S>&);                                                                      \
    template Var<S> weighted_sum<S>(std::span<const Var<S>>, std::span<const double>);                               \
    template Var<S> cross_entropy<S>(const Var<S>&, std::span<const int>);                                           \
    template Var<S> nt_xent<S>(const Var<S>&, std::span<const int>, double);

AEGAN_INSTANTIATE_OPS(float)
AEGAN_INSTANTIATE_OPS(double)

#undef AEGAN_INSTANTIATE_OPS

} // namespace aegan::nn
