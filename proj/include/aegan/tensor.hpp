#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <ostream>
#include <string>

namespace aegan {

using Index = Eigen::Index;

/// Spatial extent or per-axis integer triple, ordered (x, y, z).
/// z is the depth axis and the slowest-varying one in memory.
struct Extent3 {
    Index x = 1;
    Index y = 1;
    Index z = 1;

    constexpr Index volume() const noexcept { return x * y * z; }
    constexpr Index operator[](int axis) const noexcept { return axis == 0 ? x : (axis == 1 ? y : z); }
    constexpr Index& operator[](int axis) noexcept { return axis == 0 ? x : (axis == 1 ? y : z); }

    friend constexpr bool operator==(const Extent3&, const Extent3&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Extent3& e) {
    return os << '(' << e.x << ',' << e.y << ',' << e.z << ')';
}

inline std::string to_string(const Extent3& e) {
    return "(" + std::to_string(e.x) + "," + std::to_string(e.y) + "," + std::to_string(e.z) + ")";
}

/// Dense 5-D array (batch, channel, z, y, x), x fastest.
///
/// Feature vectors are stored with a unit spatial extent, and convolution
/// kernels reuse the layout as (out, in, k, k, k).
template <typename Scalar>
class Tensor {
public:
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatrixMap = Eigen::Map<RowMatrix>;
    using ConstMatrixMap = Eigen::Map<const RowMatrix>;

    Tensor() = default;
    Tensor(Index batch, Index channels, Extent3 extent)
        : batch_(batch), channels_(channels), extent_(extent), data_(Storage::Zero(batch * channels * extent.volume())) {}
    Tensor(Index batch, Index channels, Extent3 extent, Scalar fill)
        : batch_(batch), channels_(channels), extent_(extent),
          data_(Storage::Constant(batch * channels * extent.volume(), fill)) {}

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.batch_, other.channels_, other.extent_); }
    static Tensor vector(Index batch, Index features) { return Tensor(batch, features, Extent3{}); }
    static Tensor scalar(Scalar v) { return Tensor(1, 1, Extent3{}, v); }

    Index batch() const noexcept { return batch_; }
    Index channels() const noexcept { return channels_; }
    const Extent3& extent() const noexcept { return extent_; }
    Index spatial_size() const noexcept { return extent_.volume(); }
    Index size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.size() == 0; }

    bool same_shape(const Tensor& o) const noexcept {
        return batch_ == o.batch_ && channels_ == o.channels_ && extent_ == o.extent_;
    }

    Storage& array() noexcept { return data_; }
    const Storage& array() const noexcept { return data_; }
    Scalar* data() noexcept { return data_.data(); }
    const Scalar* data() const noexcept { return data_.data(); }

    Index offset(Index n, Index c, Index x, Index y, Index z) const noexcept {
        return (((n * channels_ + c) * extent_.z + z) * extent_.y + y) * extent_.x + x;
    }
    Scalar& operator()(Index n, Index c, Index x, Index y, Index z) noexcept { return data_[offset(n, c, x, y, z)]; }
    Scalar operator()(Index n, Index c, Index x, Index y, Index z) const noexcept {
        return data_[offset(n, c, x, y, z)];
    }
    Scalar& operator[](Index i) noexcept { return data_[i]; }
    Scalar operator[](Index i) const noexcept { return data_[i]; }

    /// Scalar value of a one-element tensor.
    Scalar item() const { return data_[0]; }

    /// (channels x spatial) view of one batch element.
    MatrixMap sample(Index n) noexcept {
        return MatrixMap(data_.data() + n * channels_ * spatial_size(), channels_, spatial_size());
    }
    ConstMatrixMap sample(Index n) const noexcept {
        return ConstMatrixMap(data_.data() + n * channels_ * spatial_size(), channels_, spatial_size());
    }

    /// (batch x channels*spatial) view; for kernels this is (out x in*k^3).
    MatrixMap rows() noexcept { return MatrixMap(data_.data(), batch_, channels_ * spatial_size()); }
    ConstMatrixMap rows() const noexcept { return ConstMatrixMap(data_.data(), batch_, channels_ * spatial_size()); }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out(batch_, channels_, extent_);
        out.array() = data_.template cast<Other>();
        return out;
    }

private:
    Index batch_ = 0;
    Index channels_ = 0;
    Extent3 extent_{0, 0, 0};
    Storage data_;
};

} // namespace aegan
