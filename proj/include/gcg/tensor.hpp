#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcg/errors.hpp"

namespace gcg {

using Extents = std::vector<std::size_t>;

inline std::size_t element_count(const Extents& extents) {
    return std::accumulate(extents.begin(), extents.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string format_extents(const Extents& extents) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < extents.size(); ++i) {
        if (i) os << 'x';
        os << extents[i];
    }
    os << ']';
    return os.str();
}

enum class Precision : std::uint8_t { F32 = 1, F64 = 2 };

template <typename S>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>, "float or double only");
    return std::is_same_v<S, float> ? Precision::F32 : Precision::F64;
}

/// Dense row-major array. Rank-1 tensors of length one double as scalars.
template <typename S>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    explicit Tensor(Extents extents, S fill = S{0})
        : extents_(std::move(extents)), data_(element_count(extents_), fill) {
        check_extents();
    }

    Tensor(Extents extents, std::vector<S> data) : extents_(std::move(extents)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != element_count(extents_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match extents " +
                             format_extents(extents_));
        }
    }

    static Tensor scalar(S value) { return Tensor({1}, std::vector<S>{value}); }

    static Tensor vector(std::initializer_list<S> values) {
        return Tensor({values.size()}, std::vector<S>(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<S>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<S> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const Extents& extents() const noexcept { return extents_; }
    std::size_t rank() const noexcept { return extents_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return extents_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }
    bool is_scalar() const noexcept { return data_.size() == 1; }

    // Matrix views: a rank-1 tensor of length n is treated as 1 x n.
    std::size_t rows() const noexcept { return extents_.size() >= 2 ? extents_[0] : 1; }
    std::size_t cols() const noexcept {
        if (extents_.empty()) return 0;
        return extents_.size() >= 2 ? data_.size() / extents_[0] : extents_[0];
    }

    std::span<S> data() noexcept { return data_; }
    std::span<const S> data() const noexcept { return data_; }
    std::vector<S>& storage() noexcept { return data_; }
    const std::vector<S>& storage() const noexcept { return data_; }

    S& operator[](std::size_t i) noexcept { return data_[i]; }
    const S& operator[](std::size_t i) const noexcept { return data_[i]; }

    S& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const S& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<S> row(std::size_t r) noexcept { return std::span<S>(data_).subspan(r * cols(), cols()); }
    std::span<const S> row(std::size_t r) const noexcept {
        return std::span<const S>(data_).subspan(r * cols(), cols());
    }

    S item() const {
        if (!is_scalar()) throw ContractError("item() on tensor with extents " + format_extents(extents_));
        return data_[0];
    }

    Tensor reshaped(Extents extents) const {
        if (element_count(extents) != data_.size()) {
            throw ShapeError("cannot reshape " + format_extents(extents_) + " to " + format_extents(extents));
        }
        return Tensor(std::move(extents), data_);
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(data_.begin(), data_.end());
        return Tensor<T>(extents_, std::move(out));
    }

    void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.extents_ == b.extents_ && a.data_ == b.data_;
    }

private:
    void check_extents() const {
        for (std::size_t e : extents_) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + format_extents(extents_));
        }
    }

    Extents extents_;
    std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace gcg
