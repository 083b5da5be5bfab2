#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "gcg/errors.hpp"

namespace gcg {

/// 0-based indices of the `k` largest values. Ties go to the smaller index.
/// The result is ordered by rank (largest first).
template <typename T>
std::vector<std::size_t> top_k_by_rank(std::span<const T> values, std::size_t k) {
    if (k > values.size()) {
        throw ContractError("top-k: K = " + std::to_string(k) + " exceeds length " + std::to_string(values.size()));
    }
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        return values[a] > values[b] || (values[a] == values[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
    return idx;
}

/// 1-based indices of the `k` largest values in ascending temporal order.
template <typename T>
std::vector<std::size_t> top_k_timestamps(std::span<const T> values, std::size_t k) {
    std::vector<std::size_t> idx = top_k_by_rank(values, k);
    std::sort(idx.begin(), idx.end());
    for (auto& i : idx) ++i;
    return idx;
}

} // namespace gcg
