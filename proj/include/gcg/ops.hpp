#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/tensor.hpp"

// Differentiable tensor operations recorded on a Tape.
namespace gcg::ad {

namespace detail {

template <typename S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.extents() != b.extents()) {
        throw ShapeError(std::string(op) + ": extents " + format_extents(a.extents()) + " and " +
                         format_extents(b.extents()) + " differ");
    }
}

template <typename S>
void require_matrix(const Var<S>& a, const char* op) {
    if (a.extents().size() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + format_extents(a.extents()));
    }
}

template <typename S>
void add_into(Tensor<S>& dst, const Tensor<S>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner extents disagree, " + format_extents(a.extents()) + " x " +
                         format_extents(b.extents()));
    }
    const Tensor<S>& A = a.value();
    const Tensor<S>& B = b.value();
    Tensor<S> C({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        S* crow = &C[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const S av = A[i * k + p];
            if (av == S{0}) continue;
            const S* brow = &B[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return a.tape->push("matmul", {a.id, b.id}, std::move(C), [a, b, m, k, n](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        const Tensor<S>& A = t.value(a.id);
        const Tensor<S>& B = t.value(b.id);
        if (t.requires_grad(a.id)) {
            Tensor<S>& dA = t.grad(a.id);
            for (std::size_t i = 0; i < m; ++i) {
                const S* grow = &G[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const S* brow = &B[p * n];
                    S acc{0};
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    dA[i * k + p] += acc;
                }
            }
        }
        if (t.requires_grad(b.id)) {
            Tensor<S>& dB = t.grad(b.id);
            for (std::size_t i = 0; i < m; ++i) {
                const S* grow = &G[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const S av = A[i * k + p];
                    if (av == S{0}) continue;
                    S* drow = &dB[p * n];
                    for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                }
            }
        }
    });
}

template <typename S>
Var<S> transpose(Var<S> a) {
    detail::require_matrix(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    const Tensor<S>& A = a.value();
    Tensor<S> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    return a.tape->push("transpose", {a.id}, std::move(out), [a, r, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += G[j * r + i];
    });
}

template <typename S>
Var<S> reshape(Var<S> a, Extents extents) {
    Tensor<S> out = a.value().reshaped(std::move(extents));
    return a.tape->push("reshape", {a.id}, std::move(out), [a](Tape<S>& t, std::size_t self) {
        detail::add_into(t.grad(a.id), t.grad(self));
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    detail::require_same(a, b, "add");
    Tensor<S> out = a.value();
    detail::add_into(out, b.value());
    return a.tape->push("add", {a.id, b.id}, std::move(out), [a, b](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        if (t.requires_grad(a.id)) detail::add_into(t.grad(a.id), G);
        if (t.requires_grad(b.id)) detail::add_into(t.grad(b.id), G);
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    detail::require_same(a, b, "sub");
    Tensor<S> out = a.value();
    const Tensor<S>& B = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    return a.tape->push("sub", {a.id, b.id}, std::move(out), [a, b](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        if (t.requires_grad(a.id)) detail::add_into(t.grad(a.id), G);
        if (t.requires_grad(b.id)) {
            Tensor<S>& dB = t.grad(b.id);
            for (std::size_t i = 0; i < G.size(); ++i) dB[i] -= G[i];
        }
    });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    detail::require_same(a, b, "mul");
    Tensor<S> out = a.value();
    const Tensor<S>& B = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return a.tape->push("mul", {a.id, b.id}, std::move(out), [a, b](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        const Tensor<S>& A = t.value(a.id);
        const Tensor<S>& B = t.value(b.id);
        if (t.requires_grad(a.id)) {
            Tensor<S>& dA = t.grad(a.id);
            for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i] * B[i];
        }
        if (t.requires_grad(b.id)) {
            Tensor<S>& dB = t.grad(b.id);
            for (std::size_t i = 0; i < G.size(); ++i) dB[i] += G[i] * A[i];
        }
    });
}

/// Multiplies by a constant factor.
template <typename S>
Var<S> scale(Var<S> a, S factor) {
    Tensor<S> out = a.value();
    for (S& x : out.storage()) x *= factor;
    return a.tape->push("scale", {a.id}, std::move(out), [a, factor](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) dA[i] += factor * G[i];
    });
}

/// Multiplies every row of X by a broadcast vector (or by a single scalar).
template <typename S>
Var<S> scale(Var<S> x, Var<S> factor) {
    const std::size_t c = x.cols();
    const std::size_t f = factor.size();
    if (f != 1 && f != c) {
        throw ShapeError("scale: factor extents " + format_extents(factor.extents()) + " do not broadcast over " +
                         format_extents(x.extents()));
    }
    const Tensor<S>& X = x.value();
    const Tensor<S>& F = factor.value();
    Tensor<S> out = X;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= F[f == 1 ? 0 : i % c];
    return x.tape->push("scale", {x.id, factor.id}, std::move(out), [x, factor, c, f](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        const Tensor<S>& X = t.value(x.id);
        const Tensor<S>& F = t.value(factor.id);
        if (t.requires_grad(x.id)) {
            Tensor<S>& dX = t.grad(x.id);
            for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i] * F[f == 1 ? 0 : i % c];
        }
        if (t.requires_grad(factor.id)) {
            Tensor<S>& dF = t.grad(factor.id);
            for (std::size_t i = 0; i < G.size(); ++i) dF[f == 1 ? 0 : i % c] += G[i] * X[i];
        }
    });
}

/// Adds a bias vector to every row.
template <typename S>
Var<S> add_bias(Var<S> x, Var<S> bias) {
    const std::size_t c = x.cols();
    if (bias.size() != c) {
        throw ShapeError("add_bias: bias extents " + format_extents(bias.extents()) + " do not match columns of " +
                         format_extents(x.extents()));
    }
    Tensor<S> out = x.value();
    const Tensor<S>& B = bias.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % c];
    return x.tape->push("add_bias", {x.id, bias.id}, std::move(out), [x, bias, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        if (t.requires_grad(x.id)) detail::add_into(t.grad(x.id), G);
        if (t.requires_grad(bias.id)) {
            Tensor<S>& dB = t.grad(bias.id);
            for (std::size_t i = 0; i < G.size(); ++i) dB[i % c] += G[i];
        }
    });
}

namespace detail {

// Applies f elementwise; df receives (x, y) and returns dy/dx.
template <typename S, typename F, typename DF>
Var<S> unary(const char* op, Var<S> a, F f, DF df) {
    const Tensor<S>& X = a.value();
    Tensor<S> out(X.extents());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = f(X[i]);
    return a.tape->push(op, {a.id}, std::move(out), [a, df](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        const Tensor<S>& X = t.value(a.id);
        const Tensor<S>& Y = t.value(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i] * df(X[i], Y[i]);
    });
}

} // namespace detail

template <typename S>
Var<S> sigmoid(Var<S> a) {
    return detail::unary(
        "sigmoid", a,
        [](S x) {
            double v = static_cast<double>(x);
            return static_cast<S>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
        },
        [](S, S y) { return y * (S{1} - y); });
}

template <typename S>
Var<S> exp(Var<S> a) {
    // Evaluated in double and narrowed; overflow surfaces as a NumericError from push().
    return detail::unary(
        "exp", a, [](S x) { return static_cast<S>(std::exp(static_cast<double>(x))); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(Var<S> a) {
    return detail::unary(
        "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S{1} / x; });
}

template <typename S>
Var<S> relu(Var<S> a) {
    return detail::unary(
        "relu", a, [](S x) { return x > S{0} ? x : S{0}; }, [](S x, S) { return x > S{0} ? S{1} : S{0}; });
}

/// Exact (erf-based) GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
    return detail::unary(
        "gelu", a,
        [](S x) { return static_cast<S>(0.5 * x * (1.0 + std::erf(x * (std::numbers::sqrt2 / 2.0)))); },
        [](S x, S) {
            const double xd = x;
            const double cdf = 0.5 * (1.0 + std::erf(xd * (std::numbers::sqrt2 / 2.0)));
            const double pdf = std::exp(-0.5 * xd * xd) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
            return static_cast<S>(cdf + xd * pdf);
        });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename S>
Var<S> sum(Var<S> a) {
    S acc{0};
    for (S x : a.value().data()) acc += x;
    return a.tape->push("sum", {a.id}, Tensor<S>::scalar(acc), [a](Tape<S>& t, std::size_t self) {
        const S g = t.grad(self)[0];
        for (S& x : t.grad(a.id).storage()) x += g;
    });
}

/// Mean over rows of a matrix -> vector of length cols. With a mask, only
/// rows whose flag is true contribute.
template <typename S>
Var<S> mean_rows(Var<S> a, const std::vector<bool>* mask = nullptr) {
    const std::size_t r = a.rows(), c = a.cols();
    if (mask && mask->size() != r) throw ShapeError("mean_rows: mask length does not match rows");
    std::size_t count = 0;
    for (std::size_t i = 0; i < r; ++i) count += (!mask || (*mask)[i]) ? 1 : 0;
    if (count == 0) throw InvalidMaskError("mean_rows: every row is masked");
    const Tensor<S>& A = a.value();
    Tensor<S> out({c});
    for (std::size_t i = 0; i < r; ++i) {
        if (mask && !(*mask)[i]) continue;
        for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
    }
    const S inv = S{1} / static_cast<S>(count);
    for (S& x : out.storage()) x *= inv;
    std::vector<bool> keep = mask ? *mask : std::vector<bool>(r, true);
    return a.tape->push("mean_rows", {a.id}, std::move(out), [a, r, c, inv, keep](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < r; ++i) {
            if (!keep[i]) continue;
            for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += G[j] * inv;
        }
    });
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("concat_rows: column counts differ, " + format_extents(a.extents()) + " and " +
                         format_extents(b.extents()));
    }
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    std::vector<S> data(a.value().storage());
    data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
    Tensor<S> out({ra + rb, c}, std::move(data));
    return a.tape->push("concat_rows", {a.id, b.id}, std::move(out), [a, b, ra, rb, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        if (t.requires_grad(a.id)) {
            Tensor<S>& dA = t.grad(a.id);
            for (std::size_t i = 0; i < ra * c; ++i) dA[i] += G[i];
        }
        if (t.requires_grad(b.id)) {
            Tensor<S>& dB = t.grad(b.id);
            for (std::size_t i = 0; i < rb * c; ++i) dB[i] += G[ra * c + i];
        }
    });
}

/// Horizontal concatenation of equally tall matrices (or vectors as 1 x n).
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    std::vector<std::size_t> ids, widths;
    for (const Var<S>& p : parts) {
        if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
        ids.push_back(p.id);
        widths.push_back(p.cols());
        total += p.cols();
    }
    Tensor<S> out({r, total});
    std::size_t offset = 0;
    for (const Var<S>& p : parts) {
        const Tensor<S>& P = p.value();
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = P[i * w + j];
        offset += w;
    }
    return parts[0].tape->push("concat_cols", ids, std::move(out), [ids, widths, r, total](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t w = widths[k];
            if (t.requires_grad(ids[k])) {
                Tensor<S>& dP = t.grad(ids[k]);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) dP[i * w + j] += G[i * total + offset + j];
            }
            offset += w;
        }
    });
}

template <typename S>
Var<S> slice_rows(Var<S> a, std::size_t begin, std::size_t end) {
    const std::size_t r = a.rows(), c = a.cols();
    if (begin >= end || end > r) throw ShapeError("slice_rows: bad range for " + format_extents(a.extents()));
    const auto& src = a.value().storage();
    std::vector<S> data(src.begin() + static_cast<std::ptrdiff_t>(begin * c),
                        src.begin() + static_cast<std::ptrdiff_t>(end * c));
    Tensor<S> out({end - begin, c}, std::move(data));
    return a.tape->push("slice_rows", {a.id}, std::move(out), [a, begin, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < G.size(); ++i) dA[begin * c + i] += G[i];
    });
}

template <typename S>
Var<S> slice_cols(Var<S> a, std::size_t begin, std::size_t end) {
    const std::size_t r = a.rows(), c = a.cols();
    if (begin >= end || end > c) throw ShapeError("slice_cols: bad range for " + format_extents(a.extents()));
    const std::size_t w = end - begin;
    const Tensor<S>& A = a.value();
    Tensor<S> out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = A[i * c + begin + j];
    return a.tape->push("slice_cols", {a.id}, std::move(out), [a, r, c, w, begin](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) dA[i * c + begin + j] += G[i * w + j];
    });
}

/// Row gather by index (0-based). Indices may repeat.
template <typename S>
Var<S> gather_rows(Var<S> a, const std::vector<std::size_t>& index) {
    const std::size_t r = a.rows(), c = a.cols();
    if (index.empty()) throw ShapeError("gather_rows: empty index");
    const Tensor<S>& A = a.value();
    Tensor<S> out({index.size(), c});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= r) throw ShapeError("gather_rows: index out of range");
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[index[i] * c + j];
    }
    return a.tape->push("gather_rows", {a.id}, std::move(out), [a, index, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        Tensor<S>& dA = t.grad(a.id);
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) dA[index[i] * c + j] += G[i * c + j];
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row softmax with per-row max subtraction. Masked entries (false) are 0.
template <typename S>
Var<S> softmax_rows(Var<S> x, const std::vector<bool>* mask = nullptr) {
    const std::size_t r = x.rows(), c = x.cols();
    if (mask && mask->size() != r * c) throw ShapeError("softmax_rows: mask size does not match input");
    const Tensor<S>& X = x.value();
    Tensor<S> out(x.extents());
    for (std::size_t i = 0; i < r; ++i) {
        S mx = -std::numeric_limits<S>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < c; ++j) {
            if (mask && !(*mask)[i * c + j]) continue;
            any = true;
            mx = std::max(mx, X[i * c + j]);
        }
        if (!any) throw InvalidMaskError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        S total{0};
        for (std::size_t j = 0; j < c; ++j) {
            if (mask && !(*mask)[i * c + j]) continue;
            const S e = std::exp(X[i * c + j] - mx);
            out[i * c + j] = e;
            total += e;
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
    }
    return x.tape->push("softmax_rows", {x.id}, std::move(out), [x, r, c](Tape<S>& t, std::size_t self) {
        const Tensor<S>& G = t.grad(self);
        const Tensor<S>& Y = t.value(self);
        Tensor<S>& dX = t.grad(x.id);
        for (std::size_t i = 0; i < r; ++i) {
            S dot{0};
            for (std::size_t j = 0; j < c; ++j) dot += G[i * c + j] * Y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) dX[i * c + j] += Y[i * c + j] * (G[i * c + j] - dot);
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias) {
    const std::size_t r = x.rows(), c = x.cols();
    if (c < 2) throw ShapeError("layer_norm: need at least two columns");
    if (gain.size() != c || bias.size() != c) throw ShapeError("layer_norm: gain/bias length must equal columns");
    const Tensor<S>& X = x.value();
    const Tensor<S>& Gn = gain.value();
    const Tensor<S>& B = bias.value();
    Tensor<S> out(x.extents());
    std::vector<S> xhat(r * c);
    std::vector<S> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        S mean{0};
        for (std::size_t j = 0; j < c; ++j) mean += X[i * c + j];
        mean /= static_cast<S>(c);
        S var{0};
        for (std::size_t j = 0; j < c; ++j) {
            const S d = X[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(c);
        const S is = S{1} / std::sqrt(var + static_cast<S>(kLayerNormEps));
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const S h = (X[i * c + j] - mean) * is;
            xhat[i * c + j] = h;
            out[i * c + j] = Gn[j] * h + B[j];
        }
    }
    return x.tape->push("layer_norm", {x.id, gain.id, bias.id}, std::move(out),
                        [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape<S>& t, std::size_t self) {
                            const Tensor<S>& G = t.grad(self);
                            const Tensor<S>& Gn = t.value(gain.id);
                            if (t.requires_grad(gain.id)) {
                                Tensor<S>& dG = t.grad(gain.id);
                                for (std::size_t i = 0; i < r * c; ++i) dG[i % c] += G[i] * xhat[i];
                            }
                            if (t.requires_grad(bias.id)) {
                                Tensor<S>& dB = t.grad(bias.id);
                                for (std::size_t i = 0; i < r * c; ++i) dB[i % c] += G[i];
                            }
                            if (t.requires_grad(x.id)) {
                                Tensor<S>& dX = t.grad(x.id);
                                const S n = static_cast<S>(c);
                                for (std::size_t i = 0; i < r; ++i) {
                                    S sum_g{0}, sum_gx{0};
                                    for (std::size_t j = 0; j < c; ++j) {
                                        const S gh = G[i * c + j] * Gn[j];
                                        sum_g += gh;
                                        sum_gx += gh * xhat[i * c + j];
                                    }
                                    for (std::size_t j = 0; j < c; ++j) {
                                        const S gh = G[i * c + j] * Gn[j];
                                        dX[i * c + j] +=
                                            inv_std[i] / n * (n * gh - sum_g - xhat[i * c + j] * sum_gx);
                                    }
                                }
                            }
                        });
}

/// Scales every row to unit L2 norm.
template <typename S>
Var<S> l2_normalize_rows(Var<S> x) {
    const std::size_t r = x.rows(), c = x.cols();
    const Tensor<S>& X = x.value();
    Tensor<S> out(x.extents());
    std::vector<S> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        S ss{0};
        for (std::size_t j = 0; j < c; ++j) ss += X[i * c + j] * X[i * c + j];
        const S n = std::sqrt(ss);
        if (!(n > S{0})) throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        norms[i] = n;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] / n;
    }
    return x.tape->push("l2_normalize_rows", {x.id}, std::move(out),
                        [x, r, c, norms = std::move(norms)](Tape<S>& t, std::size_t self) {
                            const Tensor<S>& G = t.grad(self);
                            const Tensor<S>& Y = t.value(self);
                            Tensor<S>& dX = t.grad(x.id);
                            for (std::size_t i = 0; i < r; ++i) {
                                S dot{0};
                                for (std::size_t j = 0; j < c; ++j) dot += G[i * c + j] * Y[i * c + j];
                                for (std::size_t j = 0; j < c; ++j)
                                    dX[i * c + j] += (G[i * c + j] - Y[i * c + j] * dot) / norms[i];
                            }
                        });
}

/// Mean cross-entropy of one row of logits against a target class.
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::size_t target) {
    const std::size_t n = logits.size();
    if (target >= n) {
        throw ContractError("cross_entropy: answer index " + std::to_string(target) + " out of range for " +
                            std::to_string(n) + " candidates");
    }
    const Tensor<S>& L = logits.value();
    S mx = L[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, L[i]);
    S total{0};
    for (std::size_t i = 0; i < n; ++i) total += std::exp(L[i] - mx);
    const S lse = mx + std::log(total);
    return logits.tape->push("cross_entropy", {logits.id}, Tensor<S>::scalar(lse - L[target]),
                             [logits, target, n, lse](Tape<S>& t, std::size_t self) {
                                 const S g = t.grad(self)[0];
                                 const Tensor<S>& L = t.value(logits.id);
                                 Tensor<S>& dL = t.grad(logits.id);
                                 for (std::size_t i = 0; i < n; ++i) {
                                     const S prob = std::exp(L[i] - lse);
                                     dL[i] += g * (prob - (i == target ? S{1} : S{0}));
                                 }
                             });
}

} // namespace gcg::ad
