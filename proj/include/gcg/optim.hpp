#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gcg/autodiff.hpp"
#include "gcg/errors.hpp"
#include "gcg/tensor.hpp"

namespace gcg {

struct AdamWOptions {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// Named trainable parameters with gradient and AdamW moment buffers.
///
/// Parameters keep insertion order; that order fixes checkpoint layout and
/// the reduction order of every update.
template <typename S>
class ParamStore {
public:
    struct Slot {
        std::string name;
        Tensor<S> value;
        Tensor<S> grad;
        Tensor<S> m;
        Tensor<S> v;
    };

    std::size_t add(std::string name, Tensor<S> value) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        Slot slot;
        slot.name = name;
        slot.grad = Tensor<S>(value.extents(), S{0});
        slot.m = Tensor<S>(value.extents(), S{0});
        slot.v = Tensor<S>(value.extents(), S{0});
        slot.value = std::move(value);
        slots_.push_back(std::move(slot));
        index_.emplace(std::move(name), slots_.size() - 1);
        return slots_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t slot_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw NotFoundError("unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor<S>& value(const std::string& name) { return slots_[slot_of(name)].value; }
    const Tensor<S>& value(const std::string& name) const { return slots_[slot_of(name)].value; }
    Tensor<S>& grad(const std::string& name) { return slots_[slot_of(name)].grad; }
    const Tensor<S>& grad(const std::string& name) const { return slots_[slot_of(name)].grad; }

    std::vector<Slot>& slots() noexcept { return slots_; }
    const std::vector<Slot>& slots() const noexcept { return slots_; }

    std::uint64_t step() const noexcept { return step_; }
    void set_step(std::uint64_t s) noexcept { step_ = s; }
    void increment_step() noexcept { ++step_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Slot& s : slots_) n += s.value.size();
        return n;
    }

    /// Places a parameter on a tape as a differentiable leaf.
    ad::Var<S> bind(ad::Tape<S>& tape, const std::string& name) const {
        const std::size_t slot = slot_of(name);
        return tape.parameter(slots_[slot].value, slot);
    }

    /// Adds the gradients of every bound leaf on `tape` into the store.
    void accumulate_from(const ad::Tape<S>& tape) {
        for (const auto& [node, slot] : tape.bindings()) {
            if (!tape.has_grad(node)) continue;
            const auto& src = tape.node(node).grad;
            Tensor<S>& dst = slots_[slot].grad;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }

    void zero_grad() {
        for (Slot& s : slots_) s.grad.fill(S{0});
    }

private:
    std::vector<Slot> slots_;
    std::map<std::string, std::size_t> index_;
    std::uint64_t step_ = 0;
};

/// Reverse sweep from a scalar loss; parameter gradients accumulate into the store.
template <typename S>
void backward(ad::Var<S> loss, ParamStore<S>& store, S seed_scale = S{1}) {
    loss.tape->backward(loss, seed_scale);
    store.accumulate_from(*loss.tape);
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
template <typename S>
void adamw_step(ParamStore<S>& store, const AdamWOptions& opt) {
    store.increment_step();
    const double t = static_cast<double>(store.step());
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    for (auto& slot : store.slots()) {
        for (std::size_t i = 0; i < slot.value.size(); ++i) {
            const double g = slot.grad[i];
            double theta = slot.value[i];
            theta -= opt.lr * opt.weight_decay * theta;
            const double m = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g;
            const double v = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g * g;
            slot.m[i] = static_cast<S>(m);
            slot.v[i] = static_cast<S>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            theta -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.epsilon);
            slot.value[i] = static_cast<S>(theta);
        }
    }
}

} // namespace gcg
