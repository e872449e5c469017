#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "duel/autograd.hpp"

namespace duel {

using Rng = std::mt19937_64;

/// Seeds a generator from a list of integers (seed, stage, step, ...).
inline Rng make_rng(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (auto p : parts) {
        words.push_back(static_cast<std::uint32_t>(p & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, Rng& rng, double bound) {
    Tensor<T> t(shape);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

/// Named, ordered collection of trainable leaves. The leaf Var is the storage:
/// graphs built from it read the live value and accumulate into its grad.
template <typename T>
class ParamStore {
public:
    const ag::Var<T>& add(const std::string& name, Tensor<T> init) {
        require(!index_.contains(name), ErrorKind::invariant, "duplicate parameter " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, ag::leaf(std::move(init), true)});
        return entries_.back().var;
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    const ag::Var<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), ErrorKind::parameter, "unknown parameter " + name);
        return entries_[it->second].var;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.var->value.numel();
        return n;
    }

    void set_trainable(const std::string& name, bool trainable) {
        at(name)->requires_grad = trainable;
    }

    void zero_grad() {
        for (auto& e : entries_) e.var->grad = Tensor<T>();
    }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& e : entries_) fn(e.name, e.var);
    }

private:
    struct Entry {
        std::string name;
        ag::Var<T> var;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct OptimizerConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.0;  // zero: no momentum term
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter adaptive step with bias-corrected second-moment scaling
/// (Adam family; beta1 = 0 gives RMSProp with bias correction).
template <typename T>
class AdaptiveOptimizer {
public:
    explicit AdaptiveOptimizer(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    std::int64_t step_count() const { return step_; }

    /// Updates every parameter whose leaf requires a gradient and holds one.
    void step(ParamStore<T>& params) {
        ++step_;
        const double bc1 = config_.beta1 > 0 ? 1.0 - std::pow(config_.beta1, double(step_)) : 1.0;
        const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
        params.for_each([&](const std::string& name, const ag::Var<T>& p) {
            if (!p->requires_grad || p->grad.empty()) return;
            auto& st = state_[name];
            if (st.v.empty()) {
                st.v = Tensor<T>(p->value.shape());
                if (config_.beta1 > 0) st.m = Tensor<T>(p->value.shape());
            }
            for (std::int64_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                double m = g;
                if (config_.beta1 > 0) {
                    m = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g;
                    st.m[i] = static_cast<T>(m);
                }
                const double v = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g * g;
                st.v[i] = static_cast<T>(v);
                const double update =
                    config_.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + config_.eps);
                p->value[i] = static_cast<T>(p->value[i] - update);
            }
        });
    }

    struct Moments {
        Tensor<T> m;
        Tensor<T> v;
    };

    const std::map<std::string, Moments>& state() const { return state_; }
    std::map<std::string, Moments>& state() { return state_; }
    void set_step_count(std::int64_t s) { step_ = s; }

private:
    OptimizerConfig config_;
    std::int64_t step_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace duel
