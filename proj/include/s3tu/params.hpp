#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "s3tu/autodiff.hpp"
#include "s3tu/norm.hpp"
#include "s3tu/rng.hpp"

namespace s3tu {

/// Named tensors of a model in declaration order. Non-trainable entries are buffers
/// (batch-norm running statistics).
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        bool trainable = true;
        /// Optimizers clamp the entry to this floor after each update.
        double min_value = -std::numeric_limits<double>::infinity();
    };

    void declare(const std::string& name, Tensor value, bool trainable = true,
                 double min_value = -std::numeric_limits<double>::infinity()) {
        if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{name, std::move(value), trainable, min_value});
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) { return entries_[lookup(name)].value; }
    const Tensor& at(const std::string& name) const { return entries_[lookup(name)].value; }
    const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }

    std::vector<Entry>& entries() noexcept { return entries_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    /// Total trainable scalar count.
    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        if (a.entries_.size() != b.entries_.size()) return false;
        for (std::size_t i = 0; i < a.entries_.size(); ++i) {
            const auto& x = a.entries_[i];
            const auto& y = b.entries_[i];
            if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
        }
        return true;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Kaiming-uniform (ReLU gain) weights: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

/// Everything a block's forward pass needs: the tape, the parameter store, mode flags and
/// the DropBlock generator. Parameters are bound to tape leaves on first use.
class Context {
public:
    Context(Tape& tape, ParamStore& params, bool training, Rng* rng = nullptr, bool track_grad = true)
        : tape_(tape), params_(params), training_(training), rng_(rng), track_grad_(track_grad) {}

    Tape& tape() noexcept { return tape_; }
    ParamStore& params() noexcept { return params_; }
    bool training() const noexcept { return training_; }
    Rng* rng() noexcept { return rng_; }

    Var param(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const auto& e = params_.entry(name);
        Var v = tape_.leaf(e.value, track_grad_ && e.trainable);
        bound_.emplace(name, v);
        return v;
    }

    /// Pre-binds a name to an existing Var (used by gradient checks to inject leaves).
    void bind(const std::string& name, Var v) { bound_[name] = v; }

    BatchNormStats running_stats(const std::string& prefix) {
        return BatchNormStats{params_.at(prefix + ".running_mean"), params_.at(prefix + ".running_var")};
    }

    /// Gradients of every bound trainable parameter after tape.backward().
    std::map<std::string, Tensor> gradients() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, v] : bound_)
            if (v.requires_grad()) out.emplace(name, tape_.grad(v));
        return out;
    }

    const std::unordered_map<std::string, Var>& bound() const noexcept { return bound_; }

private:
    Tape& tape_;
    ParamStore& params_;
    bool training_;
    Rng* rng_;
    bool track_grad_;
    std::unordered_map<std::string, Var> bound_;
};

}  // namespace s3tu
