#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// The scalar type is a template parameter: float is the training default,
// double is used by the gradient-check suites.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vtok {

using Shape = std::vector<int64_t>;
using Rng = std::mt19937_64;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Rounding mode used project-wide (quantizers, byte mapping): ties away from zero.
inline double round_half_away(double x) { return std::round(x); }

// Checked mode makes every op verify its output is finite.
inline bool& checked_mode() {
    static thread_local bool on = false;
    return on;
}
inline void set_checked(bool on) { checked_mode() = on; }

inline std::atomic<uint64_t>& node_id_counter() {
    static std::atomic<uint64_t> c{1};
    return c;
}

template <typename S>
struct NodeT {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    uint64_t id = 0;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
class TensorT {
public:
    TensorT() = default;

    static TensorT from_vector(Shape shape, std::vector<S> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        TensorT t;
        t.node_ = std::make_shared<NodeT<S>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->id = node_id_counter().fetch_add(1);
        return t;
    }

    static TensorT zeros(Shape shape) {
        auto n = shape_numel(shape);
        return from_vector(std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)));
    }

    static TensorT full(Shape shape, S v) {
        auto n = shape_numel(shape);
        return from_vector(std::move(shape), std::vector<S>(static_cast<size_t>(n), v));
    }

    static TensorT scalar(S v) { return from_vector({1}, {v}); }

    static TensorT randn(Shape shape, Rng& rng, S stddev = S(1)) {
        auto n = shape_numel(shape);
        std::vector<S> d(static_cast<size_t>(n));
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& x : d) x = static_cast<S>(dist(rng)) * stddev;
        return from_vector(std::move(shape), std::move(d));
    }

    static TensorT uniform(Shape shape, Rng& rng, S lo, S hi) {
        auto n = shape_numel(shape);
        std::vector<S> d(static_cast<size_t>(n));
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& x : d) x = static_cast<S>(dist(rng));
        return from_vector(std::move(shape), std::move(d));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t ndim() const { return node_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    const std::vector<S>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    TensorT clone() const {
        TensorT t = from_vector(node_->shape, node_->value);
        return t;
    }

    uint64_t id() const { return node_->id; }
    std::shared_ptr<NodeT<S>> node() const { return node_; }

private:
    std::shared_ptr<NodeT<S>> node_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed operations. Ops record themselves onto the
// innermost active tape; backward() replays the records in reverse, which is a
// valid topological order because an op's inputs always exist before it runs.
// ---------------------------------------------------------------------------

template <typename S>
class TapeT {
public:
    struct Record {
        const char* op;
        std::vector<uint64_t> input_ids;
        uint64_t output_id;
        std::function<void()> backward;
    };

    TapeT() : prev_(active_) { active_ = this; }
    ~TapeT() { active_ = prev_; }
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* active() { return active_; }

    void record(const char* op, std::vector<uint64_t> input_ids, uint64_t output_id,
                std::function<void()> backward) {
        records_.push_back({op, std::move(input_ids), output_id, std::move(backward)});
    }

    const std::vector<Record>& records() const { return records_; }

    static TapeT* detach_active() {
        TapeT* t = active_;
        active_ = nullptr;
        return t;
    }
    static void restore_active(TapeT* t) { active_ = t; }

    void backward(const TensorT<S>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        auto n = loss.node();
        n->ensure_grad();
        n->grad[0] += S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    }

private:
    std::vector<Record> records_;
    TapeT* prev_;
    static thread_local TapeT* active_;
};

template <typename S>
thread_local TapeT<S>* TapeT<S>::active_ = nullptr;

// Temporarily disables recording (evaluation mode).
template <typename S>
class NoGradT {
public:
    NoGradT() : saved_(TapeT<S>::detach_active()) {}
    ~NoGradT() { TapeT<S>::restore_active(saved_); }
    NoGradT(const NoGradT&) = delete;

private:
    TapeT<S>* saved_;
};

namespace detail {

template <typename S>
void check_finite(const TensorT<S>& t, const char* op) {
    if (!checked_mode()) return;
    for (const S v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
    }
}

template <typename S>
bool recording(std::initializer_list<const TensorT<S>*> ins) {
    if (TapeT<S>::active() == nullptr) return false;
    for (const auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
void attach(const char* op, std::initializer_list<const TensorT<S>*> ins, TensorT<S>& out,
            std::function<void()> backward) {
    std::vector<uint64_t> ids;
    ids.reserve(ins.size());
    for (const auto* t : ins)
        if (t->defined()) ids.push_back(t->id());
    out.set_requires_grad(true);
    TapeT<S>::active()->record(op, std::move(ids), out.id(), std::move(backward));
}

}  // namespace detail

}  // namespace vtok

#include "vtok/tensor_ops.hpp"
