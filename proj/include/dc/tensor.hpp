#ifndef DC_TENSOR_HPP
#define DC_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "dc/common.hpp"
#include "dc/rng.hpp"

namespace dc {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        require(d > 0, ErrorCode::dimension, "tensor dims must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major tensor with a shared payload and an optional gradient
// buffer of the same shape. Copies are shallow; reshape returns a view.
template <typename S>
class Tensor {
public:
    using Buf = std::vector<S>;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(std::make_shared<Buf>(numel_of(shape_), S(0))) {}

    Tensor(std::vector<int> shape, std::shared_ptr<Buf> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        require(int64_t((*data_).size()) == numel_of(shape_), ErrorCode::dimension,
                "payload length does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, S v) {
        Tensor t(std::move(shape));
        for (auto& x : *t.data_)
            x = v;
        return t;
    }

    static Tensor from(std::vector<int> shape, std::initializer_list<S> vals) {
        Tensor t(std::move(shape));
        require(int64_t(vals.size()) == t.numel(), ErrorCode::dimension, "initializer length mismatch");
        int64_t i = 0;
        for (S v : vals)
            t.flat(i++) = v;
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, S std_dev = S(1)) {
        Tensor t(std::move(shape));
        for (auto& x : *t.data_)
            x = S(rng.normal()) * std_dev;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int64_t numel() const { return data_ ? int64_t(data_->size()) : 0; }
    bool defined() const { return bool(data_); }

    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    S& flat(int64_t i) { return (*data_)[size_t(i)]; }
    S flat(int64_t i) const { return (*data_)[size_t(i)]; }

    // 2-D accessors for the common [N,d] case
    S& at(int r, int c) { return (*data_)[size_t(r) * shape_[1] + c]; }
    S at(int r, int c) const { return (*data_)[size_t(r) * shape_[1] + c]; }

    bool requires_grad() const { return requires_grad_; }

    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        if (b)
            ensure_grad();
        return *this;
    }

    void ensure_grad() {
        if (!grad_)
            grad_ = std::make_shared<Buf>(size_t(numel()), S(0));
    }

    bool has_grad() const { return bool(grad_); }
    S* grad() { return grad_->data(); }
    const S* grad() const { return grad_->data(); }
    std::shared_ptr<Buf> grad_buf() const { return grad_; }
    std::shared_ptr<Buf> data_buf() const { return data_; }

    void zero_grad() {
        if (grad_)
            std::fill(grad_->begin(), grad_->end(), S(0));
    }

    // same payload, no gradient tracking
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    // same payload, private zeroed gradient buffer (for per-sample tapes)
    Tensor with_fresh_grad() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        t.requires_grad_ = requires_grad_;
        if (requires_grad_)
            t.grad_ = std::make_shared<Buf>(size_t(numel()), S(0));
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<Buf>(*data_);
        return t;
    }

    // view with the same flat buffers
    Tensor reshaped(std::vector<int> shape) const {
        require(numel_of(shape) == numel(), ErrorCode::dimension,
                "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.grad_ = grad_;
        t.requires_grad_ = requires_grad_;
        return t;
    }

    bool all_finite() const {
        for (const S& x : *data_)
            if (!std::isfinite(double(x)))
                return false;
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> t(shape_);
        for (int64_t i = 0; i < numel(); ++i)
            t.flat(i) = T(flat(i));
        return t;
    }

private:
    template <typename T>
    friend class Tensor;

    std::vector<int> shape_;
    std::shared_ptr<Buf> data_;
    std::shared_ptr<Buf> grad_;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Recorded per forward pass, confined to one thread,
// freed after backward.
template <typename S>
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    size_t size() const { return nodes_.size(); }

    void backward(Tensor<S>& loss) {
        require(loss.numel() == 1, ErrorCode::dimension, "backward expects a scalar loss");
        require(std::isfinite(double(loss.flat(0))), ErrorCode::numeric, "non-finite loss");
        loss.ensure_grad();
        loss.grad()[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            (*it)();
        nodes_.clear();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dc

#endif  // DC_TENSOR_HPP
