#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"

namespace cda {

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& msg) : std::runtime_error("ShapeMismatch: " + msg) {}
};

// Dense row-major tensor with value semantics. Feature maps use NHWC layout
// so convolution lowers to a single GEMM without transposes.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }

    Tensor(std::initializer_list<long> shape) : Tensor(std::vector<long>(shape)) {}

    static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<long> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor from_vector(std::vector<long> shape, std::vector<T> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if ((long)values.size() != numel_of(t.shape_))
            throw ShapeMismatch("from_vector: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<long> shape, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = T(rng.normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(std::vector<long> shape, Rng& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = T(rng.uniform(double(lo), double(hi)));
        return t;
    }

    const std::vector<long>& shape() const { return shape_; }
    long size() const { return (long)data_.size(); }
    long dim(int i) const { return shape_.at(size_t(i)); }
    int ndim() const { return (int)shape_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](long i) { return data_[size_t(i)]; }
    const T& operator[](long i) const { return data_[size_t(i)]; }

    T& at(std::initializer_list<long> idx) { return data_[size_t(offset(idx))]; }
    const T& at(std::initializer_list<long> idx) const { return data_[size_t(offset(idx))]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<long> shape) const {
        if (numel_of(shape) != size()) throw ShapeMismatch("reshape: element count changed");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { std::memset(data_.data(), 0, data_.size() * sizeof(T)); }

    Tensor& operator+=(const Tensor& o) {
        check_same(o, "+=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        check_same(o, "-=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, T s) { return a *= s; }
    friend Tensor operator*(T s, Tensor a) { return a *= s; }

    // Accumulates in double regardless of T.
    double sum() const {
        double acc = 0.0;
        for (const auto& v : data_) acc += double(v);
        return acc;
    }
    double mean() const { return data_.empty() ? 0.0 : sum() / double(data_.size()); }
    double max_abs() const {
        double m = 0.0;
        for (const auto& v : data_) m = std::max(m, std::abs(double(v)));
        return m;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t = Tensor<U>::from_vector(shape_, std::vector<U>(data_.begin(), data_.end()));
        return t;
    }

    static long numel_of(const std::vector<long>& shape) {
        long n = 1;
        for (long d : shape) n *= d;
        return n;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + "]";
    }

private:
    long offset(std::initializer_list<long> idx) const {
        assert(idx.size() == shape_.size());
        long off = 0;
        auto it = idx.begin();
        for (size_t d = 0; d < shape_.size(); ++d, ++it) off = off * shape_[d] + *it;
        return off;
    }
    void check_same(const Tensor& o, const char* op) const {
        if (!same_shape(o)) throw ShapeMismatch(std::string(op) + " " + shape_str() + " vs " + o.shape_str());
    }

    std::vector<long> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cda
