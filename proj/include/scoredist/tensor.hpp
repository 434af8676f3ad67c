#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace scoredist {

// Dense row-major tensor of arbitrary rank. Scalar type is a template
// parameter; all library math runs in double by default.
template <typename T>
class BasicTensor {
public:
    BasicTensor() = default;

    explicit BasicTensor(std::vector<std::size_t> shape, T fill = T{})
        : shape_(std::move(shape)),
          data_(count_(shape_), fill) {}

    BasicTensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count_(shape_)) {
            throw std::invalid_argument("tensor data size does not match shape");
        }
    }

    static BasicTensor zeros_like(const BasicTensor& other) {
        return BasicTensor(other.shape_);
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // rank-2 accessors
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    bool same_shape(const BasicTensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](T v) { return std::isfinite(v); });
    }

    BasicTensor reshaped(std::vector<std::size_t> shape) const {
        if (count_(shape) != data_.size()) {
            throw std::invalid_argument("reshape changes element count");
        }
        return BasicTensor(std::move(shape), data_);
    }

    BasicTensor& operator+=(const BasicTensor& o) {
        check_shape_(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    BasicTensor& operator-=(const BasicTensor& o) {
        check_shape_(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    BasicTensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend BasicTensor operator+(BasicTensor a, const BasicTensor& b) { return a += b; }
    friend BasicTensor operator-(BasicTensor a, const BasicTensor& b) { return a -= b; }
    friend BasicTensor operator*(BasicTensor a, T s) { return a *= s; }
    friend BasicTensor operator*(T s, BasicTensor a) { return a *= s; }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static std::size_t count_(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }
    void check_shape_(const BasicTensor& o) const {
        if (shape_ != o.shape_) throw std::invalid_argument("tensor shape mismatch");
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

template <typename T>
T dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
    T s{};
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
T norm(const BasicTensor<T>& a) {
    return std::sqrt(dot(a, a));
}

// ||a - b|| / max(||b||, eps)
template <typename T>
T rel_l2(const BasicTensor<T>& a, const BasicTensor<T>& b, T eps = T(1e-300)) {
    if (!a.same_shape(b)) throw std::invalid_argument("rel_l2: shape mismatch");
    T num{}, den{};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a[i] - b[i];
        num += d * d;
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), eps);
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    T m{};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// y += s * x
template <typename T>
void axpy(T s, const BasicTensor<T>& x, BasicTensor<T>& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("axpy: shape mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

template <typename T, typename Rng>
BasicTensor<T> random_normal(std::vector<std::size_t> shape, Rng& rng, T stddev = T(1)) {
    BasicTensor<T> out(std::move(shape));
    std::normal_distribution<T> dist(T(0), stddev);
    for (auto& v : out) v = dist(rng);
    return out;
}

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// ---------------------------------------------------------------------------
// rank-2 helpers used by the attention blocks

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes");
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    BasicTensor<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a.at(i, p);
            for (std::size_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(p, j);
        }
    }
    return c;
}

// C[m,n] = A[m,k] * B[n,k]^T
template <typename T>
BasicTensor<T> matmul_bt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
        throw std::invalid_argument("matmul_bt: incompatible shapes");
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    BasicTensor<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T s{};
            for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(j, p);
            c.at(i, j) = s;
        }
    }
    return c;
}

// C[k,n] = A[m,k]^T * B[m,n]
template <typename T>
BasicTensor<T> matmul_at(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0]) {
        throw std::invalid_argument("matmul_at: incompatible shapes");
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    BasicTensor<T> c({k, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a.at(i, p);
            for (std::size_t j = 0; j < n; ++j) c.at(p, j) += av * b.at(i, j);
        }
    }
    return c;
}

// row-wise softmax of a rank-2 tensor
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& s) {
    if (s.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 required");
    BasicTensor<T> out = s;
    const std::size_t m = s.shape()[0], n = s.shape()[1];
    for (std::size_t i = 0; i < m; ++i) {
        T mx = out.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, out.at(i, j));
        T sum{};
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) = std::exp(out.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return out;
}

}  // namespace scoredist
