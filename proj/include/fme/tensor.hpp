#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "fme/error.hpp"

namespace fme {

// Dense shape of rank <= 4. Image maps are (batch, channel, height, width),
// token sequences (batch, tokens, dim), matrices (rows, cols).
struct Shape {
    int rank = 0;
    std::array<int, 4> d{1, 1, 1, 1};

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() > 4) throw ShapeError("Shape: rank > 4");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int e : dims) {
            if (e <= 0) throw ShapeError("Shape: non-positive extent " + std::to_string(e));
            d[i++] = e;
        }
    }

    int operator[](int i) const { return d[i]; }
    int& operator[](int i) { return d[i]; }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[i] != o.d[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '(';
        for (int i = 0; i < rank; ++i) os << (i ? "x" : "") << d[i];
        os << ')';
        return os.str();
    }
};

// Dense row-major tensor. The scalar type selects the precision path:
// float for production, double for gradient checking.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    // Optional gradient buffer, same extent as data; filled for parameters
    // after Tape::backward. Empty means absent.
    std::vector<T> grad;
    // Handle into the tape that recorded this value; -1 when untracked.
    int node = -1;

    TensorT() = default;
    explicit TensorT(const Shape& s) : shape(s), data(static_cast<size_t>(s.numel()), T(0)) {}
    TensorT(const Shape& s, T fill) : shape(s), data(static_cast<size_t>(s.numel()), fill) {}
    TensorT(const Shape& s, std::vector<T> values) : shape(s), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != s.numel())
            throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + s.str());
    }

    std::int64_t numel() const { return shape.numel(); }

    // Row-major offsets for the common ranks.
    T& at(int i) { return data[static_cast<size_t>(i)]; }
    T at(int i) const { return data[static_cast<size_t>(i)]; }
    T& at(int i, int j) { return data[static_cast<size_t>(i) * shape.d[1] + j]; }
    T at(int i, int j) const { return data[static_cast<size_t>(i) * shape.d[1] + j]; }
    T& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape.d[1] + j) * shape.d[2] + k];
    }
    T at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape.d[1] + j) * shape.d[2] + k];
    }
    T& at(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape.d[1] + j) * shape.d[2] + k) * shape.d[3] + l];
    }
    T at(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape.d[1] + j) * shape.d[2] + k) * shape.d[3] + l];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Contract check used by every kernel: non-finite output aborts with the
// name of the producing op so training bugs surface at the source.
template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    if (!all_finite(v))
        throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename T>
void require_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

}  // namespace fme
