#ifndef MEDLORD_TENSOR_HPP
#define MEDLORD_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "medlord/common.hpp"
#include "medlord/rng.hpp"

namespace medlord {

// Dense float32 tensor, row-major, last dim fastest. Volumes use dims
// {Z, Y, X} so the flat layout matches the .mvol payload (x fastest);
// network activations use {B, C, Z, Y, X}.
struct Tensor {
    std::vector<int64_t> dims;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> d) : dims(std::move(d)) {
        data.assign(static_cast<size_t>(count(dims)), 0.0f);
    }

    static int64_t count(const std::vector<int64_t>& d) {
        int64_t n = 1;
        for (int64_t v : d) n *= v;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> d) { return Tensor(std::move(d)); }

    static Tensor full(std::vector<int64_t> d, float v) {
        Tensor t(std::move(d));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int64_t> d, Rng& rng, float sd = 1.0f) {
        Tensor t(std::move(d));
        for (auto& v : t.data) v = sd * rng.normal();
        return t;
    }

    static Tensor rand(std::vector<int64_t> d, Rng& rng, float lo, float hi) {
        Tensor t(std::move(d));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return dims[i]; }
    size_t rank() const { return dims.size(); }

    float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int64_t> d) const {
        require(count(d) == numel(), ErrorKind::shape_mismatch, "reshape: element count changed");
        Tensor t;
        t.dims = std::move(d);
        t.data = data;
        return t;
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + ")";
    }
};

inline float tensor_mean(const Tensor& t) {
    double s = 0.0;
    for (float v : t.data) s += v;
    return t.numel() ? static_cast<float>(s / static_cast<double>(t.numel())) : 0.0f;
}

inline float tensor_abs_mean_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), ErrorKind::shape_mismatch, "abs_mean_diff: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::fabs(static_cast<double>(a[i]) - b[i]);
    return static_cast<float>(s / static_cast<double>(a.numel()));
}

inline float tensor_max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), ErrorKind::shape_mismatch, "max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// digest over shape + raw payload bits; stable identity for checkpoints
inline uint64_t tensor_digest(const Tensor& t, uint64_t h = 0xcbf29ce484222325ull) {
    h = fnv1a64(t.dims.data(), t.dims.size() * sizeof(int64_t), h);
    return fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
}

} // namespace medlord

#endif
