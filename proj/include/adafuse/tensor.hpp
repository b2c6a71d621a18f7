#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "adafuse/errors.hpp"

namespace adafuse {

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover everything in
// this codebase; a scalar is shape {1}.
class Tensor {
public:
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> shp, double fill = 0.0) : shape(std::move(shp)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor row_major(std::vector<int> shp, std::vector<double> values) {
        Tensor t;
        t.shape = std::move(shp);
        t.data = std::move(values);
        if (static_cast<long long>(t.data.size()) != numel_of(t.shape))
            throw GraphError("tensor: data length does not match shape");
        return t;
    }

    long long numel() const { return numel_of(shape); }

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() == 2 ? shape[1] : 1; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    static long long numel_of(const std::vector<int>& shp) {
        long long n = 1;
        for (const int d : shp) {
            if (d <= 0) throw GraphError("tensor: non-positive dimension");
            n *= d;
        }
        return n;
    }
};

}  // namespace adafuse
