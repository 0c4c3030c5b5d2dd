#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2net/error.hpp"

namespace m2net {

// Dense row-major double tensor. Images and feature maps use [H, W, C]
// with the channel index fastest; convolution weights use [kh, kw, Cin, Cout].
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, double fill)
        : shape(std::move(s)), data(count(shape), fill) {}

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // [H, W, C] accessors.
    double& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
    }
    // [R, D] accessors.
    double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    std::string shape_str() const;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

bool all_finite(const Tensor& t);

// C = alpha * op(A) * op(B) + beta * C, row-major, with op(A) m-by-k.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

}  // namespace m2net
