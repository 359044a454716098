// SPDX-License-Identifier: Apache-2.0
#include "recseq/tensor.hpp"

#include <cmath>
#include <sstream>

namespace recseq {

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32" || s == "float32") return Dtype::f32;
    if (s == "f64" || s == "float64") return Dtype::f64;
    fail(Errc::parse, "unknown dtype '" + s + "'");
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, Dtype dtype) : shape_(std::move(shape)), dtype_(dtype) {
    for (int64_t d : shape_)
        check(d >= 0, Errc::shape, "negative extent in shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(size_t(shape_numel(shape_)), 0.0);
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
    Tensor t(std::move(shape), dtype);
    for (auto& v : *t.data_) v = value;
    t.quantize_to_dtype();
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, Dtype dtype) {
    check(shape_numel(shape) == int64_t(values.size()), Errc::shape,
          "value count " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = dtype;
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    t.quantize_to_dtype();
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return from({}, {value}, dtype); }

int64_t Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    check(axis >= 0 && axis < rank(), Errc::shape,
          "axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[size_t(axis)];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    check(int(idx.size()) == rank(), Errc::shape, "index rank mismatch");
    int64_t off = 0;
    int ax = 0;
    for (int64_t i : idx) {
        check(i >= 0 && i < shape_[size_t(ax)], Errc::shape, "index out of range");
        off = off * shape_[size_t(ax)] + i;
        ++ax;
    }
    return (*data_)[size_t(off)];
}

void Tensor::quantize_to_dtype() {
    if (dtype_ == Dtype::f32 && data_)
        for (auto& v : *data_) v = double(float(v));
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.dtype_ = dtype_;
    t.data_ = data_ ? std::make_shared<std::vector<double>>(*data_) : nullptr;
    return t;
}

Tensor Tensor::astype(Dtype d) const {
    Tensor t = clone();
    t.dtype_ = d;
    t.quantize_to_dtype();
    return t;
}

// 2x2 register blocking: each pass streams two B rows into two C rows
void gemm_nn(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
    int64_t i = 0;
    for (; i + 2 <= m; i += 2) {
        double* o0 = out + i * n;
        double* o1 = o0 + n;
        const double* ar0 = a + i * k;
        const double* ar1 = ar0 + k;
        int64_t l = 0;
        for (; l + 2 <= k; l += 2) {
            const double a00 = ar0[l], a01 = ar0[l + 1];
            const double a10 = ar1[l], a11 = ar1[l + 1];
            const double* b0 = b + l * n;
            const double* b1 = b0 + n;
            for (int64_t j = 0; j < n; ++j) {
                o0[j] += a00 * b0[j] + a01 * b1[j];
                o1[j] += a10 * b0[j] + a11 * b1[j];
            }
        }
        for (; l < k; ++l) {
            const double a0 = ar0[l], a1 = ar1[l];
            const double* br = b + l * n;
            for (int64_t j = 0; j < n; ++j) {
                o0[j] += a0 * br[j];
                o1[j] += a1 * br[j];
            }
        }
    }
    for (; i < m; ++i) {
        double* o = out + i * n;
        const double* ar = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const double al = ar[l];
            const double* br = b + l * n;
            for (int64_t j = 0; j < n; ++j) o[j] += al * br[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
    // a transposed copy of b turns the dot-product loop into the axpy form
    // above with the same per-element accumulation order
    thread_local std::vector<double> scratch;
    scratch.resize(size_t(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t l = 0; l < k; ++l) scratch[size_t(l * n + j)] = b[j * k + l];
    gemm_nn(a, scratch.data(), out, m, k, n);
}

void gemm_tn(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
    int64_t l = 0;
    for (; l + 4 <= k; l += 4) {
        const double* a0 = a + l * m;
        const double* a1 = a0 + m;
        const double* a2 = a1 + m;
        const double* a3 = a2 + m;
        const double* b0 = b + l * n;
        const double* b1 = b0 + n;
        const double* b2 = b1 + n;
        const double* b3 = b2 + n;
        for (int64_t i = 0; i < m; ++i) {
            const double v0 = a0[i];
            const double v1 = a1[i];
            const double v2 = a2[i];
            const double v3 = a3[i];
            double* o = out + i * n;
            for (int64_t j = 0; j < n; ++j)
                o[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; l < k; ++l) {
        const double* ar = a + l * m;
        const double* br = b + l * n;
        for (int64_t i = 0; i < m; ++i) {
            const double ai = ar[i];
            double* o = out + i * n;
            for (int64_t j = 0; j < n; ++j) o[j] += ai * br[j];
        }
    }
}

}  // namespace recseq
