#pragma once

#include <cstddef>
#include <vector>

#include "milstm/common.hpp"

namespace milstm {

// Dense row-major n-dimensional array of doubles. Values are immutable by
// convention once handed to a Tape; no views or strides.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape);  // zero-filled
    Tensor(std::vector<size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<size_t> shape);
    static Tensor full(std::vector<size_t> shape, double v);
    static Tensor scalar(double v);                    // shape {1}
    static Tensor from_vector(std::vector<double> v);  // shape {v.size()}

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t numel() const { return data_.size(); }
    size_t extent(size_t dim) const { return shape_[dim]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // rank-2 element access
    double& at(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    double at(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
    // rank-3 element access (C,H,W)
    double& at(size_t c, size_t y, size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at(size_t c, size_t y, size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool rg) { requires_grad_ = rg; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool is_scalar() const { return numel() == 1; }
    double scalar_value() const;

    // Throws NumericError on NaN/Inf; `what` names the producing operation.
    void check_finite(const char* what) const;

    std::string shape_str() const;

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
};

size_t shape_numel(const std::vector<size_t>& shape);

}  // namespace milstm
