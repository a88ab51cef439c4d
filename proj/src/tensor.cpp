#include "milstm/tensor.hpp"

#include <cmath>
#include <sstream>

namespace milstm {

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive");
        n *= e;
    }
    return n;
}

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str());
    }
}

Tensor Tensor::zeros(std::vector<size_t> shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    return Tensor({1}, {v});
}

Tensor Tensor::from_vector(std::vector<double> v) {
    size_t n = v.size();
    return Tensor({n}, std::move(v));
}

double Tensor::scalar_value() const {
    if (numel() != 1) {
        throw ContractError("expected scalar tensor, got shape " + shape_str());
    }
    return data_[0];
}

void Tensor::check_finite(const char* what) const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + what);
        }
    }
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

}  // namespace milstm
