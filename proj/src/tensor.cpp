#include "gpfi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gpfi {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != numel(shape_)) {
        throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) throw ShapeError("index rank mismatch for shape " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw ShapeError("permutation rank mismatch");
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);

    // stride of input axis perm[i], walked in output order
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
    std::vector<std::size_t> walk(r);
    for (std::size_t i = 0; i < r; ++i) walk[i] = in_stride[perm[i]];

    Tensor out(out_shape);
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    const std::size_t n = out.size();
    for (std::size_t o = 0; o < n; ++o) {
        out[o] = x[src];
        for (std::size_t ax = r; ax-- > 0;) {
            if (++idx[ax] < out_shape[ax]) {
                src += walk[ax];
                break;
            }
            src -= walk[ax] * (out_shape[ax] - 1);
            idx[ax] = 0;
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace gpfi
