#include "prime/tensor.hpp"

#include "prime/error.hpp"

#include <cmath>
#include <sstream>

namespace prime {

std::size_t shape_numel(const std::vector<std::size_t>& shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(std::vector<std::size_t> shape, Storage data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
        throw ShapeMismatch("data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string());
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Storage data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeMismatch("ragged initializer");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
    Tensor t = matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    t.mat() = m;
    return t;
}

std::size_t Tensor::rows() const noexcept {
    if (shape_.empty()) return data_.empty() ? 0 : 1;
    if (shape_.size() == 1) return 1;
    return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
    if (shape_.empty()) return data_.empty() ? 0 : 1;
    if (shape_.size() == 1) return shape_[0];
    return shape_[0] == 0 ? 0 : data_.size() / shape_[0];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (shape_numel(shape) != data_.size())
        throw ShapeMismatch("cannot reshape " + shape_string() + " to " +
                            std::to_string(shape_numel(shape)) + " elements");
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ')';
    return os.str();
}

} // namespace prime
