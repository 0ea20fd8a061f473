#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace prime {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Storage is always max-aligned so vectorised kernels take the same code path
// (and therefore the same summation order) for every allocation.
using MatrixMap = Eigen::Map<RowMatrix, Eigen::AlignedMax>;
using ConstMatrixMap = Eigen::Map<const RowMatrix, Eigen::AlignedMax>;
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense row-major f64 array. Rank-1 tensors view as a single row; higher
/// ranks view as shape[0] x (product of remaining dims).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape, const std::vector<double>& data);
    Tensor(std::vector<std::size_t> shape, Storage data);

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor from_matrix(const RowMatrix& m);
    static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double> vec() const { return {data_.begin(), data_.end()}; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    MatrixMap mat() { return MatrixMap(data_.data(), rows(), cols()); }
    ConstMatrixMap mat() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

    /// Same data, new shape; numel must match.
    Tensor reshaped(std::vector<std::size_t> shape) const;
    void fill(double v);
    bool all_finite() const noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    std::string shape_string() const;

private:
    std::vector<std::size_t> shape_;
    Storage data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape) noexcept;

} // namespace prime
