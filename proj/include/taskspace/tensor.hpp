#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace taskspace {

/// Dense row-major array of 64-bit reals. Rank 0 (scalar), 1 and 2 are the
/// only ranks the ops need. product(shape) == data.size() always holds.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor row(std::vector<double> values);               // [n]
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    std::size_t numel() const { return data.size(); }
    bool is_scalar() const { return numel() == 1; }

    /// 2-D view: rank-1 tensors count as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;
};

}  // namespace taskspace
