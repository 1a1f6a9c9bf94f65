#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "akd/errors.hpp"

namespace akd {

using Index = Eigen::Index;

// Row-major dense matrix; every 2-d view of a Tensor uses this layout.
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense double tensor of rank 0..2. Data is stored flat (row-major) in an
// Eigen array; mat()/vec() expose Eigen maps so callers can use Eigen
// expressions directly without copying.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<Index> shape, Eigen::ArrayXd data);

    static Tensor zeros(const std::vector<Index>& shape);
    static Tensor full(const std::vector<Index>& shape, double value);
    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor from_vector(const std::vector<double>& values);
    static Tensor matrix(Index rows, Index cols, std::initializer_list<double> row_major);
    static Tensor from_matrix(const MatrixRM& m);

    const std::vector<Index>& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index size() const { return data_.size(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Rank-2 accessors (a rank-1 tensor maps to a single row, a scalar to 1x1).
    Index rows() const;
    Index cols() const;
    MatMap mat();
    ConstMatMap mat() const;
    VecMap vec();
    ConstVecMap vec() const;

    Eigen::ArrayXd& array() { return data_; }
    const Eigen::ArrayXd& array() const { return data_; }

    double& operator[](Index i) { return data_[i]; }
    double operator[](Index i) const { return data_[i]; }
    double& operator()(Index r, Index c);
    double operator()(Index r, Index c) const;

    double item() const;  // scalar tensors only
    bool all_finite() const { return data_.isFinite().all(); }

    std::string shape_string() const;

private:
    std::vector<Index> shape_;
    Eigen::ArrayXd data_;
};

// Throws ShapeError mentioning `where` unless both shapes match.
void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace akd
