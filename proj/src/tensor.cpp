#include "akd/tensor.hpp"

#include <numeric>
#include <sstream>

namespace akd {

namespace {

Index shape_product(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d < 0) throw ShapeError("tensor: negative dimension in shape");
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<Index> shape, Eigen::ArrayXd data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.size() > 2) throw ShapeError("tensor: rank > 2 is not supported");
    if (shape_product(shape_) != data_.size()) {
        std::ostringstream os;
        os << "tensor: shape " << shape_string() << " does not match buffer of size " << data_.size();
        throw ShapeError(os.str());
    }
}

Tensor Tensor::zeros(const std::vector<Index>& shape) {
    return Tensor(shape, Eigen::ArrayXd::Zero(shape_product(shape)));
}

Tensor Tensor::full(const std::vector<Index>& shape, double value) {
    return Tensor(shape, Eigen::ArrayXd::Constant(shape_product(shape), value));
}

Tensor Tensor::scalar(double value) {
    return Tensor({}, Eigen::ArrayXd::Constant(1, value));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    Eigen::ArrayXd d(static_cast<Index>(values.size()));
    Index i = 0;
    for (double v : values) d[i++] = v;
    return Tensor({static_cast<Index>(values.size())}, std::move(d));
}

Tensor Tensor::from_vector(const std::vector<double>& values) {
    Eigen::ArrayXd d(static_cast<Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) d[static_cast<Index>(i)] = values[i];
    return Tensor({static_cast<Index>(values.size())}, std::move(d));
}

Tensor Tensor::matrix(Index rows, Index cols, std::initializer_list<double> row_major) {
    if (static_cast<Index>(row_major.size()) != rows * cols)
        throw ShapeError("tensor: matrix literal size mismatch");
    Eigen::ArrayXd d(rows * cols);
    Index i = 0;
    for (double v : row_major) d[i++] = v;
    return Tensor({rows, cols}, std::move(d));
}

Tensor Tensor::from_matrix(const MatrixRM& m) {
    Eigen::ArrayXd d(m.size());
    MatMap(d.data(), m.rows(), m.cols()) = m;
    return Tensor({m.rows(), m.cols()}, std::move(d));
}

Index Tensor::rows() const {
    if (rank() == 2) return shape_[0];
    return 1;
}

Index Tensor::cols() const {
    if (rank() == 2) return shape_[1];
    if (rank() == 1) return shape_[0];
    return 1;
}

MatMap Tensor::mat() { return MatMap(data_.data(), rows(), cols()); }
ConstMatMap Tensor::mat() const { return ConstMatMap(data_.data(), rows(), cols()); }
VecMap Tensor::vec() { return VecMap(data_.data(), data_.size()); }
ConstVecMap Tensor::vec() const { return ConstVecMap(data_.data(), data_.size()); }

double& Tensor::operator()(Index r, Index c) {
    return data_[r * cols() + c];
}

double Tensor::operator()(Index r, Index c) const {
    return data_[r * cols() + c];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() requires exactly one element, got " + shape_string());
    return data_[0];
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b)) {
        std::ostringstream os;
        os << where << ": shape mismatch " << a.shape_string() << " vs " << b.shape_string();
        throw ShapeError(os.str());
    }
}

}  // namespace akd
