#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dunet {

// Dense N-d array of doubles, row-major. Image batches use NCHW.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_size(shape_))
      throw std::invalid_argument("Tensor: data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessors.
  double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const double& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const;

  std::string shape_str() const;

 private:
  static int64_t checked_size(const std::vector<int64_t>& shape);

  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// Thrown on incompatible tensor shapes; message names the offending axes.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// C = A(m x k) * B(k x n), row-major, accumulating into C when accumulate=true.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k,
          int64_t n, bool accumulate = false);

}  // namespace dunet
