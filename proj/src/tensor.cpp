#include "dunet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dunet {

int64_t Tensor::checked_size(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

// Row-major ikj gemm. Hot path for conv im2col; the j loop vectorizes.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k,
          int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace dunet
