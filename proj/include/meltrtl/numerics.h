#pragma once

// Dense linear algebra and scalar nonlinearities shared by the language model
// and the probes. Everything is 64-bit and row-major.

#include <cstddef>
#include <span>
#include <vector>

namespace meltrtl {

using Vec = std::vector<double>;

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Mat identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }

  Mat transposed() const;

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Mat matmul(const Mat& a, const Mat& b);
Vec matvec(const Mat& a, std::span<const double> x);

Vec softmax(std::span<const double> v);
double sigmoid(double x);
double relu(double x);
Vec layernorm(std::span<const double> v, std::span<const double> gain,
              std::span<const double> bias, double eps = 1e-5);
double rbf_kernel(std::span<const double> a, std::span<const double> b, double gamma);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
double squared_distance(std::span<const double> a, std::span<const double> b);
// Returns v / ||v||. Throws kData when ||v|| == 0.
Vec normalized(std::span<const double> v);
bool all_finite(std::span<const double> v);

namespace kernels {

// c[m x n] (+)= a[m x k] * b[k x n], all row-major.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);
// c[m x n] (+)= a[m x k] * b^T where b is [n x k].
void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// c[k x n] (+)= a^T * b where a is [m x k], b is [m x n].
void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

}  // namespace kernels

}  // namespace meltrtl
