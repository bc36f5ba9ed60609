#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmu {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v);

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix. Zero-sized shapes are allowed so that an empty
// delay line (n == 0) has a well-formed, empty parameter group.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }

  void fill(double v);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Activation { tanh, softmax, sigmoid, relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation kind);

// y = m * v
Vector matvec(const Matrix& m, const Vector& v);
// y += m * v (no allocation)
void matvec_acc(const Matrix& m, std::span<const double> v, std::span<double> y);
// y += m^T * v
void matvec_transposed_acc(const Matrix& m, std::span<const double> v, std::span<double> y);
// m += a * b^T
void outer_acc(std::span<const double> a, std::span<const double> b, Matrix& m);
// dst += src (sizes must match).
void add_to(std::span<double> dst, std::span<const double> src);

Matrix outer(const Vector& a, const Vector& b);

Vector activate(Activation kind, const Vector& v);
void activate_inplace(Activation kind, std::span<double> v);

// Derivative of an elementwise activation expressed through its output y
// (tanh, sigmoid) or its input z (relu). Softmax is not elementwise and is
// rejected.
double activation_derivative(Activation kind, double preact, double output);

double sigmoid(double z);

// xoshiro256** seeded through splitmix64. Normal draws use the Box-Muller
// transform on 53-bit uniforms, so the stream is identical on every platform
// (unlike std::normal_distribution).
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();
  double normal(double mean, double stddev);

  // Derive an independent generator for a labelled sub-stream.
  SeededRng fork(std::uint64_t stream) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix init_kaiming(SeededRng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in);
Vector init_kaiming_vector(SeededRng& rng, std::size_t len, std::size_t fan_in);

bool all_finite(std::span<const double> values);

}  // namespace dmu
