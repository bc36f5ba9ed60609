#include "dmu/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dmu {

void Vector::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix payload has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows_ * cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "softmax") return Activation::softmax;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "?";
}

Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: matrix is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + " but vector has length " +
                         std::to_string(v.size()));
  }
  Vector y(m.rows());
  matvec_acc(m, v.span(), y.span());
  return y;
}

void matvec_acc(const Matrix& m, std::span<const double> v, std::span<double> y) {
  const std::size_t cols = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.span().data() + i * cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * v[j];
    y[i] += acc;
  }
}

void matvec_transposed_acc(const Matrix& m, std::span<const double> v, std::span<double> y) {
  const std::size_t cols = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const double* row = m.span().data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) y[j] += row[j] * vi;
  }
}

void outer_acc(std::span<const double> a, std::span<const double> b, Matrix& m) {
  const std::size_t cols = m.cols();
  double* out = m.span().data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    double* row = out + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += ai * b[j];
  }
}

Matrix outer(const Vector& a, const Vector& b) {
  if (a.empty() || b.empty()) throw DimensionError("outer: empty operand");
  Matrix m(a.size(), b.size());
  outer_acc(a.span(), b.span(), m);
  return m;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void activate_inplace(Activation kind, std::span<double> v) {
  switch (kind) {
    case Activation::tanh:
      for (double& x : v) x = std::tanh(x);
      break;
    case Activation::sigmoid:
      for (double& x : v) x = sigmoid(x);
      break;
    case Activation::relu:
      for (double& x : v) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::softmax: {
      if (v.empty()) return;
      const double peak = *std::max_element(v.begin(), v.end());
      double total = 0.0;
      for (double& x : v) {
        x = std::exp(x - peak);
        total += x;
      }
      for (double& x : v) x /= total;
      break;
    }
  }
}

Vector activate(Activation kind, const Vector& v) {
  if (v.empty()) throw DimensionError("activate: empty vector");
  Vector out = v;
  activate_inplace(kind, out.span());
  return out;
}

double activation_derivative(Activation kind, double preact, double output) {
  switch (kind) {
    case Activation::tanh: return 1.0 - output * output;
    case Activation::sigmoid: return output * (1.0 - output);
    case Activation::relu: return preact > 0.0 ? 1.0 : 0.0;
    case Activation::softmax: break;
  }
  throw std::logic_error("softmax has no elementwise derivative");
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t SeededRng::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("SeededRng::below: zero bound");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % bound;
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double SeededRng::normal(double mean, double stddev) { return mean + stddev * normal(); }

SeededRng SeededRng::fork(std::uint64_t stream) const {
  std::uint64_t mix = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  return SeededRng(splitmix64(mix));
}

Matrix init_kaiming(SeededRng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  if (fan_in < 1) throw std::invalid_argument("init_kaiming: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& x : m.span()) x = rng.normal(0.0, stddev);
  return m;
}

Vector init_kaiming_vector(SeededRng& rng, std::size_t len, std::size_t fan_in) {
  if (fan_in < 1) throw std::invalid_argument("init_kaiming: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Vector v(len);
  for (double& x : v.span()) x = rng.normal(0.0, stddev);
  return v;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

void add_to(std::span<double> dst, std::span<const double> src) {
  if (dst.size() != src.size()) throw DimensionError("add_to: sizes differ");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace dmu
