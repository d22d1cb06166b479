#include "spurmem/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "spurmem/error.hpp"

namespace spurmem {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " elements");
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> flat;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), cols}, std::move(flat));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() <= 1) return 1;
  throw DimensionError("rows() on tensor of shape " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw DimensionError("cols() on tensor of shape " + shape_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::gather_rows(std::span<const std::size_t> idx) const {
  const std::size_t c = cols();
  std::vector<double> out;
  out.reserve(idx.size() * c);
  for (auto r : idx) {
    if (r >= rows()) throw IndexError("row " + std::to_string(r) + " out of range for " + shape_string(shape_));
    auto src = row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  if (idx.empty()) return Tensor();
  return Tensor(Shape{idx.size(), c}, std::move(out));
}

}  // namespace spurmem
