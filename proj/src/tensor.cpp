#include "tdaens/tensor.hpp"

#include <cmath>

#include "tdaens/errors.hpp"

namespace tdaens {

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Tensor2 t;
  t.rows = rows.size();
  t.cols = rows.size() == 0 ? 0 : rows.begin()->size();
  t.data.reserve(t.rows * t.cols);
  for (const auto& r : rows) {
    if (r.size() != t.cols) throw ShapeError("ragged initializer for Tensor2");
    t.data.insert(t.data.end(), r.begin(), r.end());
  }
  return t;
}

Tensor2 Tensor2::from_eigen(const RowMatrix& m) {
  Tensor2 t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  t.mat() = m;
  return t;
}

bool Tensor2::all_finite() const { return tdaens::all_finite(data); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace tdaens
