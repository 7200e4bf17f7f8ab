#include "gauss_newton.hpp"

#include <algorithm>
#include <cmath>

namespace tdaens::detail {

GaussNewton::GaussNewton(const ForwardTrace& trace, double damping)
    : trace_(trace), prob_(trace.logits().rows, trace.logits().cols), damping_(damping) {
  const Tensor2& z = trace.logits();
  for (std::size_t r = 0; r < z.rows; ++r) {
    const auto zr = z.row(r);
    const double mx = *std::max_element(zr.begin(), zr.end());
    double s = 0.0;
    for (std::size_t c = 0; c < z.cols; ++c) s += (prob_(r, c) = std::exp(zr[c] - mx));
    for (std::size_t c = 0; c < z.cols; ++c) prob_(r, c) /= s;
  }
  inv_rows_ = 1.0 / static_cast<double>(std::max<std::size_t>(1, z.rows));
}

void GaussNewton::apply(std::span<const double> v, std::span<double> out) const {
  Tensor2 t = trace_.jvp(v);
  for (std::size_t r = 0; r < t.rows; ++r) {
    const auto pr = prob_.row(r);
    auto tr = t.row(r);
    const double pt = dot(pr, tr);
    for (std::size_t c = 0; c < t.cols; ++c) tr[c] = pr[c] * (tr[c] - pt) * inv_rows_;
  }
  std::fill(out.begin(), out.end(), 0.0);
  trace_.backward(t, out);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += damping_ * v[i];
}

}  // namespace tdaens::detail
