#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace tdaens {

/// y = A x for a symmetric positive (semi)definite operator.
using LinearOperator = std::function<void(std::span<const double> x, std::span<double> y)>;

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double residual_norm = 0.0;  // true ||A x - b||, recomputed on return
  double rhs_norm = 0.0;
  bool converged = false;
};

/// Conjugate gradients from x0 = 0. Stops once ||A x - b|| <= tol * ||b||
/// (checked on the true residual) or after max_iters operator applications
/// of the main loop. Throws NumericError when a search direction has
/// non-positive curvature.
CgResult conjugate_gradient(const LinearOperator& A, std::span<const double> b, std::size_t max_iters, double tol);

}  // namespace tdaens
