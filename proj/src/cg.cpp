#include "tdaens/cg.hpp"

#include <cmath>

#include "tdaens/errors.hpp"
#include "tdaens/tensor.hpp"

namespace tdaens {

namespace {

void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace

CgResult conjugate_gradient(const LinearOperator& A, std::span<const double> b, std::size_t max_iters, double tol) {
  const std::size_t n = b.size();
  CgResult res;
  res.x.assign(n, 0.0);
  res.rhs_norm = norm2(b);
  if (res.rhs_norm == 0.0) {
    res.converged = true;
    return res;
  }
  const double target = tol * res.rhs_norm;
  std::vector<double> r(b.begin(), b.end()), p(n), Ap(n);

  // Restarting from the true residual guards the stopping test against drift
  // in the recursively updated one.
  while (true) {
    double rr = dot(r, r);
    p = r;
    while (std::sqrt(rr) > target && res.iterations < max_iters) {
      A(p, Ap);
      ++res.iterations;
      const double curv = dot(p, Ap);
      if (!(curv > 0.0))
        throw NumericError("conjugate gradients met non-positive curvature (p'Ap = " + std::to_string(curv) +
                           "); increase the damping");
      const double alpha = rr / curv;
      axpy(alpha, p, res.x);
      axpy(-alpha, Ap, r);
      const double rr_new = dot(r, r);
      const double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    A(res.x, Ap);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - Ap[i];
    res.residual_norm = norm2(r);
    if (!std::isfinite(res.residual_norm)) throw NumericError("conjugate gradients diverged");
    res.converged = res.residual_norm <= target;
    if (res.converged || res.iterations >= max_iters) return res;
  }
}

}  // namespace tdaens
