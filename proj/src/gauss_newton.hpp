#pragma once

// Matrix-free Gauss-Newton products for the mean softmax cross-entropy of a
// recorded batch. Internal to the library.

#include <span>

#include "tdaens/nn/graph.hpp"

namespace tdaens::detail {

class GaussNewton {
 public:
  GaussNewton(const ForwardTrace& trace, double damping);

  /// out = J' H_softmax J v / rows + damping v
  void apply(std::span<const double> v, std::span<double> out) const;

 private:
  const ForwardTrace& trace_;
  Tensor2 prob_;
  double inv_rows_;
  double damping_;
};

}  // namespace tdaens::detail
