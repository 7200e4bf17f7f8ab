#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tdaens/tensor.hpp"

namespace tdaens {

/// Low-rank update attached to one Linear layer: the adapted layer computes
/// W x + (alpha / rank) B A x + (b + bias_delta).
struct LoraAdapter {
  std::string target_layer;
  std::size_t rank = 0;
  double alpha = 0.0;
  Tensor2 A;                       // rank x in_dim
  Tensor2 B;                       // out_dim x rank
  std::vector<double> bias_delta;  // out_dim, or empty when absent

  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t param_count() const { return A.size() + B.size() + bias_delta.size(); }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Total adapter parameters; also the gradient dimension when gradients are
/// restricted to adapters.
std::size_t adapter_param_count(std::span<const LoraAdapter> adapters);

/// Adapter parameters concatenated as [A, B, bias_delta] per adapter, in list
/// order. This is the adapter-restricted gradient layout.
std::vector<double> flatten_adapters(std::span<const LoraAdapter> adapters);
void unflatten_adapters(std::span<const double> flat, std::span<LoraAdapter> adapters);

}  // namespace tdaens
