#include "tdaens/nn/lora.hpp"

#include <algorithm>

#include "tdaens/errors.hpp"

namespace tdaens {

std::size_t adapter_param_count(std::span<const LoraAdapter> adapters) {
  std::size_t n = 0;
  for (const auto& a : adapters) n += a.param_count();
  return n;
}

std::vector<double> flatten_adapters(std::span<const LoraAdapter> adapters) {
  std::vector<double> flat;
  flat.reserve(adapter_param_count(adapters));
  for (const auto& a : adapters) {
    flat.insert(flat.end(), a.A.data.begin(), a.A.data.end());
    flat.insert(flat.end(), a.B.data.begin(), a.B.data.end());
    flat.insert(flat.end(), a.bias_delta.begin(), a.bias_delta.end());
  }
  return flat;
}

void unflatten_adapters(std::span<const double> flat, std::span<LoraAdapter> adapters) {
  if (flat.size() != adapter_param_count(adapters)) throw ShapeError("adapter vector length mismatch");
  auto it = flat.begin();
  for (auto& a : adapters) {
    std::copy_n(it, a.A.size(), a.A.data.begin());
    it += static_cast<std::ptrdiff_t>(a.A.size());
    std::copy_n(it, a.B.size(), a.B.data.begin());
    it += static_cast<std::ptrdiff_t>(a.B.size());
    std::copy_n(it, a.bias_delta.size(), a.bias_delta.begin());
    it += static_cast<std::ptrdiff_t>(a.bias_delta.size());
  }
}

}  // namespace tdaens
