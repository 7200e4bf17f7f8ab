#include "tdaens/nn/dropout_mask.hpp"

#include "tdaens/errors.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

DropoutMask sample_mask(std::uint64_t member_seed, std::uint64_t mask_index, double rate,
                        const std::map<std::string, std::size_t>& layer_widths) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout rate must be in [0, 1)");
  DropoutMask mask{member_seed, mask_index, rate, {}};
  for (const auto& [name, width] : layer_widths) {
    const std::uint64_t layer_key = hash_key({member_seed, mask_index, hash_string(name)});
    std::vector<std::uint8_t> bits(width);
    for (std::size_t u = 0; u < width; ++u) bits[u] = uniform01(hash_key({layer_key, u})) >= rate ? 1 : 0;
    mask.bits.emplace(name, std::move(bits));
  }
  return mask;
}

DropoutMask identity_mask(const std::map<std::string, std::size_t>& layer_widths) {
  DropoutMask mask;
  for (const auto& [name, width] : layer_widths) mask.bits.emplace(name, std::vector<std::uint8_t>(width, 1));
  return mask;
}

}  // namespace tdaens
