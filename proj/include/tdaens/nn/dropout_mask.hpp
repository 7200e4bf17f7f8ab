#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tdaens {

/// Per-unit keep (1) / drop (0) pattern for every Dropout layer of a model.
/// Regenerable from (member_seed, mask_index, rate), so ensembles never need
/// to store masks.
struct DropoutMask {
  std::uint64_t member_seed = 0;
  std::uint64_t mask_index = 0;
  double rate = 0.0;
  std::map<std::string, std::vector<std::uint8_t>> bits;

  /// Multiplier applied to kept units (inverted dropout).
  double keep_scale() const { return 1.0 / (1.0 - rate); }

  friend bool operator==(const DropoutMask&, const DropoutMask&) = default;
};

/// Each bit is an independent Bernoulli(1 - rate) draw keyed by
/// (member_seed, mask_index, layer name, unit index).
DropoutMask sample_mask(std::uint64_t member_seed, std::uint64_t mask_index, double rate,
                        const std::map<std::string, std::size_t>& layer_widths);

/// All-ones mask with rate 0; masked evaluation with it reproduces Eval.
DropoutMask identity_mask(const std::map<std::string, std::size_t>& layer_widths);

}  // namespace tdaens
