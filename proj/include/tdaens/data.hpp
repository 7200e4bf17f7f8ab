#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdaens/tensor.hpp"

namespace tdaens {

enum class DatasetKind { Classification, Sequence };

/// Classification: one feature row and one label per sample.
/// Sequence: one row of `seq_len` token ids per sample and `seq_len`
/// next-token targets per sample, stored contiguously.
struct Dataset {
  DatasetKind kind = DatasetKind::Classification;
  Tensor2 inputs;
  std::vector<int> targets;
  std::size_t num_classes = 0;  // classes or vocabulary size

  std::size_t size() const { return inputs.rows; }
  std::size_t targets_per_sample() const { return inputs.rows == 0 ? 0 : targets.size() / inputs.rows; }

  Tensor2 sample_input(std::size_t i) const;
  std::span<const int> sample_targets(std::size_t i) const;

  /// Rows `indices` (in the given order) as a new dataset.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Contiguous slice [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const;

  /// Checks shape consistency and label/token ranges.
  void validate() const;

  /// Hex digest of contents, embedded in artifacts produced from this data.
  std::string digest() const;
};

/// Reads IDX image/label files (magic 0x00000803 / 0x00000801, big-endian
/// dimensions). Pixels are scaled to [0, 1]; `limit` keeps a prefix.
Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::optional<std::size_t> limit = std::nullopt);

/// Gaussian blobs (unit variance) around seed-determined class centers placed
/// at distance `separation` from the origin; labels flipped uniformly to a
/// different class with probability `label_noise`.
Dataset gen_synthetic_classification(std::size_t n, std::size_t dim, std::size_t classes, double separation,
                                     double label_noise, std::uint64_t seed);

enum class SequenceGenerator { Markov, Copy };

/// Markov: order-`order` chain whose transition rows are seed-fixed sparse-ish
/// Dirichlet-like draws. Copy: target at position t is the input token at
/// t - 1 (position 0 predicts its own token).
Dataset gen_synthetic_sequences(std::size_t n, std::size_t vocab, std::size_t context_len, SequenceGenerator generator,
                                std::size_t order, std::uint64_t seed);

/// Transition matrix (vocab^order rows x vocab) used by the order-k Markov
/// generator for a given seed.
Tensor2 markov_transition_matrix(std::size_t vocab, std::size_t order, std::uint64_t seed);

}  // namespace tdaens
