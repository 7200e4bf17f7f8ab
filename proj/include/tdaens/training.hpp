#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "tdaens/cost.hpp"
#include "tdaens/data.hpp"
#include "tdaens/nn/lora.hpp"
#include "tdaens/nn/model_spec.hpp"

namespace tdaens {

enum class OptimizerKind {
  SgdMomentum,
  Adam,
  // Full-batch Newton-CG on the Gauss-Newton matrix with Armijo backtracking.
  // Meant for convex models, where it trains to convergence.
  Newton,
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;  // Newton: maximum outer iterations
  std::uint64_t seed = 0;
  double subset_fraction = 1.0;
  std::vector<std::size_t> checkpoint_epochs;
  double weight_decay = 0.0;  // L2 coefficient: objective adds wd/2 * ||theta||^2
  double newton_tol = 1e-10;  // gradient-norm stopping threshold
  std::size_t newton_cg_iters = 200;
  bool progress = false;  // "epoch=<k> loss=<v>" lines on stderr

  void validate() const;
};

/// Defaults for LoRA fine-tuning: Adam(1e-4, 0.9, 0.98), 10 epochs, half
/// subsets.
TrainConfig default_lora_config();

struct TrainedMember {
  std::size_t member_index = 0;
  ParamVector params;
  std::vector<std::size_t> subset_indices;
  std::uint64_t seed = 0;
  std::map<std::size_t, ParamVector> checkpoints;
};

/// floor(fraction * n) distinct indices drawn without replacement, sorted.
std::vector<std::size_t> sample_subset(std::size_t n, double fraction, std::uint64_t seed);

/// Seed owned by member `member_index` of a run seeded with `run_seed`.
std::uint64_t member_seed(std::uint64_t run_seed, std::size_t member_index);

/// Trains one ensemble member from its own seed on its own subset.
TrainedMember train_member(const ModelSpec& spec, const Dataset& data, const TrainConfig& config,
                           std::size_t member_index, CostLedger* ledger = nullptr);

/// Trains from initialize_params(spec, init_seed) on exactly `indices`.
/// `stream_seed` drives shuffling and training-mode dropout. An empty index
/// list returns the initialization.
ParamVector train_on_indices(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> indices,
                             const TrainConfig& config, std::uint64_t init_seed, std::uint64_t stream_seed,
                             std::map<std::size_t, ParamVector>* checkpoints = nullptr, CostLedger* ledger = nullptr);

/// Mean cross-entropy over the given samples in Eval mode.
double mean_loss(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                 std::span<const std::size_t> indices, std::span<const LoraAdapter> adapters = {});

/// Fraction of output rows whose argmax equals the target.
double accuracy(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                std::span<const LoraAdapter> adapters = {});

struct LoraFineTune {
  std::vector<LoraAdapter> adapters;
  std::vector<std::size_t> subset_indices;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// Trains only the adapters (A, B, bias_delta) on a subset of
/// floor(config.subset_fraction * n) samples drawn from `subset_seed`;
/// `base` is never written.
LoraFineTune fine_tune_lora(const ModelSpec& spec, const ParamVector& base, std::vector<LoraAdapter> adapters,
                            const Dataset& data, std::uint64_t subset_seed, const TrainConfig& config,
                            CostLedger* ledger = nullptr);

}  // namespace tdaens
