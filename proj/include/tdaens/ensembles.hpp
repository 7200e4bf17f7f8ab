#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdaens/cost.hpp"
#include "tdaens/data.hpp"
#include "tdaens/tda.hpp"
#include "tdaens/training.hpp"

namespace tdaens {

struct EnsembleConfig {
  Strategy strategy = Strategy::Naive;
  Method method = Method::Trak;
  std::size_t I = 1;
  std::size_t D = 1;
  std::size_t L = 1;
  std::vector<std::size_t> checkpoint_epochs;
  std::uint64_t seed = 0;  // run seed; every unit's mask/projection/adapter seed derives from it

  std::optional<double> mask_rate;  // defaults to the model's dropout rate
  bool identity_masks = false;      // all-ones masks; with fresh projection seeds per pass this is the
                                    // "only random projection" control

  TrakConfig trak;
  InfluenceConfig influence;
  OutputFnKind output_fn = OutputFnKind::Margin;  // grad_dot / grad_cos

  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  std::vector<std::string> lora_targets{"Wq", "Wv"};
  bool lora_bias = true;
  TrainConfig lora_train = default_lora_config();
  GradSpace lora_grad_space = GradSpace::AdapterOnly;  // Full is the experimental override

  std::size_t jobs = 1;

  /// Throws ConfigError for incompatible combinations.
  void validate(const ModelSpec& spec) const;
};

/// Identifies one attribution unit. Aggregation sums units in key order.
struct UnitKey {
  std::size_t member = 0;
  std::size_t epoch = 0;  // checkpoint epoch (Checkpoints only)
  std::size_t pass = 1;   // dropout pass d or LoRA adapter l, 1-based

  friend auto operator<=>(const UnitKey&, const UnitKey&) = default;
};

/// Per-unit output: TRAK units carry a Q vector and/or a term, other methods
/// carry scores.
struct UnitResult {
  UnitKey key;
  std::vector<double> q;
  std::optional<Tensor2> term;
  std::optional<AttributionMatrix> scores;
};

std::uint64_t unit_projection_seed(std::uint64_t run_seed, std::size_t member, std::size_t pass);
std::uint64_t unit_mask_seed(std::uint64_t run_seed, std::size_t member);
std::uint64_t unit_adapter_seed(std::uint64_t run_seed, std::size_t member, std::size_t pass);

/// Elementwise mean, summed in list order.
AttributionMatrix aggregate_average(std::span<const AttributionMatrix> matrices);

/// Aggregates unit results (sorted by key first): TRAK by trak_combine,
/// the rest by aggregate_average. `max_pass` keeps units with pass <= max_pass.
AttributionMatrix aggregate_units(std::vector<UnitResult> units, Method method,
                                  std::size_t max_pass = static_cast<std::size_t>(-1));

struct EnsembleRun {
  AttributionMatrix attribution;
  CostLedger ledger;
  std::size_t units = 0;
  std::vector<std::vector<LoraAdapter>> adapters;  // LoRA: fine-tuned adapters per unit, key order
};

/// Units for Naive (pass 1 only), Dropout, DropoutForwardOnly and
/// Checkpoints. For Dropout the units for passes 1..D do not depend on D, so
/// aggregating a prefix reproduces a smaller-D run exactly.
std::vector<UnitResult> compute_units(const ModelSpec& spec, std::span<const TrainedMember> members,
                                      const Dataset& train, const Dataset& test, const EnsembleConfig& config,
                                      CostLedger* ledger = nullptr);

EnsembleRun run_naive(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                      const Dataset& test, const EnsembleConfig& config);
EnsembleRun run_dropout_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                                 const Dataset& test, const EnsembleConfig& config);
EnsembleRun run_dropout_forward_only(const ModelSpec& spec, std::span<const TrainedMember> members,
                                     const Dataset& train, const Dataset& test, const EnsembleConfig& config);
EnsembleRun run_checkpoint_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members,
                                    const Dataset& train, const Dataset& test, const EnsembleConfig& config);

/// Fine-tunes L adapters per base member and attributes with each adapted
/// model. `finetune_data` is the set adapters are trained on (normally the
/// training set).
EnsembleRun run_lora_ensemble(const ModelSpec& spec, std::span<const TrainedMember> base_members,
                              const Dataset& train, const Dataset& test, const EnsembleConfig& config);

/// Attribution with already fine-tuned adapters: adapters[k] belongs to
/// unit keys[k].
std::vector<UnitResult> compute_lora_units(const ModelSpec& spec, std::span<const TrainedMember> base_members,
                                           std::span<const UnitKey> keys,
                                           std::span<const std::vector<LoraAdapter>> adapters, const Dataset& train,
                                           const Dataset& test, const EnsembleConfig& config,
                                           CostLedger* ledger = nullptr);

/// Dispatches on config.strategy.
EnsembleRun run_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                         const Dataset& test, const EnsembleConfig& config);

/// Attribution of one model view with the configured method.
AttributionMatrix attribute_single(const ModelView& view, const Dataset& train, const Dataset& test,
                                   const EnsembleConfig& config, std::uint64_t projection_seed,
                                   CostLedger* ledger = nullptr);

}  // namespace tdaens
