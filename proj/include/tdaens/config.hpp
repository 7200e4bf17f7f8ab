#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdaens/cost.hpp"
#include "tdaens/data.hpp"
#include "tdaens/ensembles.hpp"
#include "tdaens/models.hpp"
#include "tdaens/training.hpp"

namespace tdaens {

// Run configuration read from JSON. Parsing is strict: unknown keys and
// wrongly typed values raise ConfigError naming the field path
// (e.g. "ensemble.lora.rank"). configs/schema.json documents the same shape.

struct DatasetSection {
  std::string kind = "synthetic_classification";  // mnist | synthetic_classification | synthetic_sequences
  std::string train_images, train_labels, test_images, test_labels;  // mnist, relative to the config file
  std::size_t n_train = 200;
  std::size_t n_test = 50;
  std::size_t dim = 10;
  std::size_t classes = 2;
  double separation = 2.0;
  double label_noise = 0.1;
  std::size_t vocab = 32;
  std::size_t context_len = 16;
  std::string generator = "markov";  // markov | copy
  std::size_t order = 1;
  std::uint64_t seed = 0;
};

struct ModelSection {
  std::string arch = "mlp";  // mlp | linear | tiny_transformer
  std::vector<std::size_t> hidden{128, 64};
  double dropout = 0.1;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
};

struct LoraSection {
  std::size_t rank = 8;
  double alpha = 8.0;
  std::vector<std::string> targets{"Wq", "Wv"};
  bool bias = true;
  std::string grad_space = "adapter";  // adapter | full
  TrainConfig training = default_lora_config();
};

struct EnsembleSection {
  Strategy strategy = Strategy::Naive;
  Method method = Method::Trak;
  std::size_t I = 1;
  std::size_t D = 1;
  std::size_t L = 1;
  std::vector<std::size_t> checkpoint_epochs;
  std::optional<double> mask_rate;
  bool identity_masks = false;
  OutputFnKind output_fn = OutputFnKind::Margin;
  ProjectionKind projection = ProjectionKind::Gaussian;
  std::size_t proj_dim = 2048;
  std::optional<double> lambda;
  double lambda_rel = 1e-6;
  double damping = 1e-3;
  std::size_t cg_max_iters = 100;
  double cg_tol = 1e-6;
  LoraSection lora;
};

struct EvaluationSection {
  std::size_t m = 20;
  double alpha = 0.5;
  std::optional<std::uint64_t> seed;   // defaults to the run seed
  std::optional<TrainConfig> retrain;  // defaults to the training section
  std::size_t top_k = 5;
};

struct SweepSection {
  std::string axis;  // I | D | L
  std::vector<std::size_t> values;
};

struct RunConfig {
  std::string experiment = "run";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DatasetSection dataset;
  ModelSection model;
  TrainConfig training;
  EnsembleSection ensemble;
  EvaluationSection evaluation;
  std::optional<SweepSection> sweep;
  UnitCosts costs{1, 1, 1, 1, 1, 1};

  std::filesystem::path base_dir;  // directory of the config file; not serialized

  /// Cross-field checks (strategy/method compatibility, sizes, sweep axis).
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully defaulted configuration as JSON; parse_run_config(to_json(c)) == c.
nlohmann::json to_json(const RunConfig& c);
nlohmann::json to_json(const TrainConfig& c);

struct LoadedData {
  Dataset train;
  Dataset test;
};

LoadedData load_data(const RunConfig& c);
ModelSpec build_model(const RunConfig& c, const Dataset& train);
TrainConfig member_train_config(const RunConfig& c);
EnsembleConfig ensemble_config(const RunConfig& c);
TrainConfig retrain_config(const RunConfig& c);
std::uint64_t evaluation_seed(const RunConfig& c);

/// Digests over the sections that determine each artifact kind.
std::string training_digest(const RunConfig& c, const LoadedData& data);
std::string attribution_digest(const RunConfig& c, const LoadedData& data);
std::string ground_truth_digest(const RunConfig& c, const LoadedData& data);
std::string data_digest(const LoadedData& data);

}  // namespace tdaens
