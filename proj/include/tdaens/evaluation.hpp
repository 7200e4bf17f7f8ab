#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tdaens/data.hpp"
#include "tdaens/nn/graph.hpp"
#include "tdaens/tda.hpp"
#include "tdaens/training.hpp"

namespace tdaens {

struct SpearmanResult {
  double rho = 0.0;
  bool constant = false;  // an input had no variation; rho is 0
};

/// Pearson correlation of midranks.
SpearmanResult spearman_ex(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

/// Midranks (1-based, ties share the mean rank).
std::vector<double> midranks(std::span<const double> x);

/// Sum of tau over `subset`.
double g_tau(std::span<const double> tau, std::span<const std::size_t> subset);

/// Per-sample model output (mean over positions for sequences).
std::vector<double> model_outputs(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                                  OutputFnKind output_fn, std::span<const LoraAdapter> adapters = {});

struct LdsGroundTruth {
  std::vector<std::vector<std::size_t>> subsets;
  Tensor2 outputs;  // m x n_test
  double alpha = 0.5;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  OutputFnKind output_fn = OutputFnKind::Margin;
  std::string config_digest;
  std::string data_digest;

  friend bool operator==(const LdsGroundTruth&, const LdsGroundTruth&) = default;
};

/// Retrains one model per random floor(alpha * n) subset and records its
/// outputs on the test set. Subsets are drawn from (seed, j); all subset
/// models share one initialization and batch stream derived from `seed`.
LdsGroundTruth build_lds_ground_truth(const ModelSpec& spec, const Dataset& train, const Dataset& test, std::size_t m,
                                      double alpha, const TrainConfig& retrain, std::uint64_t seed,
                                      OutputFnKind output_fn = OutputFnKind::Margin, std::size_t jobs = 1);

struct LdsReport {
  std::vector<double> per_test;
  std::vector<char> constant;  // per test point: a series had no variation
  double mean = 0.0;
  std::size_t m = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
};

LdsReport lds(const AttributionMatrix& tau, const LdsGroundTruth& gt);

inline constexpr std::size_t kLooMaxTrain = 200;

/// scores[j, t] = f_S(x_t) - f_{S \ j}(x_t), every model retrained from
/// initialize_params(spec, init_seed).
AttributionMatrix loo_oracle(const ModelSpec& spec, const Dataset& train, const Dataset& test,
                             const TrainConfig& retrain, std::uint64_t init_seed,
                             OutputFnKind output_fn = OutputFnKind::Margin, std::size_t jobs = 1);

/// Mean over test points of the Spearman correlation between matching
/// columns of two attribution matrices.
double mean_column_spearman(const Tensor2& a, const Tensor2& b);

}  // namespace tdaens
