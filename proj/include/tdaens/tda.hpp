#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tdaens/cost.hpp"
#include "tdaens/data.hpp"
#include "tdaens/nn/graph.hpp"

namespace tdaens {

/// One attribution unit's model: base parameters plus an optional dropout
/// mask (masked evaluation) and optional adapters.
struct ModelView {
  const ModelSpec* spec = nullptr;
  const ParamVector* params = nullptr;
  const DropoutMask* mask = nullptr;
  std::span<const LoraAdapter> adapters = {};
  GradSpace space = GradSpace::Full;

  ForwardOptions options() const;
  std::size_t grad_dim() const;
};

enum class ProjectionKind {
  Gaussian,  // entries N(0, 1/k), regenerated from the seed block by block
  Identity,  // test hook: raw gradients, k = gradient dimension (dim is ignored)
};

struct ProjectionConfig {
  ProjectionKind kind = ProjectionKind::Gaussian;
  std::size_t dim = 2048;
};

/// Per-unit TRAK intermediates.
struct FeaturePack {
  std::uint64_t member_id = 0;
  std::uint64_t unit_index = 0;
  std::uint64_t projection_seed = 0;
  std::size_t proj_dim = 0;
  Tensor2 Phi;            // n_train x k
  Tensor2 phi_test;       // n_test x k
  std::vector<double> Q;  // n_train, entries 1 - p_correct
  double lambda = 0.0;

  friend bool operator==(const FeaturePack&, const FeaturePack&) = default;
};

struct AttributionMatrix {
  Tensor2 scores;  // n_train x n_test
  Method method = Method::Trak;
  std::string config_digest;
  std::string data_digest;  // digest of the train/test data it was computed on
  std::map<std::string, std::uint64_t> flags;  // warnings, e.g. "cg_not_converged"

  friend bool operator==(const AttributionMatrix&, const AttributionMatrix&) = default;
};

struct TrakConfig {
  OutputFnKind output_fn = OutputFnKind::Margin;
  ProjectionConfig projection;
  std::optional<double> lambda;  // absolute; when unset lambda_rel * tr(Phi'Phi) / k
  double lambda_rel = 1e-6;
};

struct InfluenceConfig {
  OutputFnKind output_fn = OutputFnKind::Margin;
  double damping = 1e-3;
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

/// Per-sample gradients of `output_fn`, one row per sample. Counts one
/// serving backward pass per row.
Tensor2 per_sample_grads(const ModelView& model, const Dataset& data, OutputFnKind output_fn, std::size_t jobs = 1,
                         CostLedger* ledger = nullptr);

/// Entry (i, c) of the Gaussian projection for `seed`.
double projection_entry(std::uint64_t seed, std::size_t i, std::size_t c, std::size_t k);

/// Projected per-sample gradients (rows x k). Gradients are produced in
/// sample chunks sized by a fixed memory budget and the projection in
/// 64-column blocks, so P is never held whole.
Tensor2 project_grads(const ModelView& model, const Dataset& data, OutputFnKind output_fn,
                      const ProjectionConfig& proj, std::uint64_t projection_seed, std::size_t jobs = 1,
                      CostLedger* ledger = nullptr);

/// Train and test features under one projection, generated once.
std::pair<Tensor2, Tensor2> project_train_test(const ModelView& model, const Dataset& train, const Dataset& test,
                                               OutputFnKind output_fn, const ProjectionConfig& proj,
                                               std::uint64_t projection_seed, std::size_t jobs = 1,
                                               CostLedger* ledger = nullptr);

/// 1 - p(correct) per sample (averaged over positions for sequences), from
/// forward passes only.
std::vector<double> compute_q(const ModelView& model, const Dataset& data, std::size_t jobs = 1,
                              CostLedger* ledger = nullptr);

double default_lambda(const Tensor2& Phi, double lambda_rel);

FeaturePack build_feature_pack(const ModelView& model, const Dataset& train, const Dataset& test,
                               const TrakConfig& config, std::uint64_t projection_seed, std::size_t jobs = 1,
                               CostLedger* ledger = nullptr);

/// phi (Phi'Phi + lambda I)^-1 Phi', transposed to n_train x n_test. Throws
/// NumericError when the regularized Gram matrix is not positive definite.
Tensor2 trak_term(const FeaturePack& pack);

/// (mean of q_vectors) .* (mean of terms), row-wise. Sums run in the given
/// order.
AttributionMatrix trak_combine(std::span<const std::vector<double>> q_vectors, std::span<const Tensor2> terms);

AttributionMatrix trak_aggregate(std::span<const FeaturePack> packs);
AttributionMatrix trak_single(const FeaturePack& pack);

/// Scores g(x_j)' (H + damping I)^-1 g(x_t), H the Gauss-Newton matrix of the
/// mean training cross-entropy. Counts one serve_hvp per training sample per
/// operator application. Non-convergence is reported in flags.
AttributionMatrix influence_cg(const ModelView& model, const Dataset& train, const Dataset& test,
                               const InfluenceConfig& config, std::size_t jobs = 1, CostLedger* ledger = nullptr);

AttributionMatrix grad_dot(const ModelView& model, const Dataset& train, const Dataset& test, OutputFnKind output_fn,
                           std::size_t jobs = 1, CostLedger* ledger = nullptr);
AttributionMatrix grad_cos(const ModelView& model, const Dataset& train, const Dataset& test, OutputFnKind output_fn,
                           std::size_t jobs = 1, CostLedger* ledger = nullptr);

/// Score kernels on explicit gradient rows.
AttributionMatrix grad_dot_from(const Tensor2& g_train, const Tensor2& g_test);
AttributionMatrix grad_cos_from(const Tensor2& g_train, const Tensor2& g_test);

}  // namespace tdaens
