#include "tdaens/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdaens/errors.hpp"
#include "tdaens/parallel.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

std::vector<double> midranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = mid;
    i = j + 1;
  }
  return r;
}

SpearmanResult spearman_ex(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman inputs differ in length");
  if (x.size() < 2) throw ArgumentError("spearman needs at least two points");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw NumericError("spearman input is not finite");
  const auto rx = midranks(x), ry = midranks(y);
  const double mean = 0.5 * static_cast<double>(x.size() + 1);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = rx[i] - mean, b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), false};
}

double spearman(std::span<const double> x, std::span<const double> y) { return spearman_ex(x, y).rho; }

double g_tau(std::span<const double> tau, std::span<const std::size_t> subset) {
  double s = 0.0;
  for (std::size_t i : subset) {
    if (i >= tau.size()) throw ArgumentError("subset index " + std::to_string(i) + " out of range");
    s += tau[i];
  }
  return s;
}

std::vector<double> model_outputs(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                                  OutputFnKind output_fn, std::span<const LoraAdapter> adapters) {
  ForwardOptions opts;
  opts.adapters = adapters;
  const Tensor2 logits = forward(spec, params, data.inputs, opts);
  const std::size_t tps = data.targets_per_sample();
  std::vector<double> out(data.size());
  Tensor2 rows(tps, logits.cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::copy_n(logits.row(i * tps).begin(), tps * logits.cols, rows.data.begin());
    out[i] = evaluate_output(rows, data.sample_targets(i), output_fn).value;
  }
  return out;
}

LdsGroundTruth build_lds_ground_truth(const ModelSpec& spec, const Dataset& train, const Dataset& test, std::size_t m,
                                      double alpha, const TrainConfig& retrain, std::uint64_t seed,
                                      OutputFnKind output_fn, std::size_t jobs) {
  if (m < 2) throw ConfigError("LDS ground truth needs m >= 2");
  LdsGroundTruth gt;
  gt.alpha = alpha;
  gt.m = m;
  gt.seed = seed;
  gt.output_fn = output_fn;
  gt.subsets.resize(m);
  gt.outputs = Tensor2(m, test.size());
  for (std::size_t j = 0; j < m; ++j) gt.subsets[j] = sample_subset(train.size(), alpha, hash_key({seed, 0x4c4453ULL, 3, j}));
  // Every subset model starts from the same initialization and batch stream,
  // so the outputs differ only through the subset.
  const std::uint64_t init_seed = hash_key({seed, 0x4c4453ULL, 1}), stream_seed = hash_key({seed, 0x4c4453ULL, 2});
  parallel_for(m, jobs, [&](std::size_t j) {
    try {
      const ParamVector pv = train_on_indices(spec, train, gt.subsets[j], retrain, init_seed, stream_seed);
      const auto f = model_outputs(spec, pv, test, output_fn);
      std::copy(f.begin(), f.end(), gt.outputs.row(j).begin());
    } catch (const DivergenceError& e) {
      throw DivergenceError("ground-truth subset " + std::to_string(j) + ": " + e.what(), e.epoch(), e.batch());
    }
  });
  return gt;
}

LdsReport lds(const AttributionMatrix& tau, const LdsGroundTruth& gt) {
  const std::size_t nte = gt.outputs.cols;
  if (tau.scores.cols != nte) throw ShapeError("attribution and ground truth disagree on n_test");
  if (gt.outputs.rows != gt.subsets.size()) throw ShapeError("ground truth outputs do not match its subsets");
  LdsReport r;
  r.m = gt.m;
  r.alpha = gt.alpha;
  r.seed = gt.seed;
  r.per_test.resize(nte);
  r.constant.resize(nte);
  const std::size_t m = gt.subsets.size();
  std::vector<double> col(tau.scores.rows), pred(m), truth(m);
  for (std::size_t t = 0; t < nte; ++t) {
    for (std::size_t j = 0; j < tau.scores.rows; ++j) col[j] = tau.scores(j, t);
    for (std::size_t s = 0; s < m; ++s) {
      pred[s] = g_tau(col, gt.subsets[s]);
      truth[s] = gt.outputs(s, t);
    }
    const auto sr = spearman_ex(truth, pred);
    r.per_test[t] = sr.rho;
    r.constant[t] = sr.constant ? 1 : 0;
  }
  double s = 0.0;
  for (double v : r.per_test) s += v;
  r.mean = nte ? s / static_cast<double>(nte) : 0.0;
  return r;
}

AttributionMatrix loo_oracle(const ModelSpec& spec, const Dataset& train, const Dataset& test,
                             const TrainConfig& retrain, std::uint64_t init_seed, OutputFnKind output_fn,
                             std::size_t jobs) {
  const std::size_t n = train.size();
  if (n > kLooMaxTrain)
    throw ArgumentError("leave-one-out oracle is limited to " + std::to_string(kLooMaxTrain) + " training samples");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const std::uint64_t stream = hash_key({init_seed, 0x4c4f4fULL});
  const auto full = model_outputs(spec, train_on_indices(spec, train, all, retrain, init_seed, stream), test, output_fn);
  AttributionMatrix out;
  out.scores = Tensor2(n, test.size());
  parallel_for(n, jobs, [&](std::size_t j) {
    std::vector<std::size_t> rest;
    rest.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i)
      if (i != j) rest.push_back(i);
    const auto f = model_outputs(spec, train_on_indices(spec, train, rest, retrain, init_seed, stream), test, output_fn);
    for (std::size_t t = 0; t < f.size(); ++t) out.scores(j, t) = full[t] - f[t];
  });
  return out;
}

double mean_column_spearman(const Tensor2& a, const Tensor2& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("matrices differ in shape");
  std::vector<double> x(a.rows), y(a.rows);
  double s = 0.0;
  for (std::size_t t = 0; t < a.cols; ++t) {
    for (std::size_t j = 0; j < a.rows; ++j) {
      x[j] = a(j, t);
      y[j] = b(j, t);
    }
    s += spearman(x, y);
  }
  return a.cols ? s / static_cast<double>(a.cols) : 0.0;
}

}  // namespace tdaens
