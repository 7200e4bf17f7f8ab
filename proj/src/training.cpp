#include "tdaens/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "gauss_newton.hpp"
#include "tdaens/cg.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/nn/graph.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

namespace {

// Stream tags; every key is hash_key({seed, tag, ...}).
constexpr std::uint64_t kTagInit = 0x1;
constexpr std::uint64_t kTagSubset = 0x2;
constexpr std::uint64_t kTagShuffle = 0x3;
constexpr std::uint64_t kTagDropout = 0x4;

struct Batch {
  Tensor2 inputs;
  std::vector<int> targets;
};

Batch gather(const Dataset& data, std::span<const std::size_t> idx) {
  Batch b{Tensor2(idx.size(), data.inputs.cols), {}};
  const std::size_t tps = data.targets_per_sample();
  b.targets.reserve(idx.size() * tps);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto src = data.inputs.row(idx[k]);
    std::copy(src.begin(), src.end(), b.inputs.row(k).begin());
    const auto t = data.sample_targets(idx[k]);
    b.targets.insert(b.targets.end(), t.begin(), t.end());
  }
  return b;
}

void emit_progress(const TrainConfig& cfg, std::size_t epoch, double loss) {
  if (cfg.progress) std::fprintf(stderr, "epoch=%zu loss=%.6f\n", epoch, loss);
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> theta, std::span<const double> grad) {
    ++t_;
    if (cfg_.optimizer == OptimizerKind::SgdMomentum) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m_[i] = cfg_.momentum * m_[i] + grad[i];
        theta[i] -= cfg_.lr * m_[i];
      }
      return;
    }
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      theta[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Loss and gradient for one minibatch; the gradient span is zeroed by the
// caller and accumulated into.
using BatchGrad = std::function<double(const Batch&, std::uint64_t train_key, std::span<double> grad)>;

/// Minibatch first-order loop shared by full-model training and adapter
/// fine-tuning. `after_epoch(k, mean_loss)` runs once per completed epoch.
void minibatch_loop(const Dataset& data, std::span<const std::size_t> indices, const TrainConfig& cfg,
                    std::uint64_t stream_seed, std::span<double> theta, const BatchGrad& batch_grad,
                    CostLedger* ledger, const std::function<void(std::size_t, double)>& after_epoch) {
  Optimizer opt(cfg, theta.size());
  std::vector<double> grad(theta.size());
  const std::size_t n = indices.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto perm = permutation(n, hash_key({stream_seed, kTagShuffle, epoch}));
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> idx(end - start);
      for (std::size_t k = start; k < end; ++k) idx[k - start] = indices[perm[k]];
      const Batch b = gather(data, idx);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      try {
        loss = batch_grad(b, hash_key({stream_seed, kTagDropout, epoch, batch_no}), grad);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string("training diverged at epoch ") + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_no) + ": " + e.what(),
                              static_cast<int>(epoch), static_cast<int>(batch_no));
      }
      if (!std::isfinite(loss) || !all_finite(grad))
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_no) + ": non-finite loss",
                              static_cast<int>(epoch), static_cast<int>(batch_no));
      if (cfg.weight_decay > 0)
        for (std::size_t i = 0; i < theta.size(); ++i) grad[i] += cfg.weight_decay * theta[i];
      opt.step(theta, grad);
      loss_sum += loss * static_cast<double>(idx.size());
      if (ledger) {
        record_pass(*ledger, Phase::Train, PassKind::Forward, idx.size());
        record_pass(*ledger, Phase::Train, PassKind::Backward, idx.size());
      }
    }
    after_epoch(epoch, n == 0 ? 0.0 : loss_sum / static_cast<double>(n));
  }
}

double objective(const ModelSpec& spec, const ParamVector& pv, const Batch& b, double wd) {
  const Tensor2 logits = forward(spec, pv, b.inputs);
  double f = evaluate_output(logits, b.targets, OutputFnKind::Loss).value;
  if (wd > 0) f += 0.5 * wd * dot(pv.data, pv.data);
  return f;
}

void newton_loop(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> indices,
                 const TrainConfig& cfg, ParamVector& pv, CostLedger* ledger,
                 const std::function<void(std::size_t, double)>& after_epoch) {
  const Batch b = gather(data, indices);
  const std::size_t n = indices.size();
  const std::size_t p = pv.size();
  const double wd = cfg.weight_decay;
  for (std::size_t it = 1; it <= cfg.epochs; ++it) {
    ForwardTrace trace(spec, pv, b.inputs, ForwardOptions{}, GradSpace::Full);
    const OutputValue ov = evaluate_output(trace.logits(), b.targets, OutputFnKind::Loss);
    std::vector<double> g = trace.backward(ov.dlogits);
    for (std::size_t i = 0; i < p; ++i) g[i] += wd * pv.data[i];
    const double f0 = ov.value + 0.5 * wd * dot(pv.data, pv.data);
    if (ledger) {
      record_pass(*ledger, Phase::Train, PassKind::Forward, n);
      record_pass(*ledger, Phase::Train, PassKind::Backward, n);
    }
    const double gnorm = norm2(g);
    if (gnorm <= cfg.newton_tol) {
      after_epoch(it, f0);
      break;
    }

    const detail::GaussNewton gn(trace, wd);
    LinearOperator H = [&](std::span<const double> v, std::span<double> out) { gn.apply(v, out); };
    const CgResult step = conjugate_gradient(H, g, cfg.newton_cg_iters, std::min(0.1, std::sqrt(gnorm)));
    const double slope = dot(g, step.x);

    ParamVector trial = pv;
    double s = 1.0;
    bool accepted = false;
    for (int k = 0; k < 40; ++k, s *= 0.5) {
      for (std::size_t i = 0; i < p; ++i) trial.data[i] = pv.data[i] - s * step.x[i];
      if (ledger) record_pass(*ledger, Phase::Train, PassKind::Forward, n);
      const double f1 = objective(spec, trial, b, wd);
      if (std::isfinite(f1) && f1 <= f0 - 1e-4 * s * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      after_epoch(it, f0);
      break;  // no further decrease is representable
    }
    pv.data.swap(trial.data);
    after_epoch(it, f0);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("training.lr must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("training.momentum must be in [0, 1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("training.beta1/beta2 must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("training.eps must be > 0");
  if (batch_size == 0) throw ConfigError("training.batch_size must be >= 1");
  if (!(subset_fraction > 0 && subset_fraction <= 1)) throw ConfigError("training.subset_fraction must be in (0, 1]");
  if (weight_decay < 0) throw ConfigError("training.weight_decay must be >= 0");
}

TrainConfig default_lora_config() {
  TrainConfig c;
  c.optimizer = OptimizerKind::Adam;
  c.lr = 1e-4;
  c.beta1 = 0.9;
  c.beta2 = 0.98;
  c.epochs = 10;
  c.subset_fraction = 0.5;
  return c;
}

std::vector<std::size_t> sample_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ArgumentError("subset fraction must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (k == n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  auto perm = permutation(n, hash_key({seed, kTagSubset}));
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

std::uint64_t member_seed(std::uint64_t run_seed, std::size_t member_index) {
  return hash_key({run_seed, 0x6d656d626572ULL, member_index});
}

ParamVector train_on_indices(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> indices,
                             const TrainConfig& config, std::uint64_t init_seed, std::uint64_t stream_seed,
                             std::map<std::size_t, ParamVector>* checkpoints, CostLedger* ledger) {
  config.validate();
  for (std::size_t i : indices)
    if (i >= data.size()) throw ArgumentError("training index out of range");
  ParamVector pv = initialize_params(spec, init_seed);
  auto wants = [&](std::size_t e) {
    return std::find(config.checkpoint_epochs.begin(), config.checkpoint_epochs.end(), e) !=
           config.checkpoint_epochs.end();
  };
  if (checkpoints && wants(0)) (*checkpoints)[0] = pv;
  if (ledger) ledger->model_training_runs += 1;
  auto after_epoch = [&](std::size_t epoch, double loss) {
    emit_progress(config, epoch, loss);
    if (checkpoints && wants(epoch)) (*checkpoints)[epoch] = pv;
  };
  if (indices.empty() || config.epochs == 0) return pv;

  if (config.optimizer == OptimizerKind::Newton) {
    newton_loop(spec, data, indices, config, pv, ledger, after_epoch);
    return pv;
  }
  BatchGrad grad_fn = [&](const Batch& b, std::uint64_t key, std::span<double> grad) {
    ForwardOptions opts;
    opts.mode = Mode::Train;
    opts.train_key = key;
    ForwardTrace trace(spec, pv, b.inputs, opts, GradSpace::Full);
    const OutputValue ov = evaluate_output(trace.logits(), b.targets, OutputFnKind::Loss);
    trace.backward(ov.dlogits, grad);
    return ov.value;
  };
  minibatch_loop(data, indices, config, stream_seed, pv.data, grad_fn, ledger, after_epoch);
  return pv;
}

TrainedMember train_member(const ModelSpec& spec, const Dataset& data, const TrainConfig& config,
                           std::size_t member_index, CostLedger* ledger) {
  if (data.size() == 0) throw ArgumentError("cannot train on an empty dataset");
  config.validate();
  TrainedMember m;
  m.member_index = member_index;
  m.seed = member_seed(config.seed, member_index);
  m.subset_indices = sample_subset(data.size(), config.subset_fraction, m.seed);
  m.params = train_on_indices(spec, data, m.subset_indices, config, hash_key({m.seed, kTagInit}), m.seed,
                              &m.checkpoints, ledger);
  return m;
}

double mean_loss(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                 std::span<const std::size_t> indices, std::span<const LoraAdapter> adapters) {
  if (indices.empty()) return 0.0;
  const Batch b = gather(data, indices);
  ForwardOptions opts;
  opts.adapters = adapters;
  return evaluate_output(forward(spec, params, b.inputs, opts), b.targets, OutputFnKind::Loss).value;
}

double accuracy(const ModelSpec& spec, const ParamVector& params, const Dataset& data,
                std::span<const LoraAdapter> adapters) {
  ForwardOptions opts;
  opts.adapters = adapters;
  const Tensor2 logits = forward(spec, params, data.inputs, opts);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    const auto arg = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    hits += arg == data.targets[r] ? 1 : 0;
  }
  return logits.rows == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(logits.rows);
}

LoraFineTune fine_tune_lora(const ModelSpec& spec, const ParamVector& base, std::vector<LoraAdapter> adapters,
                            const Dataset& data, std::uint64_t subset_seed, const TrainConfig& config,
                            CostLedger* ledger) {
  config.validate();
  if (config.optimizer == OptimizerKind::Newton) throw ConfigError("LoRA fine-tuning supports sgd and adam only");
  if (adapters.empty()) throw ArgumentError("fine_tune_lora needs at least one adapter");
  for (const auto& a : adapters) {
    const LayerSpec* l = spec.try_layer(a.target_layer);
    if (!l || l->kind != LayerKind::Linear) throw NameError("adapter target '" + a.target_layer + "' is not a Linear layer");
  }
  LoraFineTune out;
  out.subset_indices = sample_subset(data.size(), config.subset_fraction, subset_seed);
  if (ledger) ledger->lora_fine_tune_runs += 1;
  out.epoch_losses.push_back(mean_loss(spec, base, data, out.subset_indices, adapters));

  std::vector<double> theta = flatten_adapters(adapters);
  BatchGrad grad_fn = [&](const Batch& b, std::uint64_t key, std::span<double> grad) {
    unflatten_adapters(theta, adapters);
    ForwardOptions opts;
    opts.mode = Mode::Train;
    opts.train_key = key;
    opts.adapters = adapters;
    ForwardTrace trace(spec, base, b.inputs, opts, GradSpace::AdapterOnly);
    const OutputValue ov = evaluate_output(trace.logits(), b.targets, OutputFnKind::Loss);
    trace.backward(ov.dlogits, grad);
    return ov.value;
  };
  auto after_epoch = [&](std::size_t epoch, double loss) {
    emit_progress(config, epoch, loss);
    unflatten_adapters(theta, adapters);
    out.epoch_losses.push_back(mean_loss(spec, base, data, out.subset_indices, adapters));
  };
  minibatch_loop(data, out.subset_indices, config, hash_key({subset_seed, kTagShuffle}), theta, grad_fn, ledger,
                 after_epoch);
  unflatten_adapters(theta, adapters);
  out.adapters = std::move(adapters);
  return out;
}

}  // namespace tdaens
