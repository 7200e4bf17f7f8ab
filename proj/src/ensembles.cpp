#include "tdaens/ensembles.hpp"

#include <algorithm>
#include <tuple>

#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

namespace {

constexpr std::uint64_t kTagProjection = 0x70726f6aULL;
constexpr std::uint64_t kTagMask = 0x6d61736bULL;
constexpr std::uint64_t kTagAdapter = 0x6c6f7261ULL;
constexpr std::uint64_t kTagFineTune = 0x66696e65ULL;

double model_dropout_rate(const ModelSpec& spec) {
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::Dropout) return l.dropout_rate;
  return 0.0;
}

std::vector<const TrainedMember*> sorted_members(std::span<const TrainedMember> members, std::size_t I) {
  if (members.size() != I)
    throw ConfigError("ensemble expects I = " + std::to_string(I) + " members, got " + std::to_string(members.size()));
  std::vector<const TrainedMember*> out;
  for (const auto& m : members) out.push_back(&m);
  std::stable_sort(out.begin(), out.end(),
                   [](const TrainedMember* a, const TrainedMember* b) { return a->member_index < b->member_index; });
  return out;
}

UnitResult full_unit(const ModelView& view, const UnitKey& key, const Dataset& train, const Dataset& test,
                     const EnsembleConfig& cfg, std::uint64_t projection_seed, CostLedger* ledger) {
  UnitResult u;
  u.key = key;
  if (cfg.method == Method::Trak) {
    const FeaturePack pack = build_feature_pack(view, train, test, cfg.trak, projection_seed, cfg.jobs, ledger);
    u.q = pack.Q;
    u.term = trak_term(pack);
  } else {
    u.scores = attribute_single(view, train, test, cfg, projection_seed, ledger);
  }
  return u;
}

DropoutMask unit_mask(const ModelSpec& spec, const EnsembleConfig& cfg, std::size_t member, std::size_t pass) {
  const auto widths = spec.dropout_widths();
  if (cfg.identity_masks) return identity_mask(widths);
  return sample_mask(unit_mask_seed(cfg.seed, member), pass, cfg.mask_rate.value_or(model_dropout_rate(spec)), widths);
}

EnsembleRun finish(std::vector<UnitResult> units, const EnsembleConfig& cfg, CostLedger ledger) {
  EnsembleRun run;
  run.units = units.size();
  run.attribution = aggregate_units(std::move(units), cfg.method);
  run.ledger = std::move(ledger);
  return run;
}

}  // namespace

void EnsembleConfig::validate(const ModelSpec& spec) const {
  if (I < 1) throw ConfigError("ensemble.I must be >= 1");
  if (D < 1) throw ConfigError("ensemble.D must be >= 1");
  if (L < 1) throw ConfigError("ensemble.L must be >= 1");
  if (strategy == Strategy::DropoutForwardOnly && method != Method::Trak)
    throw ConfigError("strategy dropout_forward_only requires method trak, got " + to_string(method));
  const bool masked = strategy == Strategy::Dropout || strategy == Strategy::DropoutForwardOnly ||
                      (strategy == Strategy::Checkpoints && D > 1);
  if (masked && D > 1 && !identity_masks && !spec.has_dropout())
    throw ConfigError("D > 1 needs a model with dropout layers");
  if (mask_rate && !(*mask_rate >= 0 && *mask_rate < 1)) throw ConfigError("ensemble.mask_rate must be in [0, 1)");
  if (strategy == Strategy::Checkpoints && checkpoint_epochs.empty())
    throw ConfigError("strategy checkpoints needs ensemble.checkpoint_epochs");
  if (strategy == Strategy::Lora) {
    try {
      const auto targets = resolve_lora_targets(spec, lora_targets);
      if (targets.empty()) throw ConfigError("LoRA strategy needs at least one adapter target");
    } catch (const NameError& e) {
      throw ConfigError(std::string("LoRA strategy needs adapter-capable layers: ") + e.what());
    }
    if (lora_grad_space == GradSpace::None) throw ConfigError("LoRA gradient space must be adapter or full");
  }
  if (method == Method::Trak && trak.projection.dim == 0) throw ConfigError("trak.proj_dim must be >= 1");
  if (influence.damping < 0) throw ConfigError("influence.damping must be >= 0");
  lora_train.validate();
}

std::uint64_t unit_projection_seed(std::uint64_t run_seed, std::size_t member, std::size_t pass) {
  return hash_key({run_seed, kTagProjection, member, pass});
}

std::uint64_t unit_mask_seed(std::uint64_t run_seed, std::size_t member) {
  return hash_key({run_seed, kTagMask, member});
}

std::uint64_t unit_adapter_seed(std::uint64_t run_seed, std::size_t member, std::size_t pass) {
  return hash_key({run_seed, kTagAdapter, member, pass});
}

AttributionMatrix aggregate_average(std::span<const AttributionMatrix> matrices) {
  if (matrices.empty()) throw ArgumentError("nothing to aggregate");
  AttributionMatrix out;
  out.method = matrices[0].method;
  out.scores = Tensor2(matrices[0].scores.rows, matrices[0].scores.cols);
  for (const auto& m : matrices) {
    if (m.scores.rows != out.scores.rows || m.scores.cols != out.scores.cols)
      throw ShapeError("attribution matrices differ in shape");
    if (m.method != out.method) throw ArgumentError("attribution matrices come from different methods");
    for (std::size_t i = 0; i < m.scores.size(); ++i) out.scores.data[i] += m.scores.data[i];
    for (const auto& [k, v] : m.flags) out.flags[k] += v;
  }
  const double inv = 1.0 / static_cast<double>(matrices.size());
  for (double& v : out.scores.data) v *= inv;
  return out;
}

AttributionMatrix aggregate_units(std::vector<UnitResult> units, Method method, std::size_t max_pass) {
  std::stable_sort(units.begin(), units.end(), [](const UnitResult& a, const UnitResult& b) { return a.key < b.key; });
  if (method == Method::Trak) {
    std::vector<std::vector<double>> qs;
    std::vector<Tensor2> terms;
    for (auto& u : units) {
      if (u.key.pass > max_pass) continue;
      if (!u.q.empty()) qs.push_back(std::move(u.q));
      if (u.term) terms.push_back(std::move(*u.term));
    }
    return trak_combine(qs, terms);
  }
  std::vector<AttributionMatrix> mats;
  for (auto& u : units)
    if (u.key.pass <= max_pass && u.scores) mats.push_back(std::move(*u.scores));
  return aggregate_average(mats);
}

AttributionMatrix attribute_single(const ModelView& view, const Dataset& train, const Dataset& test,
                                   const EnsembleConfig& cfg, std::uint64_t projection_seed, CostLedger* ledger) {
  switch (cfg.method) {
    case Method::Trak:
      return trak_single(build_feature_pack(view, train, test, cfg.trak, projection_seed, cfg.jobs, ledger));
    case Method::InfluenceCg: return influence_cg(view, train, test, cfg.influence, cfg.jobs, ledger);
    case Method::GradDot: return grad_dot(view, train, test, cfg.output_fn, cfg.jobs, ledger);
    case Method::GradCos: return grad_cos(view, train, test, cfg.output_fn, cfg.jobs, ledger);
  }
  throw ConfigError("unknown method");
}

std::vector<UnitResult> compute_units(const ModelSpec& spec, std::span<const TrainedMember> members,
                                      const Dataset& train, const Dataset& test, const EnsembleConfig& cfg,
                                      CostLedger* ledger) {
  cfg.validate(spec);
  const auto ms = sorted_members(members, cfg.I);
  std::vector<UnitResult> units;
  for (const TrainedMember* m : ms) {
    const std::size_t i = m->member_index;
    switch (cfg.strategy) {
      case Strategy::Naive: {
        const ModelView view{&spec, &m->params};
        units.push_back(full_unit(view, {i, 0, 1}, train, test, cfg, unit_projection_seed(cfg.seed, i, 1), ledger));
        break;
      }
      case Strategy::Dropout:
        for (std::size_t d = 1; d <= cfg.D; ++d) {
          const DropoutMask mask = unit_mask(spec, cfg, i, d);
          const ModelView view{&spec, &m->params, &mask};
          units.push_back(full_unit(view, {i, 0, d}, train, test, cfg, unit_projection_seed(cfg.seed, i, d), ledger));
        }
        break;
      case Strategy::DropoutForwardOnly: {
        // Gradient features once per member on the unmasked model; Q from
        // every masked pass.
        const ModelView plain{&spec, &m->params};
        const std::uint64_t ps = unit_projection_seed(cfg.seed, i, 1);
        FeaturePack pack;
        pack.projection_seed = ps;
        std::tie(pack.Phi, pack.phi_test) =
            project_train_test(plain, train, test, cfg.trak.output_fn, cfg.trak.projection, ps, cfg.jobs, ledger);
        pack.proj_dim = pack.Phi.cols;
        pack.lambda = cfg.trak.lambda ? *cfg.trak.lambda : default_lambda(pack.Phi, cfg.trak.lambda_rel);
        for (std::size_t d = 1; d <= cfg.D; ++d) {
          const DropoutMask mask = unit_mask(spec, cfg, i, d);
          const ModelView view{&spec, &m->params, &mask};
          UnitResult u;
          u.key = {i, 0, d};
          u.q = compute_q(view, train, cfg.jobs, ledger);
          if (d == 1) u.term = trak_term(pack);
          units.push_back(std::move(u));
        }
        break;
      }
      case Strategy::Checkpoints:
        for (std::size_t e : cfg.checkpoint_epochs) {
          const auto it = m->checkpoints.find(e);
          if (it == m->checkpoints.end())
            throw ConfigError("member " + std::to_string(i) + " has no checkpoint for epoch " + std::to_string(e));
          for (std::size_t d = 1; d <= cfg.D; ++d) {
            std::optional<DropoutMask> mask;
            if (cfg.D > 1) mask = unit_mask(spec, cfg, i, d);
            const ModelView view{&spec, &it->second, mask ? &*mask : nullptr};
            units.push_back(
                full_unit(view, {i, e, d}, train, test, cfg, unit_projection_seed(cfg.seed, i, d), ledger));
          }
        }
        break;
      case Strategy::Lora:
        throw ConfigError("LoRA units are computed by compute_lora_units");
    }
  }
  return units;
}

EnsembleRun run_naive(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                      const Dataset& test, const EnsembleConfig& config) {
  EnsembleConfig c = config;
  c.strategy = Strategy::Naive;
  CostLedger ledger;
  auto units = compute_units(spec, members, train, test, c, &ledger);
  return finish(std::move(units), c, std::move(ledger));
}

EnsembleRun run_dropout_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                                 const Dataset& test, const EnsembleConfig& config) {
  EnsembleConfig c = config;
  c.strategy = Strategy::Dropout;
  CostLedger ledger;
  auto units = compute_units(spec, members, train, test, c, &ledger);
  return finish(std::move(units), c, std::move(ledger));
}

EnsembleRun run_dropout_forward_only(const ModelSpec& spec, std::span<const TrainedMember> members,
                                     const Dataset& train, const Dataset& test, const EnsembleConfig& config) {
  EnsembleConfig c = config;
  c.strategy = Strategy::DropoutForwardOnly;
  CostLedger ledger;
  auto units = compute_units(spec, members, train, test, c, &ledger);
  return finish(std::move(units), c, std::move(ledger));
}

EnsembleRun run_checkpoint_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members,
                                    const Dataset& train, const Dataset& test, const EnsembleConfig& config) {
  EnsembleConfig c = config;
  c.strategy = Strategy::Checkpoints;
  CostLedger ledger;
  auto units = compute_units(spec, members, train, test, c, &ledger);
  return finish(std::move(units), c, std::move(ledger));
}

std::vector<UnitResult> compute_lora_units(const ModelSpec& spec, std::span<const TrainedMember> base_members,
                                           std::span<const UnitKey> keys,
                                           std::span<const std::vector<LoraAdapter>> adapters, const Dataset& train,
                                           const Dataset& test, const EnsembleConfig& cfg, CostLedger* ledger) {
  if (keys.size() != adapters.size()) throw ArgumentError("one adapter set per unit required");
  std::vector<UnitResult> units;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const auto it = std::find_if(base_members.begin(), base_members.end(),
                                 [&](const TrainedMember& m) { return m.member_index == keys[k].member; });
    if (it == base_members.end()) throw ArgumentError("no base member " + std::to_string(keys[k].member));
    ModelView view{&spec, &it->params};
    view.adapters = adapters[k];
    view.space = cfg.lora_grad_space;
    units.push_back(full_unit(view, keys[k], train, test, cfg,
                              unit_projection_seed(cfg.seed, keys[k].member, keys[k].pass), ledger));
  }
  return units;
}

EnsembleRun run_lora_ensemble(const ModelSpec& spec, std::span<const TrainedMember> base_members,
                              const Dataset& train, const Dataset& test, const EnsembleConfig& config) {
  EnsembleConfig c = config;
  c.strategy = Strategy::Lora;
  c.validate(spec);
  const auto ms = sorted_members(base_members, c.I);
  const auto targets = resolve_lora_targets(spec, c.lora_targets);
  CostLedger ledger;
  std::vector<UnitKey> keys;
  std::vector<std::vector<LoraAdapter>> adapters;
  for (const TrainedMember* m : ms)
    for (std::size_t l = 1; l <= c.L; ++l) {
      const std::uint64_t s = unit_adapter_seed(c.seed, m->member_index, l);
      auto fresh = attach_lora(spec, m->params, targets, c.lora_rank, c.lora_alpha, s, c.lora_bias);
      auto ft = fine_tune_lora(spec, m->params, std::move(fresh), train, hash_key({s, kTagFineTune}), c.lora_train,
                               &ledger);
      keys.push_back({m->member_index, 0, l});
      adapters.push_back(std::move(ft.adapters));
    }
  auto units = compute_lora_units(spec, base_members, keys, adapters, train, test, c, &ledger);
  EnsembleRun run = finish(std::move(units), c, std::move(ledger));
  run.adapters = std::move(adapters);
  return run;
}

EnsembleRun run_ensemble(const ModelSpec& spec, std::span<const TrainedMember> members, const Dataset& train,
                         const Dataset& test, const EnsembleConfig& config) {
  switch (config.strategy) {
    case Strategy::Naive: return run_naive(spec, members, train, test, config);
    case Strategy::Dropout: return run_dropout_ensemble(spec, members, train, test, config);
    case Strategy::DropoutForwardOnly: return run_dropout_forward_only(spec, members, train, test, config);
    case Strategy::Lora: return run_lora_ensemble(spec, members, train, test, config);
    case Strategy::Checkpoints: return run_checkpoint_ensemble(spec, members, train, test, config);
  }
  throw ConfigError("unknown strategy");
}

}  // namespace tdaens
