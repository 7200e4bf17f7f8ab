#include "tdaens/cost.hpp"

#include <iomanip>
#include <sstream>

#include "tdaens/errors.hpp"

namespace tdaens {

void CostLedger::merge(const CostLedger& other) {
  train_forward += other.train_forward;
  train_backward += other.train_backward;
  serve_forward += other.serve_forward;
  serve_backward += other.serve_backward;
  serve_hvp += other.serve_hvp;
  model_training_runs += other.model_training_runs;
  lora_fine_tune_runs += other.lora_fine_tune_runs;
  for (const auto& [k, v] : other.wall_clock) wall_clock[k] += v;
}

void record_pass(CostLedger& ledger, Phase phase, PassKind kind, std::uint64_t n_samples) {
  auto& counter = phase == Phase::Train ? (kind == PassKind::Forward ? ledger.train_forward : ledger.train_backward)
                                        : (kind == PassKind::Forward ? ledger.serve_forward : ledger.serve_backward);
  counter += n_samples;
}

nlohmann::json to_json(const CostLedger& l) {
  nlohmann::json j{{"train_forward", l.train_forward},
                   {"train_backward", l.train_backward},
                   {"serve_forward", l.serve_forward},
                   {"serve_backward", l.serve_backward},
                   {"serve_hvp", l.serve_hvp},
                   {"model_training_runs", l.model_training_runs},
                   {"lora_fine_tune_runs", l.lora_fine_tune_runs}};
  if (!l.wall_clock.empty()) j["wall_clock_seconds"] = l.wall_clock;
  return j;
}

CostLedger ledger_from_json(const nlohmann::json& j) {
  CostLedger l;
  l.train_forward = j.value("train_forward", std::uint64_t{0});
  l.train_backward = j.value("train_backward", std::uint64_t{0});
  l.serve_forward = j.value("serve_forward", std::uint64_t{0});
  l.serve_backward = j.value("serve_backward", std::uint64_t{0});
  l.serve_hvp = j.value("serve_hvp", std::uint64_t{0});
  l.model_training_runs = j.value("model_training_runs", std::uint64_t{0});
  l.lora_fine_tune_runs = j.value("lora_fine_tune_runs", std::uint64_t{0});
  if (j.contains("wall_clock_seconds")) l.wall_clock = j["wall_clock_seconds"].get<std::map<std::string, double>>();
  return l;
}

std::string format_table(const CostLedger& l) {
  std::ostringstream os;
  auto row = [&](const std::string& name, const std::string& value) {
    os << std::left << std::setw(22) << name << std::right << std::setw(16) << value << "\n";
  };
  row("counter", "value");
  row("train_forward", std::to_string(l.train_forward));
  row("train_backward", std::to_string(l.train_backward));
  row("serve_forward", std::to_string(l.serve_forward));
  row("serve_backward", std::to_string(l.serve_backward));
  row("serve_hvp", std::to_string(l.serve_hvp));
  row("model_training_runs", std::to_string(l.model_training_runs));
  row("lora_fine_tune_runs", std::to_string(l.lora_fine_tune_runs));
  for (const auto& [k, v] : l.wall_clock) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << v;
    row("seconds." + k, s.str());
  }
  return os.str();
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Naive: return "naive";
    case Strategy::Dropout: return "dropout";
    case Strategy::DropoutForwardOnly: return "dropout_forward_only";
    case Strategy::Lora: return "lora";
    case Strategy::Checkpoints: return "checkpoints";
  }
  return "?";
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Trak: return "trak";
    case Method::InfluenceCg: return "influence_cg";
    case Method::GradDot: return "grad_dot";
    case Method::GradCos: return "grad_cos";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  for (auto v : {Strategy::Naive, Strategy::Dropout, Strategy::DropoutForwardOnly, Strategy::Lora, Strategy::Checkpoints})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown strategy '" + s + "'");
}

Method parse_method(const std::string& s) {
  for (auto v : {Method::Trak, Method::InfluenceCg, Method::GradDot, Method::GradCos})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown method '" + s + "'");
}

PredictedCosts predict_costs(const CostShape& s, const UnitCosts& u) {
  for (double v : {u.train, u.train_base, u.train_lora, u.serving, u.serving_fwd_only, u.serving_lora})
    if (v < 0) throw ArgumentError("unit costs must be non-negative");
  if (s.I < 1 || s.D < 1) throw ConfigError("I and D must be at least 1");
  const double I = static_cast<double>(s.I);
  const double D = static_cast<double>(s.D);
  const double L = static_cast<double>(s.L);
  switch (s.strategy) {
    case Strategy::Naive: return {I * u.train, I * u.serving};
    case Strategy::Dropout: return {I * u.train, I * D * u.serving};
    case Strategy::DropoutForwardOnly: return {I * u.train, I * u.serving + I * (D - 1) * u.serving_fwd_only};
    case Strategy::Lora:
      if (s.L < 1) throw ConfigError("LoRA ensembles need L >= 1");
      return {I * u.train_base + I * L * u.train_lora, I * L * u.serving_lora};
    case Strategy::Checkpoints:
      if (s.checkpoints < 1) throw ConfigError("checkpoint ensembles need at least one checkpoint");
      return {I * u.train, I * static_cast<double>(s.checkpoints) * D * u.serving};
  }
  return {};
}

bool LedgerReport::passed() const {
  for (const auto& c : checks)
    if (!c.ok()) return false;
  return true;
}

std::string LedgerReport::failures() const {
  std::string out;
  for (const auto& c : checks)
    if (!c.ok())
      out += c.counter + ": expected " + std::to_string(c.expected) + ", measured " + std::to_string(c.measured) + "\n";
  return out;
}

LedgerReport verify_ledger(const CostShape& s, Method method, std::size_t n_train, std::size_t n_test,
                           const CostLedger& m, bool check_training_runs) {
  // Units that need their own per-sample gradients, and units that only
  // contribute forward passes (Q for TRAK).
  std::uint64_t grad_units = 0;
  std::uint64_t q_units = 0;
  const std::uint64_t I = s.I, D = s.D, L = s.L, C = s.checkpoints;
  switch (s.strategy) {
    case Strategy::Naive: grad_units = q_units = I; break;
    case Strategy::Dropout: grad_units = q_units = I * D; break;
    case Strategy::DropoutForwardOnly:
      if (method != Method::Trak) throw ConfigError("dropout_forward_only requires method trak");
      grad_units = I;
      q_units = I * D;
      break;
    case Strategy::Lora: grad_units = q_units = I * L; break;
    case Strategy::Checkpoints: grad_units = q_units = I * C * D; break;
  }
  LedgerReport r;
  r.checks.push_back({"serve_backward", grad_units * (n_train + n_test), m.serve_backward});
  r.checks.push_back({"serve_forward", method == Method::Trak ? q_units * n_train : 0, m.serve_forward});
  if (check_training_runs) {
    r.checks.push_back({"model_training_runs", I, m.model_training_runs});
    r.checks.push_back({"lora_fine_tune_runs", s.strategy == Strategy::Lora ? I * L : 0, m.lora_fine_tune_runs});
  }
  return r;
}

}  // namespace tdaens
