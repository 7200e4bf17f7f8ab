#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tdaens {

enum class Phase { Train, Serve };
enum class PassKind { Forward, Backward };

/// Sample-pass counters for the cost model. A backward pass here is a
/// per-sample gradient evaluation (its forward included); a forward pass is a
/// forward-only evaluation.
struct CostLedger {
  std::uint64_t train_forward = 0;
  std::uint64_t train_backward = 0;
  std::uint64_t serve_forward = 0;
  std::uint64_t serve_backward = 0;
  std::uint64_t serve_hvp = 0;  // per-sample Gauss-Newton vector products inside CG
  std::uint64_t model_training_runs = 0;
  std::uint64_t lora_fine_tune_runs = 0;
  std::map<std::string, double> wall_clock;  // informational only

  void merge(const CostLedger& other);
  friend bool operator==(const CostLedger&, const CostLedger&) = default;
};

void record_pass(CostLedger& ledger, Phase phase, PassKind kind, std::uint64_t n_samples);

nlohmann::json to_json(const CostLedger& ledger);
CostLedger ledger_from_json(const nlohmann::json& j);
std::string format_table(const CostLedger& ledger);

enum class Strategy { Naive, Dropout, DropoutForwardOnly, Lora, Checkpoints };
enum class Method { Trak, InfluenceCg, GradDot, GradCos };

std::string to_string(Strategy s);
std::string to_string(Method m);
Strategy parse_strategy(const std::string& s);
Method parse_method(const std::string& s);

struct UnitCosts {
  double train = 0;             // T_Train
  double train_base = 0;        // T_Train,Base
  double train_lora = 0;        // T_Train,LoRA
  double serving = 0;           // T_Serving
  double serving_fwd_only = 0;  // T_Serving,Forward-only
  double serving_lora = 0;      // T_Serving,LoRA
};

struct CostShape {
  Strategy strategy = Strategy::Naive;
  std::size_t I = 1;
  std::size_t D = 1;
  std::size_t L = 1;
  std::size_t checkpoints = 1;
};

struct PredictedCosts {
  double training = 0;
  double serving = 0;
};

/// Training: Naive/Dropout/forward-only I*T_Train, LoRA I*T_Train,Base +
/// I*L*T_Train,LoRA. Serving: Naive I*T_Serving, Dropout I*D*T_Serving,
/// forward-only I*T_Serving + I*(D-1)*T_Serving,Forward-only, LoRA
/// I*L*T_Serving,LoRA. Checkpoints count as a naive ensemble over
/// I*checkpoints*D units trained by I runs.
PredictedCosts predict_costs(const CostShape& shape, const UnitCosts& unit);

struct LedgerCheck {
  std::string counter;
  std::uint64_t expected = 0;
  std::uint64_t measured = 0;
  bool ok() const { return expected == measured; }
};

struct LedgerReport {
  std::vector<LedgerCheck> checks;
  bool passed() const;
  std::string failures() const;
};

/// Closed-form expected pass counts for a completed attribution run over
/// n_train training and n_test test samples.
LedgerReport verify_ledger(const CostShape& shape, Method method, std::size_t n_train, std::size_t n_test,
                           const CostLedger& measured, bool check_training_runs = false);

}  // namespace tdaens
