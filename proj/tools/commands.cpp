#include "commands.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "tdaens/artifact.hpp"
#include "tdaens/config.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/evaluation.hpp"
#include "tdaens/parallel.hpp"
#include "tdaens/persist.hpp"

namespace tdaens::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
  std::string config;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ground_truth;
  std::string manifest;
  std::string attribution;
  bool timing = false;
};

struct Session {
  RunConfig config;
  LoadedData data;
  ModelSpec spec;
  fs::path out;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Shortest round-trip decimal form.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string padded(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

// RFC-4180: CRLF record separators, quoted fields where needed.
void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string text;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text += (i ? "," : "") + csv_field(cells[i]);
    text += "\r\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  write_text_file(path, text);
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

Session open_session(const Options& o) {
  Session s;
  s.config = load_run_config(o.config);
  if (o.seed) s.config.seed = *o.seed;
  if (!o.out.empty()) s.config.output_dir = o.out;
  s.config.validate();
  s.data = load_data(s.config);
  s.spec = build_model(s.config, s.data.train);
  s.out = s.config.output_dir;
  spdlog::debug("data: {} train / {} test samples, digest {}", s.data.train.size(), s.data.test.size(),
                data_digest(s.data));
  return s;
}

CostShape cost_shape(const RunConfig& c) {
  const auto& e = c.ensemble;
  return {e.strategy, e.I, e.D, e.L, std::max<std::size_t>(1, e.checkpoint_epochs.size())};
}

EnsembleShape ensemble_shape(const RunConfig& c) {
  const auto& e = c.ensemble;
  EnsembleShape s;
  s.I = e.I;
  s.D = e.D;
  s.L = e.strategy == Strategy::Lora ? e.L : 0;
  s.rank = e.lora.rank;
  s.lora_targets = e.lora.targets;
  s.lora_bias = e.lora.bias;
  return s;
}

json param_json(const ParamCountReport& p) {
  return {{"base", p.base}, {"adapters_per_unit", p.adapters_per_unit}, {"total", p.total}};
}

json report_json(const LedgerReport& r) {
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"counter", c.counter}, {"expected", c.expected}, {"measured", c.measured}, {"ok", c.ok()}});
  return {{"passed", r.passed()}, {"checks", checks}};
}

struct Members {
  std::vector<TrainedMember> members;
  std::vector<CostLedger> ledgers;

  CostLedger training_ledger(std::size_t count) const {
    CostLedger total;
    for (std::size_t i = 0; i < count; ++i) total.merge(ledgers[i]);
    return total;
  }
};

Members train_members(const Session& s, std::size_t count, std::size_t jobs) {
  const TrainConfig tc = member_train_config(s.config);
  Members m;
  m.members.resize(count);
  m.ledgers.resize(count);
  parallel_for(count, jobs, [&](std::size_t i) {
    m.members[i] = train_member(s.spec, s.data.train, tc, i, &m.ledgers[i]);
    spdlog::info("member {} trained on {} samples", i, m.members[i].subset_indices.size());
  });
  return m;
}

void write_members(const Session& s, const Members& m) {
  const std::string td = training_digest(s.config, s.data);
  fs::create_directories(s.out / "members");
  json entries = json::array();
  for (const auto& t : m.members) {
    const std::string stem = "members/member_" + padded(t.member_index);
    save_params(s.out / (stem + ".art"), t.params, td, {{"member_index", t.member_index}, {"seed", t.seed}});
    json ck = json::object();
    for (const auto& [epoch, params] : t.checkpoints) {
      const std::string name = stem + "_epoch_" + padded(epoch) + ".art";
      save_params(s.out / name, params, td, {{"member_index", t.member_index}, {"epoch", epoch}});
      ck[std::to_string(epoch)] = name;
    }
    entries.push_back({{"index", t.member_index},
                       {"seed", t.seed},
                       {"file", stem + ".art"},
                       {"checkpoints", ck},
                       {"subset", t.subset_indices},
                       {"ledger", to_json(m.ledgers[t.member_index])}});
  }
  json config = to_json(s.config);
  config.erase("output_dir");
  write_json(s.out / "manifest.json", {{"kind", "tdaens_manifest"},
                                       {"experiment", s.config.experiment},
                                       {"training_digest", td},
                                       {"data_digest", data_digest(s.data)},
                                       {"config", config},
                                       {"members", entries}});
}

Members load_members(const Session& s, const fs::path& manifest_path, std::size_t count) {
  if (!fs::exists(manifest_path))
    throw ConfigError("manifest not found: " + manifest_path.string() + " (run the train command first)");
  const json j = read_json(manifest_path);
  const std::string td = training_digest(s.config, s.data);
  if (j.value("kind", "") != "tdaens_manifest") throw FormatError(manifest_path.string() + ": not a tdaens manifest");
  if (j.value("training_digest", "") != td)
    throw ConfigError(manifest_path.string() +
                      ": members were trained with a different dataset, model or training section");
  const json& entries = j.at("members");
  if (entries.size() < count)
    throw ConfigError("ensemble.I: needs " + std::to_string(count) + " members, manifest has " +
                      std::to_string(entries.size()));
  const fs::path dir = manifest_path.parent_path();
  Members m;
  for (std::size_t i = 0; i < count; ++i) {
    const json& e = entries[i];
    TrainedMember t;
    t.member_index = e.at("index").get<std::size_t>();
    t.seed = e.at("seed").get<std::uint64_t>();
    t.subset_indices = e.at("subset").get<std::vector<std::size_t>>();
    t.params = load_params(dir / e.at("file").get<std::string>(), td);
    for (const auto& [epoch, file] : e.at("checkpoints").items())
      t.checkpoints[std::stoul(epoch)] = load_params(dir / file.get<std::string>(), td);
    m.members.push_back(std::move(t));
    m.ledgers.push_back(ledger_from_json(e.at("ledger")));
  }
  return m;
}

LdsGroundTruth obtain_ground_truth(const Session& s, const Options& o, std::string_view context) {
  const std::string gd = ground_truth_digest(s.config, s.data);
  const std::string dd = data_digest(s.data);
  const bool explicit_path = !o.ground_truth.empty();
  const fs::path path = explicit_path ? fs::path(o.ground_truth) : s.out / "ground_truth.art";
  if (fs::exists(path)) {
    LdsGroundTruth gt = load_ground_truth(path);
    if (gt.data_digest != dd)
      throw ConfigError(path.string() + ": ground truth was built on a different dataset (data digest mismatch)");
    if (gt.config_digest == gd || explicit_path) {
      if (gt.config_digest != gd)
        spdlog::warn("{}: retraining settings differ from the config; using the saved ground truth", path.string());
      spdlog::info("{}: reusing ground truth {}", context, path.string());
      return gt;
    }
  }
  spdlog::info("{}: building ground truth ({} retrained models)", context, s.config.evaluation.m);
  const auto& ev = s.config.evaluation;
  LdsGroundTruth gt = build_lds_ground_truth(s.spec, s.data.train, s.data.test, ev.m, ev.alpha, retrain_config(s.config),
                                             evaluation_seed(s.config), s.config.ensemble.output_fn, o.jobs);
  gt.config_digest = gd;
  gt.data_digest = dd;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_ground_truth(path, gt);
  return gt;
}

std::string summary_text(const RunConfig& c, const AttributionMatrix& a) {
  std::ostringstream out;
  const auto& e = c.ensemble;
  out << "experiment " << c.experiment << "\n"
      << "strategy " << to_string(e.strategy) << " method " << to_string(a.method) << " I=" << e.I << " D=" << e.D
      << " L=" << e.L << "\n"
      << "scores " << a.scores.rows << " train x " << a.scores.cols << " test\n";
  for (const auto& [flag, count] : a.flags) out << "flag " << flag << " " << count << "\n";
  const std::size_t k = std::min(c.evaluation.top_k, a.scores.rows);
  out << "top " << k << " training indices per test point (index:score)\n";
  std::vector<std::size_t> order(a.scores.rows);
  for (std::size_t t = 0; t < a.scores.cols; ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::size_t x, std::size_t y) {
      const double sx = a.scores(x, t), sy = a.scores(y, t);
      return sx != sy ? sx > sy : x < y;
    });
    out << "test " << t << ":";
    for (std::size_t r = 0; r < k; ++r) out << " " << order[r] << ":" << num(a.scores(order[r], t));
    out << "\n";
  }
  return out.str();
}

int cmd_train(const Options& o) {
  const Stopwatch clock;
  const Session s = open_session(o);
  Members m = train_members(s, s.config.ensemble.I, o.jobs);
  // Everything is computed before the first write, so failures leave no partial outputs.
  write_members(s, m);
  CostLedger total = m.training_ledger(m.members.size());
  if (o.timing) total.wall_clock["train"] = clock.seconds();
  write_json(s.out / "train_ledger.json",
             {{"ledger", to_json(total)},
              {"members", m.members.size()},
              {"param_count", param_json(param_count(s.spec, ensemble_shape(s.config)))}});
  spdlog::info("wrote {} members to {}", m.members.size(), s.out.string());
  return 0;
}

int cmd_attribute(const Options& o) {
  const Stopwatch clock;
  const Session s = open_session(o);
  EnsembleConfig ec = ensemble_config(s.config);
  ec.jobs = o.jobs;
  ec.validate(s.spec);
  const Members m =
      load_members(s, o.manifest.empty() ? s.out / "manifest.json" : fs::path(o.manifest), s.config.ensemble.I);
  EnsembleRun r = run_ensemble(s.spec, m.members, s.data.train, s.data.test, ec);
  r.attribution.config_digest = attribution_digest(s.config, s.data);
  r.attribution.data_digest = data_digest(s.data);
  for (const auto& [flag, count] : r.attribution.flags) spdlog::warn("attribution flag {} ({})", flag, count);

  CostLedger total = m.training_ledger(m.members.size());
  total.merge(r.ledger);
  const LedgerReport check = verify_ledger(cost_shape(s.config), ec.method, s.data.train.size(), s.data.test.size(),
                                           total, true);
  if (o.timing) total.wall_clock["attribute"] = clock.seconds();
  const PredictedCosts predicted = predict_costs(cost_shape(s.config), s.config.costs);

  fs::create_directories(s.out);
  save_attribution(s.out / "attribution.art", r.attribution);
  if (ec.strategy == Strategy::Lora) {
    fs::create_directories(s.out / "adapters");
    for (std::size_t k = 0; k < r.adapters.size(); ++k)
      save_adapters(s.out / "adapters" / ("member_" + padded(k / ec.L) + "_adapter_" + padded(k % ec.L + 1) + ".art"),
                    r.adapters[k], r.attribution.config_digest);
  }
  write_json(s.out / "attribution_ledger.json",
             {{"ledger", to_json(total)},
              {"units", r.units},
              {"verification", report_json(check)},
              {"predicted", {{"training", predicted.training}, {"serving", predicted.serving}}},
              {"param_count", param_json(param_count(s.spec, ensemble_shape(s.config)))}});
  write_text_file(s.out / "summary.txt", summary_text(s.config, r.attribution));
  if (!check.passed()) {
    spdlog::error("pass counts disagree with the closed-form ledger:\n{}", check.failures());
    return 3;
  }
  return 0;
}

int cmd_lds(const Options& o) {
  const Session s = open_session(o);
  const fs::path apath = o.attribution.empty() ? s.out / "attribution.art" : fs::path(o.attribution);
  if (!fs::exists(apath)) throw ConfigError("attribution not found: " + apath.string());
  const AttributionMatrix a = load_attribution(apath);
  if (a.data_digest != data_digest(s.data))
    throw ConfigError(apath.string() + ": attribution was computed on a different dataset (data digest mismatch)");
  const LdsGroundTruth gt = obtain_ground_truth(s, o, "lds");
  const LdsReport r = lds(a, gt);

  std::vector<std::vector<std::string>> rows;
  json constant = json::array();
  for (std::size_t t = 0; t < r.per_test.size(); ++t) {
    rows.push_back({std::to_string(t), num(r.per_test[t]), r.constant[t] ? "1" : "0"});
    if (r.constant[t]) constant.push_back(t);
  }
  fs::create_directories(s.out);
  write_csv(s.out / "lds.csv", {"test_index", "lds", "constant"}, rows);
  write_json(s.out / "lds.json", {{"mean_lds", r.mean},
                                  {"per_test", r.per_test},
                                  {"constant_tests", constant},
                                  {"m", r.m},
                                  {"alpha", r.alpha},
                                  {"seed", r.seed},
                                  {"method", to_string(a.method)},
                                  {"output_fn", to_string(gt.output_fn)},
                                  {"attribution_digest", a.config_digest},
                                  {"ground_truth_digest", gt.config_digest},
                                  {"data_digest", a.data_digest}});
  std::cout << "mean_lds " << num(r.mean) << "\n";
  return 0;
}

int cmd_sweep(const Options& o) {
  const Session s = open_session(o);
  if (!s.config.sweep) throw ConfigError("sweep: section required by the sweep command");
  const SweepSection& sw = *s.config.sweep;
  const std::size_t members_needed =
      sw.axis == "I" ? *std::max_element(sw.values.begin(), sw.values.end()) : s.config.ensemble.I;
  const Members m = train_members(s, members_needed, o.jobs);
  const LdsGroundTruth gt = obtain_ground_truth(s, o, "sweep");
  const std::string dd = data_digest(s.data);

  const std::vector<std::string> header{"strategy",       "method",         "I",
                                        "D",              "L",              "mean_lds",
                                        "predicted_training", "predicted_serving", "param_count",
                                        "train_forward",  "train_backward", "serve_forward",
                                        "serve_backward", "serve_hvp",      "model_training_runs",
                                        "lora_fine_tune_runs", "ledger_verified", "status"};
  std::vector<std::vector<std::string>> rows;
  for (std::size_t v : sw.values) {
    RunConfig pc = s.config;
    (sw.axis == "I" ? pc.ensemble.I : sw.axis == "D" ? pc.ensemble.D : pc.ensemble.L) = v;
    const auto& e = pc.ensemble;
    std::vector<std::string> row{to_string(e.strategy), to_string(e.method), std::to_string(e.I),
                                 std::to_string(e.D), std::to_string(e.L)};
    row.resize(header.size());
    try {
      const PredictedCosts predicted = predict_costs(cost_shape(pc), pc.costs);
      row[6] = num(predicted.training);
      row[7] = num(predicted.serving);
      row[8] = std::to_string(param_count(s.spec, ensemble_shape(pc)).total);
      pc.validate();
      EnsembleConfig ec = ensemble_config(pc);
      ec.jobs = o.jobs;
      ec.validate(s.spec);
      EnsembleRun r = run_ensemble(s.spec, std::span(m.members).first(e.I), s.data.train, s.data.test, ec);
      r.attribution.data_digest = dd;
      const LdsReport rep = lds(r.attribution, gt);
      CostLedger total = m.training_ledger(e.I);
      total.merge(r.ledger);
      const LedgerReport check =
          verify_ledger(cost_shape(pc), e.method, s.data.train.size(), s.data.test.size(), total, true);
      row[5] = num(rep.mean);
      row[9] = std::to_string(total.train_forward);
      row[10] = std::to_string(total.train_backward);
      row[11] = std::to_string(total.serve_forward);
      row[12] = std::to_string(total.serve_backward);
      row[13] = std::to_string(total.serve_hvp);
      row[14] = std::to_string(total.model_training_runs);
      row[15] = std::to_string(total.lora_fine_tune_runs);
      row[16] = check.passed() ? "1" : "0";
      row[17] = r.attribution.flags.empty() ? "ok" : "ok (flags: " + [&] {
        std::string f;
        for (const auto& [k, n] : r.attribution.flags) f += (f.empty() ? "" : " ") + k + "=" + std::to_string(n);
        return f;
      }() + ")";
      spdlog::info("sweep {}={}: mean LDS {}", sw.axis, v, num(rep.mean));
    } catch (const Error& err) {
      row[17] = std::string("error: ") + err.what();
      spdlog::error("sweep {}={}: {}", sw.axis, v, err.what());
    }
    rows.push_back(std::move(row));
  }
  fs::create_directories(s.out);
  write_csv(s.out / "sweep.csv", header, rows);
  return 0;
}

int cmd_costs(const Options& o) {
  const Session s = open_session(o);
  const auto& e = s.config.ensemble;
  const auto& u = s.config.costs;
  const PredictedCosts p = predict_costs(cost_shape(s.config), u);
  const json j{{"strategy", to_string(e.strategy)},
               {"I", e.I},
               {"D", e.D},
               {"L", e.L},
               {"checkpoints", cost_shape(s.config).checkpoints},
               {"unit_costs",
                {{"train", u.train},
                 {"train_base", u.train_base},
                 {"train_lora", u.train_lora},
                 {"serving", u.serving},
                 {"serving_fwd_only", u.serving_fwd_only},
                 {"serving_lora", u.serving_lora}}},
               {"predicted", {{"training", p.training}, {"serving", p.serving}}},
               {"param_count", param_json(param_count(s.spec, ensemble_shape(s.config)))}};
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(s.out);
    write_json(s.out / "costs.json", j);
  }
  return 0;
}

int cmd_oracle(const Options& o) {
  const Session s = open_session(o);
  const TrainConfig rc = retrain_config(s.config);
  const OutputFnKind fn = s.config.ensemble.output_fn;
  std::optional<AttributionMatrix> compare;
  if (!o.attribution.empty()) {
    compare = load_attribution(o.attribution);
    if (compare->data_digest != data_digest(s.data))
      throw ConfigError(o.attribution + ": attribution was computed on a different dataset (data digest mismatch)");
  }
  const AttributionMatrix oracle = loo_oracle(s.spec, s.data.train, s.data.test, rc, s.config.seed, fn, o.jobs);
  json r = to_json(rc);
  r.erase("progress");
  const json header{{"n_train", oracle.scores.rows},
                    {"n_test", oracle.scores.cols},
                    {"output_fn", to_string(fn)},
                    {"init_seed", s.config.seed},
                    {"config_digest", json_digest({{"data", data_digest(s.data)},
                                                   {"model", to_json(s.config)["model"]},
                                                   {"retrain", r},
                                                   {"seed", s.config.seed},
                                                   {"output_fn", to_string(fn)}})},
                    {"data_digest", data_digest(s.data)}};
  fs::create_directories(s.out);
  save_artifact(s.out / "oracle.art", "loo_oracle", header, oracle.scores.data);
  if (compare) {
    const double rho = mean_column_spearman(compare->scores, oracle.scores);
    write_json(s.out / "oracle.json", {{"method", to_string(compare->method)}, {"mean_spearman", rho}});
    std::cout << "mean_spearman " << num(rho) << "\n";
  }
  return 0;
}

void setup_logging() {
  auto logger = spdlog::get("tdaens");
  if (!logger) logger = spdlog::stderr_logger_st("tdaens");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("ATTRIB_ENS_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "warn") spdlog::set_level(spdlog::level::warn);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else spdlog::warn("ATTRIB_ENS_LOG={} not recognised (error, warn, info, debug); using info", v);
  }
}

}  // namespace

int run(int argc, char** argv) {
  setup_logging();
  CLI::App app{"tdaens: gradient-based training data attribution with efficient ensembles"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "run configuration (JSON)")->required();
    sub->add_option("--jobs", o.jobs, "worker threads (outputs do not depend on it)")->check(CLI::PositiveNumber);
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { o.seed = v; },
                                            "override the run seed");
    sub->add_option("--out", o.out, "output directory (overrides output_dir)");
    return sub;
  };
  CLI::App* train = common("train", "train the I ensemble members and write a manifest");
  train->add_flag("--timing", o.timing, "record wall-clock seconds in the ledger");
  CLI::App* attribute = common("attribute", "run the configured ensemble strategy and attribution method");
  attribute->add_option("--manifest", o.manifest, "manifest written by train (default <out>/manifest.json)");
  attribute->add_flag("--timing", o.timing, "record wall-clock seconds in the ledger");
  CLI::App* lds_cmd = common("lds", "linear datamodeling score of an attribution artifact");
  lds_cmd->add_option("--attribution", o.attribution, "attribution artifact (default <out>/attribution.art)");
  lds_cmd->add_option("--ground-truth", o.ground_truth, "ground-truth artifact; built and saved there if missing");
  CLI::App* sweep = common("sweep", "train, attribute and score every point of the sweep axis");
  sweep->add_option("--ground-truth", o.ground_truth, "ground-truth artifact; built and saved there if missing");
  common("costs", "closed-form training/serving costs and parameter count");
  CLI::App* oracle = common("oracle", "brute-force leave-one-out scores");
  oracle->add_option("--attribution", o.attribution, "attribution artifact to correlate with the oracle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (attribute->parsed()) return cmd_attribute(o);
    if (lds_cmd->parsed()) return cmd_lds(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (oracle->parsed()) return cmd_oracle(o);
    return cmd_costs(o);
  } catch (const DivergenceError& e) {
    spdlog::error("training diverged at epoch {} batch {}: {}", e.epoch(), e.batch(), e.what());
    return e.exit_code();
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const json::exception& e) {
    spdlog::error("malformed JSON input: {}", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("internal failure: {}", e.what());
    return 3;
  }
}

}  // namespace tdaens::cli
