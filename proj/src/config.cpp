#include "tdaens/config.hpp"

#include <fstream>
#include <set>

#include "tdaens/artifact.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/persist.hpp"

namespace tdaens {

namespace {

using nlohmann::json;

// Reads one JSON object, remembering which keys were used so leftovers can
// be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (auto v = find(key)) out = to_size(*v, field(key));
  }
  void read(const std::string& key, std::uint64_t& out, int) {
    if (auto v = find(key)) out = to_u64(*v, field(key));
  }
  void read(const std::string& key, double& out) {
    if (auto v = find(key)) out = to_double(*v, field(key));
  }
  void read(const std::string& key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected a boolean");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (auto v = find(key)) out = to_string(*v, field(key));
  }
  void read(const std::string& key, std::optional<double>& out) {
    if (auto v = find(key)) out = to_double(*v, field(key));
  }
  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of non-negative integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(to_size((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
    }
  }
  void read(const std::string& key, std::vector<std::string>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of strings");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(to_string((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
    }
  }

  template <class F>
  auto parse_enum(const std::string& key, F&& parse) -> decltype(parse(std::string())) {
    const json* v = find(key);
    try {
      return parse(to_string(*v, field(key)));
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  static std::size_t to_size(const json& v, const std::string& f) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(f + ": expected a non-negative integer");
    return v.get<std::size_t>();
  }
  static std::uint64_t to_u64(const json& v, const std::string& f) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(f + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }
  static double to_double(const json& v, const std::string& f) {
    if (!v.is_number()) throw ConfigError(f + ": expected a number");
    return v.get<double>();
  }
  static std::string to_string(const json& v, const std::string& f) {
    if (!v.is_string()) throw ConfigError(f + ": expected a string");
    return v.get<std::string>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::SgdMomentum: return "sgd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Newton: return "newton";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& s) {
  for (auto k : {OptimizerKind::SgdMomentum, OptimizerKind::Adam, OptimizerKind::Newton})
    if (optimizer_name(k) == s) return k;
  throw ConfigError("unknown optimizer '" + s + "' (sgd, adam, newton)");
}

std::string projection_name(ProjectionKind k) { return k == ProjectionKind::Gaussian ? "gaussian" : "identity"; }

ProjectionKind parse_projection(const std::string& s) {
  if (s == "gaussian") return ProjectionKind::Gaussian;
  if (s == "identity") return ProjectionKind::Identity;
  throw ConfigError("unknown projection '" + s + "' (gaussian, identity)");
}

TrainConfig parse_training(const json& j, const std::string& path, TrainConfig c) {
  Section s(j, path);
  if (s.find("optimizer")) c.optimizer = s.parse_enum("optimizer", parse_optimizer);
  s.read("lr", c.lr);
  s.read("momentum", c.momentum);
  s.read("beta1", c.beta1);
  s.read("beta2", c.beta2);
  s.read("eps", c.eps);
  s.read("batch_size", c.batch_size);
  s.read("epochs", c.epochs);
  s.read("subset_fraction", c.subset_fraction);
  s.read("checkpoint_epochs", c.checkpoint_epochs);
  s.read("weight_decay", c.weight_decay);
  s.read("newton_tol", c.newton_tol);
  s.read("newton_cg_iters", c.newton_cg_iters);
  s.read("progress", c.progress);
  s.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

}  // namespace

json to_json(const TrainConfig& c) {
  return {{"optimizer", optimizer_name(c.optimizer)},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"subset_fraction", c.subset_fraction},
          {"checkpoint_epochs", c.checkpoint_epochs},
          {"weight_decay", c.weight_decay},
          {"newton_tol", c.newton_tol},
          {"newton_cg_iters", c.newton_cg_iters},
          {"progress", c.progress}};
}

json to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  const auto& m = c.model;
  const auto& e = c.ensemble;
  const auto& v = c.evaluation;
  json j;
  j["experiment"] = c.experiment;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["dataset"] = {{"kind", d.kind},
                  {"train_images", d.train_images},
                  {"train_labels", d.train_labels},
                  {"test_images", d.test_images},
                  {"test_labels", d.test_labels},
                  {"n_train", d.n_train},
                  {"n_test", d.n_test},
                  {"dim", d.dim},
                  {"classes", d.classes},
                  {"separation", d.separation},
                  {"label_noise", d.label_noise},
                  {"vocab", d.vocab},
                  {"context_len", d.context_len},
                  {"generator", d.generator},
                  {"order", d.order},
                  {"seed", d.seed}};
  j["model"] = {{"arch", m.arch},       {"hidden", m.hidden},   {"dropout", m.dropout}, {"d_model", m.d_model},
                {"n_heads", m.n_heads}, {"n_layers", m.n_layers}, {"d_ff", m.d_ff}};
  j["training"] = to_json(c.training);
  j["ensemble"] = {{"strategy", to_string(e.strategy)},
                   {"method", to_string(e.method)},
                   {"I", e.I},
                   {"D", e.D},
                   {"L", e.L},
                   {"checkpoint_epochs", e.checkpoint_epochs},
                   {"mask_rate", e.mask_rate ? json(*e.mask_rate) : json()},
                   {"identity_masks", e.identity_masks},
                   {"output_fn", to_string(e.output_fn)},
                   {"projection", projection_name(e.projection)},
                   {"proj_dim", e.proj_dim},
                   {"lambda", e.lambda ? json(*e.lambda) : json()},
                   {"lambda_rel", e.lambda_rel},
                   {"damping", e.damping},
                   {"cg_max_iters", e.cg_max_iters},
                   {"cg_tol", e.cg_tol},
                   {"lora",
                    {{"rank", e.lora.rank},
                     {"alpha", e.lora.alpha},
                     {"targets", e.lora.targets},
                     {"bias", e.lora.bias},
                     {"grad_space", e.lora.grad_space},
                     {"training", to_json(e.lora.training)}}}};
  j["evaluation"] = {{"m", v.m},
                     {"alpha", v.alpha},
                     {"seed", v.seed ? json(*v.seed) : json()},
                     {"retrain", v.retrain ? to_json(*v.retrain) : json()},
                     {"top_k", v.top_k}};
  j["sweep"] = c.sweep ? json{{"axis", c.sweep->axis}, {"values", c.sweep->values}} : json();
  j["costs"] = {{"train", c.costs.train},
                {"train_base", c.costs.train_base},
                {"train_lora", c.costs.train_lora},
                {"serving", c.costs.serving},
                {"serving_fwd_only", c.costs.serving_fwd_only},
                {"serving_lora", c.costs.serving_lora}};
  return j;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.read("experiment", c.experiment);
  root.read("seed", c.seed, 0);
  root.read("output_dir", c.output_dir);

  if (auto v = root.find("dataset")) {
    Section s(*v, "dataset");
    auto& d = c.dataset;
    s.read("kind", d.kind);
    s.read("train_images", d.train_images);
    s.read("train_labels", d.train_labels);
    s.read("test_images", d.test_images);
    s.read("test_labels", d.test_labels);
    s.read("n_train", d.n_train);
    s.read("n_test", d.n_test);
    s.read("dim", d.dim);
    s.read("classes", d.classes);
    s.read("separation", d.separation);
    s.read("label_noise", d.label_noise);
    s.read("vocab", d.vocab);
    s.read("context_len", d.context_len);
    s.read("generator", d.generator);
    s.read("order", d.order);
    s.read("seed", d.seed, 0);
    s.finish();
  }
  if (auto v = root.find("model")) {
    Section s(*v, "model");
    auto& m = c.model;
    s.read("arch", m.arch);
    s.read("hidden", m.hidden);
    s.read("dropout", m.dropout);
    s.read("d_model", m.d_model);
    s.read("n_heads", m.n_heads);
    s.read("n_layers", m.n_layers);
    s.read("d_ff", m.d_ff);
    s.finish();
  }
  if (auto v = root.find("training")) c.training = parse_training(*v, "training", c.training);
  if (auto v = root.find("ensemble")) {
    Section s(*v, "ensemble");
    auto& e = c.ensemble;
    if (s.find("strategy")) e.strategy = s.parse_enum("strategy", parse_strategy);
    if (s.find("method")) e.method = s.parse_enum("method", parse_method);
    s.read("I", e.I);
    s.read("D", e.D);
    s.read("L", e.L);
    s.read("checkpoint_epochs", e.checkpoint_epochs);
    s.read("mask_rate", e.mask_rate);
    s.read("identity_masks", e.identity_masks);
    if (s.find("output_fn")) e.output_fn = s.parse_enum("output_fn", parse_output_fn);
    if (s.find("projection")) e.projection = s.parse_enum("projection", parse_projection);
    s.read("proj_dim", e.proj_dim);
    s.read("lambda", e.lambda);
    s.read("lambda_rel", e.lambda_rel);
    s.read("damping", e.damping);
    s.read("cg_max_iters", e.cg_max_iters);
    s.read("cg_tol", e.cg_tol);
    if (auto lv = s.find("lora")) {
      Section l(*lv, "ensemble.lora");
      l.read("rank", e.lora.rank);
      l.read("alpha", e.lora.alpha);
      l.read("targets", e.lora.targets);
      l.read("bias", e.lora.bias);
      l.read("grad_space", e.lora.grad_space);
      if (auto tv = l.find("training")) e.lora.training = parse_training(*tv, "ensemble.lora.training", e.lora.training);
      l.finish();
    }
    s.finish();
  }
  if (auto v = root.find("evaluation")) {
    Section s(*v, "evaluation");
    auto& ev = c.evaluation;
    s.read("m", ev.m);
    s.read("alpha", ev.alpha);
    if (auto sv = s.find("seed")) {
      std::uint64_t seed = 0;
      s.read("seed", seed, 0);
      ev.seed = seed;
      (void)sv;
    }
    if (auto rv = s.find("retrain")) ev.retrain = parse_training(*rv, "evaluation.retrain", c.training);
    s.read("top_k", ev.top_k);
    s.finish();
  }
  if (auto v = root.find("sweep")) {
    Section s(*v, "sweep");
    SweepSection sw;
    s.read("axis", sw.axis);
    s.read("values", sw.values);
    s.finish();
    c.sweep = sw;
  }
  if (auto v = root.find("costs")) {
    Section s(*v, "costs");
    s.read("train", c.costs.train);
    s.read("train_base", c.costs.train_base);
    s.read("train_lora", c.costs.train_lora);
    s.read("serving", c.costs.serving);
    s.read("serving_fwd_only", c.costs.serving_fwd_only);
    s.read("serving_lora", c.costs.serving_lora);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  const auto& d = dataset;
  if (d.kind != "mnist" && d.kind != "synthetic_classification" && d.kind != "synthetic_sequences")
    throw ConfigError("dataset.kind: expected mnist, synthetic_classification or synthetic_sequences");
  if (d.n_train == 0) throw ConfigError("dataset.n_train: must be positive");
  if (d.n_test == 0) throw ConfigError("dataset.n_test: must be positive");
  if (d.kind == "mnist")
    for (const auto& [k, v] : {std::pair{"train_images", d.train_images}, std::pair{"train_labels", d.train_labels},
                               std::pair{"test_images", d.test_images}, std::pair{"test_labels", d.test_labels}})
      if (v.empty()) throw ConfigError(std::string("dataset.") + k + ": required for mnist");
  if (d.generator != "markov" && d.generator != "copy") throw ConfigError("dataset.generator: expected markov or copy");
  if (!(d.label_noise >= 0 && d.label_noise < 1)) throw ConfigError("dataset.label_noise: must be in [0, 1)");
  if (d.separation < 0) throw ConfigError("dataset.separation: must be non-negative");

  const auto& m = model;
  if (m.arch != "mlp" && m.arch != "linear" && m.arch != "tiny_transformer")
    throw ConfigError("model.arch: expected mlp, linear or tiny_transformer");
  if ((m.arch == "tiny_transformer") != (d.kind == "synthetic_sequences"))
    throw ConfigError("model.arch: tiny_transformer pairs with synthetic_sequences data and only with it");
  if (!(m.dropout >= 0 && m.dropout < 1)) throw ConfigError("model.dropout: must be in [0, 1)");

  const auto& e = ensemble;
  if (e.I < 1) throw ConfigError("ensemble.I: must be at least 1");
  if (e.D < 1) throw ConfigError("ensemble.D: must be at least 1");
  if (e.L < 1) throw ConfigError("ensemble.L: must be at least 1");
  if (e.strategy == Strategy::DropoutForwardOnly && e.method != Method::Trak)
    throw ConfigError("ensemble.method: dropout_forward_only requires trak, got " + to_string(e.method));
  if (e.strategy == Strategy::Checkpoints && e.checkpoint_epochs.empty())
    throw ConfigError("ensemble.checkpoint_epochs: required for the checkpoints strategy");
  if (e.proj_dim < 1) throw ConfigError("ensemble.proj_dim: must be at least 1");
  if (e.damping < 0) throw ConfigError("ensemble.damping: must be non-negative");
  if (e.lora.grad_space != "adapter" && e.lora.grad_space != "full")
    throw ConfigError("ensemble.lora.grad_space: expected adapter or full");
  if (e.mask_rate && !(*e.mask_rate >= 0 && *e.mask_rate < 1)) throw ConfigError("ensemble.mask_rate: must be in [0, 1)");

  if (evaluation.m < 2) throw ConfigError("evaluation.m: must be at least 2");
  if (!(evaluation.alpha > 0 && evaluation.alpha <= 1)) throw ConfigError("evaluation.alpha: must be in (0, 1]");

  if (sweep) {
    if (sweep->axis != "I" && sweep->axis != "D" && sweep->axis != "L") throw ConfigError("sweep.axis: expected I, D or L");
    if (sweep->values.empty()) throw ConfigError("sweep.values: must not be empty");
    for (std::size_t v : sweep->values)
      if (v < 1) throw ConfigError("sweep.values: entries must be at least 1");
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  RunConfig c = parse_run_config(j);
  c.base_dir = std::filesystem::absolute(path).parent_path();
  return c;
}

LoadedData load_data(const RunConfig& c) {
  const auto& d = c.dataset;
  LoadedData out;
  if (d.kind == "mnist") {
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_absolute() ? path : c.base_dir / path;
    };
    for (const auto& p : {d.train_images, d.train_labels, d.test_images, d.test_labels})
      if (!std::filesystem::exists(resolve(p))) throw ConfigError("dataset: file not found: " + resolve(p).string());
    out.train = load_mnist_idx(resolve(d.train_images), resolve(d.train_labels), d.n_train);
    out.test = load_mnist_idx(resolve(d.test_images), resolve(d.test_labels), d.n_test);
    if (out.train.size() < d.n_train || out.test.size() < d.n_test)
      throw ConfigError("dataset: the IDX files hold fewer samples than n_train / n_test");
  } else if (d.kind == "synthetic_classification") {
    const Dataset all = gen_synthetic_classification(d.n_train + d.n_test, d.dim, d.classes, d.separation,
                                                     d.label_noise, d.seed);
    out.train = all.slice(0, d.n_train);
    out.test = all.slice(d.n_train, d.n_train + d.n_test);
  } else {
    const Dataset all =
        gen_synthetic_sequences(d.n_train + d.n_test, d.vocab, d.context_len,
                                d.generator == "copy" ? SequenceGenerator::Copy : SequenceGenerator::Markov, d.order,
                                d.seed);
    out.train = all.slice(0, d.n_train);
    out.test = all.slice(d.n_train, d.n_train + d.n_test);
  }
  return out;
}

ModelSpec build_model(const RunConfig& c, const Dataset& train) {
  const auto& m = c.model;
  if (m.arch == "linear") return build_linear(train.inputs.cols, train.num_classes);
  if (m.arch == "mlp") return build_mlp(train.inputs.cols, m.hidden, train.num_classes, m.dropout);
  return build_tiny_transformer(train.num_classes, train.inputs.cols, m.d_model, m.n_heads, m.n_layers, m.d_ff,
                                m.dropout);
}

TrainConfig member_train_config(const RunConfig& c) {
  TrainConfig t = c.training;
  t.seed = c.seed;
  // Checkpoint ensembles need their epochs stored during training.
  for (std::size_t e : c.ensemble.checkpoint_epochs)
    if (std::find(t.checkpoint_epochs.begin(), t.checkpoint_epochs.end(), e) == t.checkpoint_epochs.end())
      t.checkpoint_epochs.push_back(e);
  std::sort(t.checkpoint_epochs.begin(), t.checkpoint_epochs.end());
  return t;
}

EnsembleConfig ensemble_config(const RunConfig& c) {
  const auto& e = c.ensemble;
  EnsembleConfig ec;
  ec.strategy = e.strategy;
  ec.method = e.method;
  ec.I = e.I;
  ec.D = e.D;
  ec.L = e.L;
  ec.checkpoint_epochs = e.checkpoint_epochs;
  ec.seed = c.seed;
  ec.mask_rate = e.mask_rate;
  ec.identity_masks = e.identity_masks;
  ec.trak.output_fn = e.output_fn;
  ec.trak.projection = {e.projection, e.proj_dim};
  ec.trak.lambda = e.lambda;
  ec.trak.lambda_rel = e.lambda_rel;
  ec.influence.output_fn = e.output_fn;
  ec.influence.damping = e.damping;
  ec.influence.max_iters = e.cg_max_iters;
  ec.influence.tol = e.cg_tol;
  ec.output_fn = e.output_fn;
  ec.lora_rank = e.lora.rank;
  ec.lora_alpha = e.lora.alpha;
  ec.lora_targets = e.lora.targets;
  ec.lora_bias = e.lora.bias;
  ec.lora_train = e.lora.training;
  ec.lora_grad_space = e.lora.grad_space == "full" ? GradSpace::Full : GradSpace::AdapterOnly;
  return ec;
}

TrainConfig retrain_config(const RunConfig& c) { return c.evaluation.retrain.value_or(c.training); }

std::uint64_t evaluation_seed(const RunConfig& c) { return c.evaluation.seed.value_or(c.seed); }

std::string data_digest(const LoadedData& data) {
  return json_digest({{"train", data.train.digest()}, {"test", data.test.digest()}});
}

std::string training_digest(const RunConfig& c, const LoadedData& data) {
  const json j = to_json(c);
  json t = to_json(member_train_config(c));
  t.erase("progress");
  return json_digest({{"data", data_digest(data)}, {"model", j["model"]}, {"training", t}, {"seed", c.seed}});
}

std::string attribution_digest(const RunConfig& c, const LoadedData& data) {
  const json j = to_json(c);
  return json_digest({{"training", training_digest(c, data)}, {"ensemble", j["ensemble"]}});
}

std::string ground_truth_digest(const RunConfig& c, const LoadedData& data) {
  const json j = to_json(c);
  json r = to_json(retrain_config(c));
  r.erase("progress");
  return json_digest({{"data", data_digest(data)},
                      {"model", j["model"]},
                      {"retrain", r},
                      {"m", c.evaluation.m},
                      {"alpha", c.evaluation.alpha},
                      {"seed", evaluation_seed(c)},
                      {"output_fn", to_string(c.ensemble.output_fn)}});
}

}  // namespace tdaens
