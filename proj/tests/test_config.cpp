#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "tdaens/config.hpp"
#include "tdaens/errors.hpp"

using namespace tdaens;
using nlohmann::json;

namespace {

const std::filesystem::path kConfigs = TDAENS_CONFIG_DIR;

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string config_error(const json& j) {
  try {
    parse_run_config(j).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Every key emitted by to_json must be declared in the schema and vice versa.
void compare_keys(const json& value, const json& schema, const std::string& path) {
  if (!value.is_object()) return;
  ASSERT_TRUE(schema.contains("properties")) << path;
  std::set<std::string> emitted, declared;
  for (const auto& [k, v] : value.items()) emitted.insert(k);
  for (const auto& [k, v] : schema["properties"].items()) declared.insert(k);
  EXPECT_EQ(emitted, declared) << path;
  for (const auto& [k, v] : value.items()) {
    if (!v.is_object()) continue;
    const json& sub = schema["properties"][k];
    if (sub.contains("properties")) {
      compare_keys(v, sub, path + "." + k);
    } else if (sub.contains("anyOf")) {
      for (const auto& alt : sub["anyOf"])
        if (alt.contains("properties")) compare_keys(v, alt, path + "." + k);
    } else {
      ADD_FAILURE() << path << "." << k << ": object without declared properties";
    }
  }
}

}  // namespace

TEST(Config, ExampleConfigsParseAndRoundTrip) {
  for (const char* name : {"synthetic_trak.json", "mnist_dropout.json", "mnist_sweep_d.json", "markov_lora.json"}) {
    const RunConfig c = load_run_config(kConfigs / name);
    c.validate();
    const json once = to_json(c);
    EXPECT_EQ(to_json(parse_run_config(once)), once) << name;
  }
}

TEST(Config, DefaultsRoundTrip) {
  const json j = to_json(RunConfig{});
  EXPECT_EQ(to_json(parse_run_config(j)), j);
}

TEST(Config, SchemaDeclaresExactlyTheSerializedKeys) {
  const json schema = read_json(kConfigs / "schema.json");
  RunConfig c = load_run_config(kConfigs / "mnist_sweep_d.json");
  c.evaluation.retrain = c.training;  // expand optional sections
  compare_keys(to_json(c), schema, "$");
}

TEST(Config, UnknownKeyNamesFieldPath) {
  json j = read_json(kConfigs / "markov_lora.json");
  j["ensemble"]["lora"]["rnak"] = 4;
  EXPECT_NE(config_error(j).find("ensemble.lora.rnak"), std::string::npos) << config_error(j);
}

TEST(Config, WrongTypeNamesFieldPath) {
  json j = read_json(kConfigs / "synthetic_trak.json");
  j["training"]["epochs"] = "ten";
  EXPECT_NE(config_error(j).find("training.epochs"), std::string::npos) << config_error(j);
}

TEST(Config, BadEnumNamesFieldPath) {
  json j = read_json(kConfigs / "synthetic_trak.json");
  j["ensemble"]["strategy"] = "bagging";
  EXPECT_NE(config_error(j).find("ensemble.strategy"), std::string::npos) << config_error(j);
}

TEST(Config, ForwardOnlyRequiresTrak) {
  json j = read_json(kConfigs / "mnist_sweep_d.json");
  j["ensemble"]["method"] = "grad_cos";
  EXPECT_NE(config_error(j).find("requires trak"), std::string::npos) << config_error(j);
}

TEST(Config, SweepAxisValidated) {
  json j = read_json(kConfigs / "mnist_sweep_d.json");
  j["sweep"]["axis"] = "k";
  EXPECT_NE(config_error(j).find("sweep"), std::string::npos);
}

TEST(Config, MnistPathsResolveAgainstConfigDirectory) {
  const RunConfig c = load_run_config(kConfigs / "mnist_dropout.json");
  const LoadedData d = load_data(c);
  EXPECT_EQ(d.train.size(), 1000u);
  EXPECT_EQ(d.test.size(), 100u);
}

TEST(Config, MissingDatasetFileIsConfigError) {
  RunConfig c = load_run_config(kConfigs / "mnist_dropout.json");
  c.dataset.train_images = "does/not/exist";
  EXPECT_THROW(load_data(c), ConfigError);
}

TEST(Config, CheckpointEpochsMergeIntoTraining) {
  json j = read_json(kConfigs / "synthetic_trak.json");
  j["ensemble"] = {{"strategy", "checkpoints"}, {"method", "trak"}, {"checkpoint_epochs", {50, 10}}};
  const RunConfig c = parse_run_config(j);
  c.validate();
  EXPECT_EQ(member_train_config(c).checkpoint_epochs, (std::vector<std::size_t>{10, 50}));
}

TEST(Config, DigestsTrackTheirSections) {
  const RunConfig a = load_run_config(kConfigs / "synthetic_trak.json");
  const LoadedData d = load_data(a);
  RunConfig b = a;
  b.ensemble.method = Method::GradDot;
  EXPECT_EQ(training_digest(a, d), training_digest(b, d));
  EXPECT_NE(attribution_digest(a, d), attribution_digest(b, d));
  EXPECT_EQ(ground_truth_digest(a, d), ground_truth_digest(b, d));
  b = a;
  b.evaluation.m = 7;
  EXPECT_NE(ground_truth_digest(a, d), ground_truth_digest(b, d));
  EXPECT_EQ(training_digest(a, d), training_digest(b, d));
  b = a;
  b.training.progress = true;
  EXPECT_EQ(training_digest(a, d), training_digest(b, d));
}
