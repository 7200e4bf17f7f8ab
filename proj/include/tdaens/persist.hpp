#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdaens/evaluation.hpp"
#include "tdaens/nn/lora.hpp"
#include "tdaens/nn/model_spec.hpp"
#include "tdaens/tda.hpp"

namespace tdaens {

// Typed artifacts on the shared container. Every writer embeds a
// "config_digest"; every loader takes an optional expected digest and throws
// ConfigError when it differs.

void save_params(const std::filesystem::path& path, const ParamVector& params, const std::string& config_digest,
                 nlohmann::json extra = nlohmann::json::object());
ParamVector load_params(const std::filesystem::path& path, const std::optional<std::string>& expect_digest = {},
                        nlohmann::json* header = nullptr);

void save_adapters(const std::filesystem::path& path, const std::vector<LoraAdapter>& adapters,
                   const std::string& config_digest);
std::vector<LoraAdapter> load_adapters(const std::filesystem::path& path,
                                       const std::optional<std::string>& expect_digest = {});

void save_feature_pack(const std::filesystem::path& path, const FeaturePack& pack, const std::string& config_digest);
FeaturePack load_feature_pack(const std::filesystem::path& path, const std::optional<std::string>& expect_digest = {});

void save_attribution(const std::filesystem::path& path, const AttributionMatrix& m);
AttributionMatrix load_attribution(const std::filesystem::path& path,
                                   const std::optional<std::string>& expect_digest = {});

void save_ground_truth(const std::filesystem::path& path, const LdsGroundTruth& gt);
LdsGroundTruth load_ground_truth(const std::filesystem::path& path,
                                 const std::optional<std::string>& expect_digest = {});

/// Serialized bytes, for byte-level comparisons.
std::string encode_attribution(const AttributionMatrix& m);

std::string to_string(OutputFnKind k);
OutputFnKind parse_output_fn(const std::string& s);

}  // namespace tdaens
