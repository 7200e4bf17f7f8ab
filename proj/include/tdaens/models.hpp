#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdaens/nn/lora.hpp"
#include "tdaens/nn/model_spec.hpp"

namespace tdaens {

/// Linear -> ReLU -> Dropout per hidden width, then a Linear head. Layers are
/// named fc1.., relu1.., drop1.., and "out".
ModelSpec build_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t output_dim,
                    double dropout_rate);

/// Multinomial logistic regression: a single Linear layer named "out".
ModelSpec build_linear(std::size_t input_dim, std::size_t output_dim);

/// Pre-LayerNorm causal decoder. Block i exposes Linear layers
/// "layer{i}.Wq/Wk/Wv/Wo/ff1/ff2", LayerNorms "layer{i}.ln1/ln2", dropouts
/// "layer{i}.drop1/drop2"; the head is untied from the embedding.
ModelSpec build_tiny_transformer(std::size_t vocab_size, std::size_t context_len, std::size_t d_model,
                                 std::size_t n_heads, std::size_t n_layers, std::size_t d_ff, double dropout_rate);

/// Kaiming-uniform Linear weights and biases (bound 1/sqrt(fan_in)),
/// LayerNorm gamma = 1 / beta = 0, embeddings N(0, 1/d_model).
ParamVector initialize_params(const ModelSpec& spec, std::uint64_t seed);

/// Expands short target names: "Wq" matches every "layer{i}.Wq".
std::vector<std::string> resolve_lora_targets(const ModelSpec& spec, const std::vector<std::string>& targets);

/// One adapter per target: A ~ N(0, 1/rank), B = 0, bias_delta = 0.
std::vector<LoraAdapter> attach_lora(const ModelSpec& spec, const ParamVector& base, const std::vector<std::string>& targets,
                                     std::size_t rank, double alpha, std::uint64_t seed, bool bias = true);

struct EnsembleShape {
  std::size_t I = 1;
  std::size_t D = 1;
  std::size_t L = 0;
  std::size_t rank = 8;
  std::vector<std::string> lora_targets;
  bool lora_bias = true;
};

struct ParamCountReport {
  std::size_t base = 0;            // one model
  std::size_t adapters_per_unit = 0;  // all adapters of one LoRA fine-tune
  std::size_t total = 0;           // I * base + I * L * adapters_per_unit
};

ParamCountReport param_count(const ModelSpec& spec, const EnsembleShape& shape);

}  // namespace tdaens
