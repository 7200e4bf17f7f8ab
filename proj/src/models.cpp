#include "tdaens/models.hpp"

#include <algorithm>
#include <cmath>

#include "tdaens/errors.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

namespace {

LayerSpec linear_layer(std::string name, std::size_t in, std::size_t out) {
  return {LayerKind::Linear, in, out, 0.0, std::move(name), 0, 0};
}

LayerSpec width_layer(LayerKind kind, std::string name, std::size_t width, double rate = 0.0) {
  return {kind, width, width, rate, std::move(name), 0, 0};
}

}  // namespace

ModelSpec build_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t output_dim,
                    double dropout_rate) {
  if (hidden.empty()) throw ArgumentError("build_mlp needs at least one hidden layer");
  if (input_dim == 0 || output_dim == 0 || std::ranges::find(hidden, 0u) != hidden.end())
    throw ArgumentError("build_mlp: zero dimension");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ArgumentError("dropout rate must be in [0, 1)");
  ModelSpec spec;
  spec.arch = Arch::Mlp;
  spec.input_dim = input_dim;
  spec.output_dim = output_dim;
  std::size_t width = input_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    spec.layers.push_back(linear_layer("fc" + k, width, hidden[i]));
    spec.layers.push_back(width_layer(LayerKind::ReLU, "relu" + k, hidden[i]));
    if (dropout_rate > 0.0) spec.layers.push_back(width_layer(LayerKind::Dropout, "drop" + k, hidden[i], dropout_rate));
    width = hidden[i];
  }
  spec.layers.push_back(linear_layer("out", width, output_dim));
  spec.validate();
  return spec;
}

ModelSpec build_linear(std::size_t input_dim, std::size_t output_dim) {
  if (input_dim == 0 || output_dim == 0) throw ArgumentError("build_linear: zero dimension");
  ModelSpec spec;
  spec.arch = Arch::Mlp;
  spec.input_dim = input_dim;
  spec.output_dim = output_dim;
  spec.layers.push_back(linear_layer("out", input_dim, output_dim));
  spec.validate();
  return spec;
}

ModelSpec build_tiny_transformer(std::size_t vocab_size, std::size_t context_len, std::size_t d_model,
                                 std::size_t n_heads, std::size_t n_layers, std::size_t d_ff, double dropout_rate) {
  if (vocab_size < 2 || context_len == 0 || d_model == 0 || n_layers == 0 || d_ff == 0)
    throw ArgumentError("build_tiny_transformer: zero dimension");
  if (n_heads == 0 || d_model % n_heads != 0) throw ArgumentError("d_model must be divisible by n_heads");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ArgumentError("dropout rate must be in [0, 1)");
  ModelSpec spec;
  spec.arch = Arch::TinyTransformer;
  spec.input_dim = context_len;
  spec.output_dim = vocab_size;
  spec.vocab_size = vocab_size;
  spec.context_len = context_len;
  spec.d_model = d_model;
  spec.n_heads = n_heads;
  spec.n_layers = n_layers;
  spec.d_ff = d_ff;
  spec.layers.push_back({LayerKind::Embedding, vocab_size, d_model, 0.0, "embed", 0, context_len});
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    spec.layers.push_back(width_layer(LayerKind::LayerNorm, p + "ln1", d_model));
    for (const char* proj : {"Wq", "Wk", "Wv"}) spec.layers.push_back(linear_layer(p + proj, d_model, d_model));
    spec.layers.push_back({LayerKind::Attention, d_model, d_model, 0.0, p + "attn", n_heads, 0});
    spec.layers.push_back(linear_layer(p + "Wo", d_model, d_model));
    spec.layers.push_back(width_layer(LayerKind::Dropout, p + "drop1", d_model, dropout_rate));
    spec.layers.push_back(width_layer(LayerKind::LayerNorm, p + "ln2", d_model));
    spec.layers.push_back(linear_layer(p + "ff1", d_model, d_ff));
    spec.layers.push_back(width_layer(LayerKind::ReLU, p + "relu", d_ff));
    spec.layers.push_back(linear_layer(p + "ff2", d_ff, d_model));
    spec.layers.push_back(width_layer(LayerKind::Dropout, p + "drop2", d_model, dropout_rate));
  }
  spec.layers.push_back(width_layer(LayerKind::LayerNorm, "ln_f", d_model));
  spec.layers.push_back(linear_layer("head", d_model, vocab_size));
  spec.validate();
  return spec;
}

ParamVector initialize_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector p{spec.layout(), {}};
  p.data.assign(p.layout.total, 0.0);
  for (const auto& e : p.layout.entries) {
    const LayerSpec& l = spec.layer(e.layer);
    CounterRng rng(hash_key({seed, hash_string(e.layer), hash_string(e.name)}));
    double* dst = p.ptr(e);
    if (l.kind == LayerKind::Linear) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_dim));
      for (std::size_t i = 0; i < e.size(); ++i) dst[i] = (2.0 * rng.uniform() - 1.0) * bound;
    } else if (l.kind == LayerKind::LayerNorm) {
      std::fill_n(dst, e.size(), e.name == "gamma" ? 1.0 : 0.0);
    } else if (l.kind == LayerKind::Embedding) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(l.out_dim));
      for (std::size_t i = 0; i < e.size(); ++i) dst[i] = rng.normal() * sd;
    }
  }
  return p;
}

std::vector<std::string> resolve_lora_targets(const ModelSpec& spec, const std::vector<std::string>& targets) {
  std::vector<std::string> resolved;
  for (const auto& t : targets) {
    if (const LayerSpec* l = spec.try_layer(t)) {
      if (l->kind != LayerKind::Linear) throw NameError("LoRA target '" + t + "' is not a Linear layer");
      resolved.push_back(t);
      continue;
    }
    bool matched = false;
    for (const auto& l : spec.layers) {
      const auto dot = l.name.rfind('.');
      if (l.kind == LayerKind::Linear && dot != std::string::npos && l.name.substr(dot + 1) == t) {
        resolved.push_back(l.name);
        matched = true;
      }
    }
    if (!matched) throw NameError("unknown LoRA target '" + t + "'");
  }
  return resolved;
}

std::vector<LoraAdapter> attach_lora(const ModelSpec& spec, const ParamVector& base, const std::vector<std::string>& targets,
                                     std::size_t rank, double alpha, std::uint64_t seed, bool bias) {
  if (base.layout != spec.layout()) throw ShapeError("base parameters do not match the model spec");
  std::vector<LoraAdapter> adapters;
  for (const auto& name : resolve_lora_targets(spec, targets)) {
    const LayerSpec& l = spec.layer(name);
    if (rank < 1 || rank > std::min(l.in_dim, l.out_dim))
      throw ArgumentError("LoRA rank must be in [1, min(in_dim, out_dim)] for '" + name + "'");
    LoraAdapter a;
    a.target_layer = name;
    a.rank = rank;
    a.alpha = alpha;
    a.A = Tensor2(rank, l.in_dim);
    a.B = Tensor2(l.out_dim, rank, 0.0);
    if (bias) a.bias_delta.assign(l.out_dim, 0.0);
    CounterRng rng(hash_key({seed, hash_string(name)}));
    const double sd = 1.0 / std::sqrt(static_cast<double>(rank));
    for (double& v : a.A.data) v = rng.normal() * sd;
    adapters.push_back(std::move(a));
  }
  return adapters;
}

ParamCountReport param_count(const ModelSpec& spec, const EnsembleShape& shape) {
  if (shape.I < 1 || shape.D < 1) throw ArgumentError("param_count: I and D must be at least 1");
  ParamCountReport r;
  r.base = spec.layout().total;
  if (shape.L > 0) {
    for (const auto& name : resolve_lora_targets(spec, shape.lora_targets)) {
      const LayerSpec& l = spec.layer(name);
      r.adapters_per_unit += shape.rank * (l.in_dim + l.out_dim) + (shape.lora_bias ? l.out_dim : 0);
    }
  }
  // D never enters: dropout-masked variants share their base model's parameters.
  r.total = shape.I * r.base + shape.I * shape.L * r.adapters_per_unit;
  return r;
}

}  // namespace tdaens
