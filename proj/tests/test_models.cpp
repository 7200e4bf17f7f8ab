#include <gtest/gtest.h>

#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/nn/graph.hpp"

using namespace tdaens;

TEST(BuildMlp, MnistMlpParameterCount) {
  const ModelSpec spec = build_mlp(784, {128, 64}, 10, 0.1);
  EXPECT_EQ(spec.layout().total, 109386u);
  EXPECT_EQ(spec.layout().total, 784u * 128 + 128 + 128 * 64 + 64 + 64 * 10 + 10);
}

TEST(BuildMlp, TinyParameterCount) { EXPECT_EQ(build_mlp(2, {2}, 2, 0.0).layout().total, 12u); }

TEST(BuildMlp, DropoutAfterFirstTwoLinearLayers) {
  const ModelSpec spec = build_mlp(784, {128, 64}, 10, 0.1);
  std::size_t drops = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::Dropout) continue;
    ++drops;
    EXPECT_DOUBLE_EQ(spec.layers[i].dropout_rate, 0.1);
    ASSERT_GE(i, 2u);
    EXPECT_EQ(spec.layers[i - 1].kind, LayerKind::ReLU);
    EXPECT_EQ(spec.layers[i - 2].kind, LayerKind::Linear);
  }
  EXPECT_EQ(drops, 2u);
  EXPECT_EQ(spec.layers.back().kind, LayerKind::Linear);
  EXPECT_EQ(spec.layers.back().out_dim, 10u);
}

TEST(BuildMlp, RejectsBadArguments) {
  EXPECT_THROW(build_mlp(0, {4}, 2, 0.1), ArgumentError);
  EXPECT_THROW(build_mlp(3, {0}, 2, 0.1), ArgumentError);
  EXPECT_THROW(build_mlp(3, {}, 2, 0.1), ArgumentError);
  EXPECT_THROW(build_mlp(3, {4}, 2, 1.0), ArgumentError);
}

TEST(BuildTransformer, NamesAttentionProjections) {
  const ModelSpec spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1);
  EXPECT_NO_THROW(spec.validate());
  for (int i = 0; i < 2; ++i)
    for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) {
      const LayerSpec* l = spec.try_layer("layer" + std::to_string(i) + "." + w);
      ASSERT_NE(l, nullptr) << w;
      EXPECT_EQ(l->kind, LayerKind::Linear);
      EXPECT_EQ(l->in_dim, 32u);
      EXPECT_EQ(l->out_dim, 32u);
    }
}

TEST(BuildTransformer, SingleTokenContextGivesVocabLogits) {
  const ModelSpec spec = build_tiny_transformer(32, 1, 32, 2, 2, 64, 0.1);
  const ParamVector p = initialize_params(spec, 0);
  const Tensor2 out = forward(spec, p, Tensor2::from_rows({{5.0}}));
  EXPECT_EQ(out.rows, 1u);
  EXPECT_EQ(out.cols, 32u);
}

TEST(BuildTransformer, HeadsMustDivideModelWidth) {
  EXPECT_THROW(build_tiny_transformer(32, 16, 32, 3, 2, 64, 0.1), ArgumentError);
}

TEST(AttachLora, WqWvInTwoLayerTransformer) {
  const ModelSpec spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1);
  const ParamVector base = initialize_params(spec, 1);
  const ParamVector copy = base;
  const auto adapters = attach_lora(spec, base, {"Wq", "Wv"}, 8, 8.0, 2);
  ASSERT_EQ(adapters.size(), 4u);
  for (const auto& a : adapters) {
    EXPECT_EQ(a.A.size() + a.B.size(), 8u * (32 + 32));
    EXPECT_EQ(a.param_count(), 512u + 32u);
    for (double b : a.B.data) EXPECT_EQ(b, 0.0);
  }
  EXPECT_EQ(adapter_param_count(adapters), 4u * 544);
  EXPECT_EQ(base, copy);
}

TEST(AttachLora, UnknownTargetIsNameError) {
  const ModelSpec spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1);
  const ParamVector base = initialize_params(spec, 1);
  EXPECT_THROW(attach_lora(spec, base, {"Wz"}, 8, 8.0, 2), NameError);
  EXPECT_THROW(attach_lora(spec, base, {"layer0.ln1"}, 8, 8.0, 2), NameError);
}

TEST(AttachLora, FreshAdaptersLeaveOutputs) {
  const ModelSpec spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1);
  const ParamVector base = initialize_params(spec, 3);
  const auto adapters = attach_lora(spec, base, {"Wq", "Wv"}, 8, 8.0, 4);
  Tensor2 toks(2, 16);
  for (std::size_t i = 0; i < toks.size(); ++i) toks.data[i] = static_cast<double>((i * 7) % 32);
  ForwardOptions o;
  o.adapters = adapters;
  EXPECT_EQ(forward(spec, base, toks, o), forward(spec, base, toks));
}

TEST(ParamCount, LinearInIConstantInD) {
  const ModelSpec spec = build_mlp(784, {128, 64}, 10, 0.1);
  EnsembleShape s;
  EXPECT_EQ(param_count(spec, s).total, 109386u);
  s.I = 3;
  EXPECT_EQ(param_count(spec, s).total, 328158u);
  const std::size_t at_d1 = param_count(spec, s).total;
  s.D = 25;
  EXPECT_EQ(param_count(spec, s).total, at_d1);
}

TEST(ParamCount, LoraAddsAdaptersPerUnit) {
  const ModelSpec spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1);
  EnsembleShape s;
  s.L = 3;
  s.rank = 8;
  s.lora_targets = {"Wq", "Wv"};
  const auto r = param_count(spec, s);
  EXPECT_EQ(r.base, spec.layout().total);
  EXPECT_EQ(r.adapters_per_unit, 4u * 544);
  EXPECT_EQ(r.total, r.base + 3 * 4 * 544);
  std::size_t prev = 0;
  for (std::size_t L = 0; L <= 4; ++L) {
    s.L = L;
    const std::size_t t = param_count(spec, s).total;
    EXPECT_GT(t, prev);
    prev = t;
  }
  EXPECT_THROW(param_count(spec, EnsembleShape{0, 1, 0, 8, {}, true}), ArgumentError);
}

TEST(Initialization, KaimingUniformBounds) {
  const ModelSpec spec = build_mlp(100, {50}, 10, 0.0);
  const ParamVector p = initialize_params(spec, 7);
  const auto& w = p.layout.find("fc1", "W");
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LE(std::abs(p.ptr(w)[i]), 0.1);
  EXPECT_EQ(p, initialize_params(spec, 7));
  EXPECT_NE(p, initialize_params(spec, 8));
}
