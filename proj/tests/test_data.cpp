#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "tdaens/artifact.hpp"
#include "tdaens/data.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/persist.hpp"
#include "tdaens/training.hpp"

using namespace tdaens;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tdaens_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx(const fs::path& images, const fs::path& labels, std::uint32_t n, std::uint32_t image_magic = 0x803,
               std::uint32_t label_magic = 0x801) {
  std::ofstream fi(images, std::ios::binary);
  put_be32(fi, image_magic);
  put_be32(fi, n);
  put_be32(fi, 28);
  put_be32(fi, 28);
  for (std::uint32_t i = 0; i < n * 784; ++i) fi.put(static_cast<char>(i % 256));
  std::ofstream fl(labels, std::ios::binary);
  put_be32(fl, label_magic);
  put_be32(fl, n);
  for (std::uint32_t i = 0; i < n; ++i) fl.put(static_cast<char>(i % 10));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Mnist, TenLabelFile) {
  write_idx(scratch("i10"), scratch("l10"), 10);
  const Dataset d = load_mnist_idx(scratch("i10"), scratch("l10"));
  EXPECT_EQ(d.size(), 10u);
  EXPECT_EQ(d.inputs.cols, 784u);
  EXPECT_EQ(d.num_classes, 10u);
  EXPECT_EQ(d.targets[7], 7);
  EXPECT_DOUBLE_EQ(d.inputs(0, 255), 1.0);
  EXPECT_DOUBLE_EQ(d.inputs(0, 0), 0.0);
}

TEST(Mnist, WrongMagicIsFormatError) {
  write_idx(scratch("ibad"), scratch("lbad"), 3, 0x803, 0x803);
  EXPECT_THROW(load_mnist_idx(scratch("ibad"), scratch("lbad")), FormatError);
  write_idx(scratch("ibad2"), scratch("lbad2"), 3, 0x801, 0x801);
  EXPECT_THROW(load_mnist_idx(scratch("ibad2"), scratch("lbad2")), FormatError);
}

TEST(Mnist, TruncatedFileIsFormatError) {
  write_idx(scratch("itr"), scratch("ltr"), 4);
  fs::resize_file(scratch("itr"), fs::file_size(scratch("itr")) - 1);
  try {
    load_mnist_idx(scratch("itr"), scratch("ltr"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

TEST(Mnist, LimitTakesPrefixOfBundledSubset) {
  const fs::path dir = TDAENS_DATA_DIR;
  const Dataset full = load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  const Dataset d = load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", 1000);
  EXPECT_EQ(d.size(), 1000u);
  EXPECT_EQ(d.inputs.rows, 1000u);
  EXPECT_EQ(d.inputs.cols, 784u);
  EXPECT_EQ(d.targets.size(), 1000u);
  EXPECT_TRUE(std::equal(d.targets.begin(), d.targets.end(), full.targets.begin()));
  EXPECT_TRUE(std::equal(d.inputs.data.begin(), d.inputs.data.end(), full.inputs.data.begin()));
  for (double v : d.inputs.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(SyntheticClassification, Deterministic) {
  const Dataset a = gen_synthetic_classification(50, 3, 2, 2.0, 0.1, 9);
  const Dataset b = gen_synthetic_classification(50, 3, 2, 2.0, 0.1, 9);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_NE(a.inputs, gen_synthetic_classification(50, 3, 2, 2.0, 0.1, 10).inputs);
}

TEST(SyntheticClassification, ZeroSeparationIsChance) {
  double acc = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Dataset d = gen_synthetic_classification(600, 4, 2, 0.0, 0.0, s);
    const Dataset train = d.slice(0, 300), test = d.slice(300, 600);
    TrainConfig tc;
    tc.epochs = 20;
    tc.seed = s;
    const ModelSpec spec = build_linear(4, 2);
    acc += accuracy(spec, train_member(spec, train, tc, 0).params, test);
  }
  EXPECT_NEAR(acc / 3, 0.5, 0.1);
}

TEST(SyntheticClassification, WellSeparatedIsLinearlySolvable) {
  const Dataset d = gen_synthetic_classification(400, 2, 2, 10.0, 0.0, 4);
  const Dataset train = d.slice(0, 200), test = d.slice(200, 400);
  TrainConfig tc;
  tc.epochs = 20;
  const ModelSpec spec = build_linear(2, 2);
  const auto m = train_member(spec, train, tc, 0);
  EXPECT_GT(accuracy(spec, m.params, test), 0.99);
}

TEST(SyntheticSequences, CopyTaskTargets) {
  const Dataset d = gen_synthetic_sequences(20, 4, 9, SequenceGenerator::Copy, 1, 3);
  EXPECT_EQ(d.kind, DatasetKind::Sequence);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto t = d.sample_targets(i);
    EXPECT_EQ(t[0], static_cast<int>(d.inputs(i, 0)));
    for (std::size_t p = 1; p < 9; ++p) EXPECT_EQ(t[p], static_cast<int>(d.inputs(i, p - 1)));
  }
}

TEST(SyntheticSequences, MarkovBigramsWithinThreeSigma) {
  const std::size_t vocab = 6;
  const Dataset d = gen_synthetic_sequences(1000, vocab, 100, SequenceGenerator::Markov, 1, 11);
  const Tensor2 P = markov_transition_matrix(vocab, 1, 11);
  std::vector<double> count(vocab * vocab, 0.0), from(vocab, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto t = d.sample_targets(i);
    for (std::size_t p = 0; p < 100; ++p) {
      const auto a = static_cast<std::size_t>(d.inputs(i, p));
      count[a * vocab + static_cast<std::size_t>(t[p])] += 1;
      from[a] += 1;
    }
  }
  for (std::size_t a = 0; a < vocab; ++a) {
    double row = 0;
    for (std::size_t b = 0; b < vocab; ++b) {
      row += P(a, b);
      const double mean = from[a] * P(a, b);
      const double sigma = std::sqrt(from[a] * P(a, b) * (1 - P(a, b)));
      EXPECT_LE(std::abs(count[a * vocab + b] - mean), 3 * sigma + 1e-9) << a << "->" << b;
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(SyntheticSequences, Deterministic) {
  const Dataset a = gen_synthetic_sequences(10, 8, 12, SequenceGenerator::Markov, 1, 5);
  const Dataset b = gen_synthetic_sequences(10, 8, 12, SequenceGenerator::Markov, 1, 5);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_NO_THROW(a.validate());
}

TEST(Artifact, ParamVectorRoundTripIsBitExact) {
  const ModelSpec spec = build_mlp(7, {5, 3}, 4, 0.1);
  const ParamVector p = initialize_params(spec, 12);
  save_params(scratch("p.art"), p, "abc");
  const std::string bytes = read_bytes(scratch("p.art"));
  const ParamVector q = load_params(scratch("p.art"));
  EXPECT_EQ(p, q);
  save_params(scratch("p2.art"), q, "abc");
  EXPECT_EQ(bytes, read_bytes(scratch("p2.art")));
}

TEST(Artifact, TruncatedPayloadIsCorruption) {
  save_artifact(scratch("t.art"), "blob", nlohmann::json::object(), std::vector<double>{1.0, 2.0, 3.0});
  fs::resize_file(scratch("t.art"), fs::file_size(scratch("t.art")) - 1);
  EXPECT_THROW(load_artifact(scratch("t.art")), CorruptionError);
}

TEST(Artifact, FlippedPayloadBitIsCorruption) {
  std::string bytes = encode_artifact("blob", nlohmann::json::object(), std::vector<double>{1.0, 2.0});
  bytes.back() ^= 1;
  EXPECT_THROW(decode_artifact(bytes), CorruptionError);
}

TEST(Artifact, FutureVersionIsMigrationError) {
  std::string bytes = encode_artifact("blob", nlohmann::json::object(), std::vector<double>{1.0});
  const auto at = bytes.find("\"version\":1");
  ASSERT_NE(at, std::string::npos);
  bytes[at + 10] = '9';
  EXPECT_THROW(decode_artifact(bytes), MigrationError);
}

TEST(Artifact, BadMagicIsFormatError) {
  std::string bytes = encode_artifact("blob", nlohmann::json::object(), std::vector<double>{1.0});
  bytes[0] = 'X';
  EXPECT_THROW(decode_artifact(bytes), FormatError);
}

TEST(Persist, DigestExpectationIsChecked) {
  const ParamVector p = initialize_params(build_linear(3, 2), 1);
  save_params(scratch("d.art"), p, "digest-a");
  EXPECT_NO_THROW(load_params(scratch("d.art"), std::string("digest-a")));
  EXPECT_THROW(load_params(scratch("d.art"), std::string("digest-b")), ConfigError);
}

TEST(Persist, WrongKindIsFormatError) {
  const ParamVector p = initialize_params(build_linear(3, 2), 1);
  save_params(scratch("k.art"), p, "x");
  EXPECT_THROW(load_attribution(scratch("k.art")), FormatError);
}

TEST(Persist, AdaptersRoundTrip) {
  const ModelSpec spec = build_tiny_transformer(10, 4, 8, 2, 2, 16, 0.1);
  const ParamVector base = initialize_params(spec, 2);
  auto adapters = attach_lora(spec, base, {"Wq", "Wv"}, 2, 4.0, 3);
  for (auto& a : adapters)
    for (std::size_t i = 0; i < a.B.size(); ++i) a.B.data[i] = 0.1 * static_cast<double>(i);
  save_adapters(scratch("a.art"), adapters, "x");
  EXPECT_EQ(load_adapters(scratch("a.art")), adapters);
}

TEST(Persist, FeaturePackRoundTrip) {
  FeaturePack p;
  p.member_id = 3;
  p.unit_index = 7;
  p.projection_seed = 0xfeedbeefcafe1234ULL;
  p.proj_dim = 2;
  p.Phi = Tensor2::from_rows({{1, 2}, {3, 4}, {5, 6}});
  p.phi_test = Tensor2::from_rows({{0.1, -0.2}});
  p.Q = {0.25, 0.5, 1.0 / 3.0};
  p.lambda = 1e-7;
  save_feature_pack(scratch("f.art"), p, "x");
  const FeaturePack q = load_feature_pack(scratch("f.art"));
  EXPECT_EQ(q.member_id, p.member_id);
  EXPECT_EQ(q.unit_index, p.unit_index);
  EXPECT_EQ(q.projection_seed, p.projection_seed);
  EXPECT_EQ(q.proj_dim, p.proj_dim);
  EXPECT_EQ(q.Phi, p.Phi);
  EXPECT_EQ(q.phi_test, p.phi_test);
  EXPECT_EQ(q.Q, p.Q);
  EXPECT_EQ(q.lambda, p.lambda);
}

TEST(Persist, AttributionRoundTrip) {
  AttributionMatrix m;
  m.scores = Tensor2::from_rows({{1.5, -2.0}, {0.0, 1e-300}});
  m.method = Method::GradCos;
  m.config_digest = "cfg";
  m.flags["zero_norm_gradient_entries"] = 2;
  save_attribution(scratch("m.art"), m);
  const AttributionMatrix r = load_attribution(scratch("m.art"), std::string("cfg"));
  EXPECT_EQ(r.scores, m.scores);
  EXPECT_EQ(r.method, m.method);
  EXPECT_EQ(r.flags, m.flags);
  EXPECT_EQ(encode_attribution(r), encode_attribution(m));
}

TEST(Persist, GroundTruthRoundTrip) {
  LdsGroundTruth gt;
  gt.subsets = {{0, 2}, {1, 2}};
  gt.outputs = Tensor2::from_rows({{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}});
  gt.alpha = 0.5;
  gt.m = 2;
  gt.seed = 99;
  gt.output_fn = OutputFnKind::LogLikelihood;
  gt.config_digest = "gt";
  save_ground_truth(scratch("g.art"), gt);
  const LdsGroundTruth r = load_ground_truth(scratch("g.art"));
  EXPECT_EQ(r.subsets, gt.subsets);
  EXPECT_EQ(r.outputs, gt.outputs);
  EXPECT_EQ(r.alpha, gt.alpha);
  EXPECT_EQ(r.seed, gt.seed);
  EXPECT_EQ(r.output_fn, gt.output_fn);
  EXPECT_EQ(r.config_digest, gt.config_digest);
}
