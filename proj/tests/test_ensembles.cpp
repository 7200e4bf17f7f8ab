#include <gtest/gtest.h>

#include <algorithm>

#include "test_util.hpp"
#include "tdaens/data.hpp"
#include "tdaens/ensembles.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/persist.hpp"

using namespace tdaens;
using namespace tdaens::testing;

namespace {

struct Fixture {
  ModelSpec spec = build_mlp(5, {12, 8}, 3, 0.2);
  Dataset train, test;
  std::vector<TrainedMember> members;
};

const Fixture& fixture() {
  static const Fixture s = [] {
    Fixture s;
    const Dataset all = gen_synthetic_classification(50, 5, 3, 2.0, 0.1, 1);
    s.train = all.slice(0, 40);
    s.test = all.slice(40, 50);
    TrainConfig c;
    c.epochs = 6;
    c.subset_fraction = 0.5;
    c.seed = 3;
    c.checkpoint_epochs = {2, 4, 6};
    for (std::size_t i = 0; i < 2; ++i) s.members.push_back(train_member(s.spec, s.train, c, i));
    return s;
  }();
  return s;
}

EnsembleConfig base_config(Strategy s, Method m, std::size_t D = 1) {
  EnsembleConfig c;
  c.strategy = s;
  c.method = m;
  c.I = 2;
  c.D = D;
  c.seed = 17;
  c.trak.projection.dim = 32;
  c.influence.max_iters = 30;
  c.influence.damping = 1e-2;
  return c;
}

EnsembleRun run(const EnsembleConfig& c) {
  const Fixture& s = fixture();
  return run_ensemble(s.spec, s.members, s.train, s.test, c);
}

}  // namespace

TEST(AggregateAverage, Arithmetic) {
  AttributionMatrix a, b, c;
  a.scores = Tensor2::from_rows({{1}});
  b.scores = Tensor2::from_rows({{2}});
  c.scores = Tensor2::from_rows({{6}});
  const AttributionMatrix three[] = {a, b, c};
  EXPECT_EQ(aggregate_average(three).scores(0, 0), 3.0);
  const AttributionMatrix one[] = {a};
  EXPECT_EQ(aggregate_average(one), a);
  AttributionMatrix m, neg;
  m.scores = Tensor2::from_rows({{1.5, -2}, {0.25, 4}});
  neg.scores = m.scores;
  for (double& v : neg.scores.data) v = -v;
  const AttributionMatrix pair[] = {m, neg};
  for (double v : aggregate_average(pair).scores.data) EXPECT_EQ(v, 0.0);
  AttributionMatrix wrong;
  wrong.scores = Tensor2(3, 1);
  const AttributionMatrix bad[] = {a, wrong};
  EXPECT_THROW(aggregate_average(bad), ShapeError);
}

TEST(ReductionLattice, DropoutWithIdentityMaskIsNaive) {
  for (Method m : {Method::Trak, Method::InfluenceCg, Method::GradDot, Method::GradCos}) {
    EnsembleConfig d = base_config(Strategy::Dropout, m);
    d.identity_masks = true;
    const AttributionMatrix naive = run(base_config(Strategy::Naive, m)).attribution;
    const AttributionMatrix drop = run(d).attribution;
    EXPECT_EQ(encode_attribution(naive), encode_attribution(drop)) << to_string(m);
  }
}

TEST(ReductionLattice, ForwardOnlyWithIdentityMaskIsNaiveTrak) {
  EnsembleConfig f = base_config(Strategy::DropoutForwardOnly, Method::Trak);
  f.identity_masks = true;
  EXPECT_EQ(encode_attribution(run(f).attribution),
            encode_attribution(run(base_config(Strategy::Naive, Method::Trak)).attribution));
}

TEST(ReductionLattice, FinalCheckpointIsNaive) {
  EnsembleConfig c = base_config(Strategy::Checkpoints, Method::Trak);
  c.checkpoint_epochs = {6};
  EXPECT_EQ(encode_attribution(run(c).attribution),
            encode_attribution(run(base_config(Strategy::Naive, Method::Trak)).attribution));
}

TEST(Checkpoints, DuplicatedEpochsMatchSingle) {
  for (Method m : {Method::Trak, Method::GradDot}) {
    EnsembleConfig one = base_config(Strategy::Checkpoints, m);
    one.checkpoint_epochs = {4};
    EnsembleConfig three = one;
    three.checkpoint_epochs = {4, 4, 4};
    EXPECT_LT(rel_error(run(one).attribution.scores, run(three).attribution.scores), 1e-14);
  }
}

TEST(Checkpoints, ThreeEpochsTimesTenMasksIsThirtyUnits) {
  EnsembleConfig c = base_config(Strategy::Checkpoints, Method::GradDot, 10);
  c.I = 1;
  c.checkpoint_epochs = {2, 4, 6};
  const Fixture& s = fixture();
  const EnsembleRun r = run_ensemble(s.spec, std::span(s.members).subspan(0, 1), s.train, s.test, c);
  EXPECT_EQ(r.units, 30u);
  EXPECT_TRUE(r.attribution.scores.all_finite());
  EXPECT_TRUE(verify_ledger({Strategy::Checkpoints, 1, 10, 1, 3}, Method::GradDot, 40, 10, r.ledger).passed());
}

TEST(Checkpoints, MissingEpochIsError) {
  EnsembleConfig c = base_config(Strategy::Checkpoints, Method::Trak);
  c.checkpoint_epochs = {5};
  EXPECT_THROW(run(c), ConfigError);
}

TEST(Aggregation, PermutationInvariant) {
  const Fixture& s = fixture();
  for (Method m : {Method::Trak, Method::GradCos}) {
    const auto units = compute_units(s.spec, s.members, s.train, s.test, base_config(Strategy::Dropout, m, 3));
    auto shuffled = units;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 2, shuffled.end());
    EXPECT_EQ(aggregate_units(units, m), aggregate_units(shuffled, m));
  }
}

TEST(Aggregation, MemberOrderDoesNotMatter) {
  const Fixture& s = fixture();
  const std::vector<TrainedMember> reversed{s.members[1], s.members[0]};
  const EnsembleConfig c = base_config(Strategy::Dropout, Method::Trak, 2);
  EXPECT_EQ(run_ensemble(s.spec, s.members, s.train, s.test, c).attribution,
            run_ensemble(s.spec, reversed, s.train, s.test, c).attribution);
}

TEST(Aggregation, PrefixReproducesSmallerD) {
  const Fixture& s = fixture();
  const auto units = compute_units(s.spec, s.members, s.train, s.test, base_config(Strategy::Dropout, Method::Trak, 4));
  EXPECT_EQ(aggregate_units(units, Method::Trak, 2), run(base_config(Strategy::Dropout, Method::Trak, 2)).attribution);
}

TEST(Aggregation, ThreadCountDoesNotChangeBits) {
  EnsembleConfig a = base_config(Strategy::Dropout, Method::InfluenceCg, 2);
  EnsembleConfig b = a;
  b.jobs = 3;
  EXPECT_EQ(run(a).attribution, run(b).attribution);
}

TEST(ForwardOnly, BackwardPassesIndependentOfD) {
  const CostLedger d1 = run(base_config(Strategy::DropoutForwardOnly, Method::Trak, 1)).ledger;
  const CostLedger d5 = run(base_config(Strategy::DropoutForwardOnly, Method::Trak, 5)).ledger;
  EXPECT_EQ(d1.serve_backward, d5.serve_backward);
  EXPECT_EQ(d1.serve_backward, 2u * (40 + 10));
  EXPECT_EQ(d5.serve_forward, 5 * d1.serve_forward);
  const CostLedger v1 = run(base_config(Strategy::Dropout, Method::Trak, 1)).ledger;
  const CostLedger v2 = run(base_config(Strategy::Dropout, Method::Trak, 2)).ledger;
  EXPECT_EQ(v2.serve_backward, 2 * v1.serve_backward);
}

TEST(ForwardOnly, SharesNaiveTermExactly) {
  const Fixture& s = fixture();
  const auto naive = compute_units(s.spec, s.members, s.train, s.test, base_config(Strategy::Naive, Method::Trak));
  const auto fo =
      compute_units(s.spec, s.members, s.train, s.test, base_config(Strategy::DropoutForwardOnly, Method::Trak, 3));
  std::size_t with_term = 0;
  for (const auto& u : fo) {
    if (!u.term) continue;
    ++with_term;
    EXPECT_EQ(u.key.pass, 1u);
    const auto it = std::find_if(naive.begin(), naive.end(), [&](const UnitResult& n) { return n.key == u.key; });
    ASSERT_NE(it, naive.end());
    EXPECT_EQ(*u.term, *it->term);
  }
  EXPECT_EQ(with_term, 2u);
  EXPECT_EQ(fo.size(), 6u);
}

TEST(Ledger, VerifiesForEveryStrategyAndMethod) {
  for (Method m : {Method::Trak, Method::InfluenceCg, Method::GradDot, Method::GradCos})
    for (Strategy s : {Strategy::Naive, Strategy::Dropout, Strategy::DropoutForwardOnly, Strategy::Checkpoints}) {
      if (s == Strategy::DropoutForwardOnly && m != Method::Trak) continue;
      EnsembleConfig c = base_config(s, m, s == Strategy::Naive ? 1 : 3);
      if (s == Strategy::Checkpoints) c.checkpoint_epochs = {2, 6};
      const EnsembleRun r = run(c);
      const auto report = verify_ledger({s, 2, c.D, 1, c.checkpoint_epochs.size()}, m, 40, 10, r.ledger);
      EXPECT_TRUE(report.passed()) << to_string(s) << "/" << to_string(m) << "\n" << report.failures();
    }
}

TEST(Ledger, InfluenceCountsHvps) {
  const EnsembleRun r = run(base_config(Strategy::Naive, Method::InfluenceCg));
  EXPECT_GT(r.ledger.serve_hvp, 0u);
  EXPECT_EQ(r.ledger.serve_hvp % 40, 0u);
}

TEST(Validation, IncompatibleCombinations) {
  const Fixture& s = fixture();
  EXPECT_THROW(base_config(Strategy::DropoutForwardOnly, Method::GradCos).validate(s.spec), ConfigError);
  const ModelSpec nodrop = build_mlp(5, {4}, 3, 0.0);
  EXPECT_THROW(base_config(Strategy::Dropout, Method::Trak, 2).validate(nodrop), ConfigError);
  EXPECT_NO_THROW(base_config(Strategy::Dropout, Method::Trak, 1).validate(nodrop));
  EnsembleConfig wrong_i = base_config(Strategy::Naive, Method::Trak);
  wrong_i.I = 3;
  EXPECT_THROW(run(wrong_i), ConfigError);
  EnsembleConfig lora = base_config(Strategy::Lora, Method::Trak);
  EXPECT_ANY_THROW(lora.validate(s.spec));
}

TEST(SeedHelpers, DistinctPerUnit) {
  EXPECT_NE(unit_projection_seed(1, 0, 1), unit_projection_seed(1, 0, 2));
  EXPECT_NE(unit_projection_seed(1, 0, 1), unit_projection_seed(1, 1, 1));
  EXPECT_NE(unit_projection_seed(1, 0, 1), unit_projection_seed(2, 0, 1));
  EXPECT_NE(unit_mask_seed(1, 0), unit_mask_seed(1, 1));
  EXPECT_NE(unit_adapter_seed(1, 0, 1), unit_adapter_seed(1, 0, 2));
}

TEST(Lora, ZeroEpochUnitsUseAdapterGradients) {
  const ModelSpec spec = build_tiny_transformer(32, 8, 32, 2, 2, 64, 0.1);
  const Dataset train = gen_synthetic_sequences(12, 32, 8, SequenceGenerator::Markov, 1, 2);
  const Dataset test = gen_synthetic_sequences(3, 32, 8, SequenceGenerator::Markov, 1, 3);
  TrainConfig tc;
  tc.epochs = 1;
  const std::vector<TrainedMember> members{train_member(spec, train, tc, 0)};
  EnsembleConfig c;
  c.strategy = Strategy::Lora;
  c.method = Method::GradDot;
  c.L = 1;
  c.lora_train.epochs = 0;
  const EnsembleRun r = run_lora_ensemble(spec, members, train, test, c);
  ASSERT_EQ(r.adapters.size(), 1u);
  EXPECT_EQ(adapter_param_count(r.adapters[0]), 4u * 544);
  for (const auto& a : r.adapters[0])
    for (double b : a.B.data) EXPECT_EQ(b, 0.0);
  ModelView v{&spec, &members[0].params, nullptr, r.adapters[0], GradSpace::AdapterOnly};
  EXPECT_EQ(v.grad_dim(), 4u * 544);
  EXPECT_EQ(r.attribution.scores.rows, 12u);
  EXPECT_EQ(r.attribution.scores.cols, 3u);
  EXPECT_TRUE(r.attribution.scores.all_finite());
  EXPECT_EQ(r.attribution, attribute_single(v, train, test, c, unit_projection_seed(c.seed, 0, 1)));
}

TEST(Lora, LedgerAndBaseUntouched) {
  const ModelSpec spec = build_tiny_transformer(16, 6, 16, 2, 2, 32, 0.1);
  const Dataset train = gen_synthetic_sequences(16, 16, 6, SequenceGenerator::Markov, 1, 4);
  const Dataset test = gen_synthetic_sequences(4, 16, 6, SequenceGenerator::Markov, 1, 5);
  TrainConfig tc;
  tc.epochs = 2;
  const std::vector<TrainedMember> members{train_member(spec, train, tc, 0)};
  const ParamVector before = members[0].params;
  EnsembleConfig c;
  c.strategy = Strategy::Lora;
  c.method = Method::Trak;
  c.L = 3;
  c.trak.projection.dim = 16;
  c.lora_train.epochs = 2;
  c.lora_train.lr = 1e-3;
  const EnsembleRun r = run_lora_ensemble(spec, members, train, test, c);
  EXPECT_EQ(members[0].params, before);
  EXPECT_EQ(r.units, 3u);
  EXPECT_EQ(r.ledger.lora_fine_tune_runs, 3u);
  EXPECT_TRUE(verify_ledger({Strategy::Lora, 1, 1, 3, 1}, Method::Trak, 16, 4, r.ledger).passed());
  EXPECT_NE(r.adapters[0], r.adapters[1]);
}
