#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include <uncertainty/uncertainty.hpp>

#include "support/fixtures.hpp"

using namespace uncertainty;

namespace {

ErrorCode error_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::MalformedRecord;
}

const std::vector<std::vector<double>> kFourByFive = {
    {0.5, 0.3, 0.1, 0.05, 0.05},
    {0.6, 0.35, 0.05, 0.0, 0.0},
    {0.4, 0.3, 0.2, 0.05, 0.05},
    {0.7, 0.3, 0.0, 0.0, 0.0},
};

}  // namespace

TEST(NormalizeRows, DividesBySum) {
  const auto s = normalize_rows(AggregateAttention::from_rows({{2.0, 2.0}}));
  EXPECT_EQ(s.at(0, 0), 0.5);
  EXPECT_EQ(s.at(0, 1), 0.5);
  EXPECT_TRUE(s.normalized());
}

TEST(NormalizeRows, Idempotent) {
  const auto once = normalize_rows(AggregateAttention::from_rows({{0.25, 0.75}, {3.0, 1.0}}));
  EXPECT_EQ(normalize_rows(once), once);
  const auto raw_normalized = AggregateAttention::from_rows({{0.25, 0.75}});
  EXPECT_EQ(normalize_rows(raw_normalized).at(0, 1), 0.75);
}

TEST(NormalizeRows, ZeroRowCarriesIndex) {
  try {
    normalize_rows(AggregateAttention::from_rows({{1.0, 0.0}, {0.0, 0.0}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroRow);
    EXPECT_EQ(e.index(), std::optional<std::size_t>(1));
  }
}

TEST(BlockSet, HandEnumeratedExample) {
  const auto s = normalize_rows(AggregateAttention::from_rows(kFourByFive));
  const auto b = compute_block_set(s, 0.3, 0.05);
  EXPECT_EQ(b.frequency, (std::vector<std::size_t>{4, 4, 0, 0, 0}));
  EXPECT_NEAR(b.column_mass[0], 2.2, 1e-12);
  EXPECT_NEAR(b.column_mass[1], 1.25, 1e-12);
  EXPECT_EQ(b.blocked, (std::vector<std::size_t>{0}));
  EXPECT_TRUE(b.is_blocked(0));
  EXPECT_FALSE(b.is_blocked(1));
}

TEST(BlockSet, AllButOneColumn) {
  const auto s = normalize_rows(AggregateAttention::from_rows(kFourByFive));
  const auto b = compute_block_set(s, 0.3, 0.8);
  EXPECT_EQ(block_count(0.8, 5), 4u);
  EXPECT_EQ(b.blocked.size(), 4u);
  EXPECT_EQ(b.unblocked_count(), 1u);
  EXPECT_EQ(b.blocked, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(BlockSet, ThresholdAboveEveryEntryFallsBackToMass) {
  const auto s = normalize_rows(AggregateAttention::from_rows(kFourByFive));
  const auto b = compute_block_set(s, 0.99, 0.3);
  EXPECT_EQ(b.frequency, (std::vector<std::size_t>(5, 0)));
  EXPECT_EQ(b.blocked, (std::vector<std::size_t>{0, 1}));
}

TEST(BlockSet, EqualMassTiesBreakByPosition) {
  const auto s = normalize_rows(AggregateAttention::from_rows({{0.25, 0.25, 0.25, 0.25}}));
  EXPECT_EQ(compute_block_set(s, 0.5, 0.3).blocked, (std::vector<std::size_t>{0, 1}));
}

TEST(BlockSet, CountUsesCeiling) {
  EXPECT_EQ(block_count(0.05, 20), 1u);
  EXPECT_EQ(block_count(0.05, 21), 2u);
  EXPECT_EQ(block_count(0.05, 60), 3u);
  EXPECT_EQ(block_count(0.05, 100), 5u);
  EXPECT_EQ(default_threshold(40), 0.25);
}

TEST(BlockSet, InvalidSettings) {
  const auto s = normalize_rows(AggregateAttention::from_rows(kFourByFive));
  EXPECT_EQ(error_of([&] { compute_block_set(s, 0.3, 0.0); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_of([&] { compute_block_set(s, 0.3, 1.0); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_of([&] { compute_block_set(s, 0.0, 0.05); }), ErrorCode::InvalidConfig);
}

TEST(AttentionEntropy, UniformOverUnblocked) {
  const auto s = normalize_rows(AggregateAttention::from_rows({{1, 1, 1, 1, 0}}));
  const auto b = compute_block_set(s, 0.5, 0.05);
  // Every column has f = 0; column 0 wins the mass tie by position.
  ASSERT_EQ(b.blocked, (std::vector<std::size_t>{0}));
  const auto r = normalize_rows(AggregateAttention::from_rows({{0, 1, 1, 1, 1}}));
  EXPECT_NEAR(attention_entropy(r.row(0), b), std::log(4.0), 1e-12);
  EXPECT_NEAR(attention_entropy(r.row(0), b), 1.3863, 1e-4);
}

TEST(AttentionEntropy, OneHotUnblocked) {
  BlockSet b;
  b.mask = {true, false, false};
  b.blocked = {0};
  EXPECT_EQ(attention_entropy(std::vector<double>{0.0, 1.0, 0.0}, b), 0.0);
}

TEST(AttentionEntropy, BlockedColumnRemovedThenRenormalized) {
  BlockSet b;
  b.mask = {true, false};
  b.blocked = {0};
  EXPECT_EQ(attention_entropy(std::vector<double>{0.5, 0.5}, b), 0.0);
  EXPECT_NEAR(raw_attention_entropy(std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-12);
}

TEST(AttentionEntropy, AllMassBlocked) {
  BlockSet b;
  b.mask = {true, false};
  b.blocked = {0};
  EXPECT_EQ(error_of([&] { attention_entropy(std::vector<double>{1.0, 0.0}, b); }),
            ErrorCode::AllBlockedMass);
}

TEST(AttentionEntropyProperty, BoundedByUnblockedSupport) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng() % 10, L = 2 + rng() % 60;
    std::vector<std::vector<double>> rows(T, std::vector<double>(L));
    for (auto& r : rows)
      for (auto& v : r) v = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    const auto s = normalize_rows(AggregateAttention::from_rows(rows));
    const auto b = compute_block_set(s, default_threshold(L));
    for (std::size_t t = 0; t < T; ++t) {
      const double h = attention_entropy(s.row(t), b);
      EXPECT_GE(h, 0.0);
      EXPECT_LE(h, std::log(static_cast<double>(L - b.blocked.size())) + 1e-12);
    }
  }
}

TEST(VocabularyProjection, SumsMatchingPositions) {
  const std::vector<TokenId> ids = {7, 9, 7, 4};
  const std::vector<double> row = {0.4, 0.1, 0.3, 0.2};
  const BlockSet none;
  EXPECT_NEAR(vocabulary_projection(row, ids, none, 7), 0.7, 1e-12);
  EXPECT_EQ(vocabulary_projection(row, ids, none, 123), 0.0);
}

TEST(VocabularyProjection, DisjointTargetsSumToAtMostOne) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 3 + rng() % 30;
    std::vector<TokenId> ids(L);
    std::vector<double> row(L);
    for (std::size_t l = 0; l < L; ++l) {
      ids[l] = static_cast<TokenId>(rng() % 6);
      row[l] = std::uniform_real_distribution<double>(0.0, 1.0)(rng) + 1e-3;
    }
    const auto s = normalize_rows(AggregateAttention::from_rows({row}));
    const auto b = compute_block_set(s, 0.2, 0.1);
    double total = 0.0;
    for (TokenId id = 0; id < 6; ++id) total += vocabulary_projection(s.row(0), ids, b, id);
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_LE(vocabulary_projection(s.row(0), ids, b, 0) + vocabulary_projection(s.row(0), ids, b, 1),
              1.0 + 1e-12);
  }
}

TEST(BucketAccumulator, OccupiedBucketsOnly) {
  BucketAccumulator acc(0.25);
  acc.add(0.1, 1.0);
  acc.add(0.2, 3.0);
  acc.add(1.0, 5.0);
  const auto out = acc.finalize();
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].index, 0);
  EXPECT_EQ(out[0].mean, 2.0);
  EXPECT_EQ(out[0].count, 2u);
  EXPECT_EQ(out[1].index, 4);
  EXPECT_EQ(out[1].lo, 1.0);
  EXPECT_EQ(out[1].hi, 1.25);
}

namespace {

// Source of L = 40 with two sink columns that soak up most attention; the
// remaining mass is spread evenly over m content columns.
TraceDocument coupled_document(const std::vector<std::size_t>& spreads) {
  TraceDocument doc;
  doc.doc_id = "coupled";
  const std::size_t L = 40;
  for (std::size_t l = 0; l < L; ++l)
    doc.source_tokens.push_back({l, static_cast<TokenId>(1000 + l), " s", true});
  TokenId next_id = 1;
  for (std::size_t t = 0; t < spreads.size(); ++t) {
    const std::size_t m = spreads[t];
    const std::size_t k = m * m;  // prediction support
    StepRecord step;
    step.step_index = t;
    step.output_token_id = next_id;
    step.output_piece = " w";
    for (std::size_t i = 0; i < k; ++i)
      step.topk.push_back({next_id++, 1.0 / static_cast<double>(k)});
    step.attention_row.assign(L, 0.0);
    step.attention_row[0] = 0.3;
    step.attention_row[1] = 0.3;
    for (std::size_t j = 0; j < m; ++j)
      step.attention_row[2 + (t + j) % (L - 2)] = 0.4 / static_cast<double>(m);
    doc.steps.push_back(std::move(step));
  }
  return doc;
}

}  // namespace

TEST(AttentionVsPrediction, PlantedMonotoneCoupling) {
  std::vector<std::size_t> spreads;
  for (int rep = 0; rep < 3; ++rep)
    for (std::size_t m = 1; m <= 8; ++m) spreads.push_back(m);
  const std::vector<TraceDocument> docs = {coupled_document(spreads)};
  AttentionOptions options;
  options.nucleus_p = 1.0;
  const auto curve = attention_vs_prediction(docs, options);
  ASSERT_EQ(curve.size(), 8u);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double m = static_cast<double>(i + 1);
    EXPECT_NEAR(curve[i].mean, std::log(m), 1e-9);
    EXPECT_EQ(curve[i].count, 3u);
    if (i > 0) {
      EXPECT_GT(curve[i].mean, curve[i - 1].mean);
    }
  }
}

TEST(AttentionVsPrediction, IdenticalStepsShareOneBucket) {
  const std::vector<TraceDocument> docs = {coupled_document(std::vector<std::size_t>(6, 3))};
  AttentionOptions options;
  options.nucleus_p = 1.0;
  const auto curve = attention_vs_prediction(docs, options);
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_NEAR(curve[0].mean, std::log(3.0), 1e-9);
  EXPECT_EQ(curve[0].count, 6u);
}

TEST(AttentionVsPrediction, LowEntropyStepsWithPeakedAttention) {
  SynthConfig config;
  config.target_steps = 300;
  const auto docs = synthetic_corpus(config, 5, 9);
  const auto curve = attention_vs_prediction(docs);
  ASSERT_FALSE(curve.empty());
  EXPECT_EQ(curve.front().index, 0);
  EXPECT_LT(curve.front().mean, 0.1);
}

TEST(VocabularyProjectionCurves, CopiedTokenDominatesAtOffsetZero) {
  SynthConfig config;
  config.target_steps = 300;
  const auto docs = synthetic_corpus(config, 5, 10);
  const auto curves = vocabulary_projection_curves(docs);
  ASSERT_EQ(curves.size(), 4u);
  EXPECT_EQ(curves[2].offset, 0);
  EXPECT_EQ(curves[3].offset, 1);
  ASSERT_FALSE(curves[2].buckets.empty());
  ASSERT_FALSE(curves[3].buckets.empty());
  EXPECT_EQ(curves[2].buckets.front().index, 0);
  EXPECT_GT(curves[2].buckets.front().mean, curves[3].buckets.front().mean);
}

TEST(AttentionAccumulator, SkipsStepsWithNoUnblockedMass) {
  auto doc = fixtures::doc_from_words({"a", "b", "c"}, {"a", "b", "c"});
  doc.steps[1].attention_row = {1.0, 0.0, 0.0};
  AttentionOptions options;
  options.q = 0.5;
  options.block_fraction = 0.3;  // blocks column 0, the only one ever above q
  AttentionAccumulator acc;
  acc.add(doc, prediction_entropies(doc), options);
  EXPECT_EQ(acc.skipped_steps(), 1u);
  const auto curve = acc.attention_entropy_curve();
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_EQ(curve[0].count, 2u);
}
