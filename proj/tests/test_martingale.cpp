#include <gtest/gtest.h>

#include "gauntlet/martingale.hpp"

using namespace gauntlet;

namespace {

const Vocabulary& vocab() { return Vocabulary::default_vocabulary(); }

AuditConfig fixed_scale(double z_scale) {
  AuditConfig cfg;
  cfg.z_scale = z_scale;
  return cfg;
}

McEstimate est(double mean) { return McEstimate{mean, 64, 0}; }

const Corpus& small_corpus() {
  static const Corpus c = generate_synthetic(300, LengthStats{200.0, 100.0}, 21);
  return c;
}

EstimateTable flat_table(std::size_t n, TokenCount honest, double estimate) {
  EstimateTable t;
  t.honest.assign(n, honest);
  t.estimate.assign(n, est(estimate));
  return t;
}

}  // namespace

TEST(AuditStep, BetArithmetic) {
  const auto cfg = fixed_scale(100.0);
  auto s = audit_step({}, 100, est(0.0), cfg);
  EXPECT_EQ(s.m_current, 1.5);
  EXPECT_EQ(s.z.back(), 100.0);
  s = audit_step({}, 0, est(300.0), cfg);
  EXPECT_EQ(s.z_clipped.back(), -100.0);
  EXPECT_EQ(s.m_current, 0.5);
  EXPECT_THROW(audit_step({}, 1, est(0.0), AuditConfig{}), DomainError);
}

TEST(AuditStep, ThresholdCrossing) {
  const auto cfg = fixed_scale(100.0);
  EXPECT_EQ(cfg.threshold(), 20.0);
  AuditTrajectory s;
  s.m_current = 20.5;
  s = audit_step(std::move(s), 50, est(50.0), cfg);
  ASSERT_TRUE(s.flagged());
  EXPECT_EQ(*s.flagged_at, 1u);
  AuditTrajectory at20;
  at20.m_current = 20.0;
  EXPECT_FALSE(audit_step(std::move(at20), 50, est(50.0), cfg).flagged());
}

TEST(AuditStep, FlagNeverUnset) {
  const auto cfg = fixed_scale(10.0);
  AuditTrajectory s;
  for (int i = 0; i < 10; ++i) s = audit_step(std::move(s), 100, est(0.0), cfg);
  ASSERT_TRUE(s.flagged());
  const auto first = *s.flagged_at;
  for (int i = 0; i < 50; ++i) s = audit_step(std::move(s), 0, est(100.0), cfg);
  EXPECT_LT(s.m_current, cfg.threshold());
  EXPECT_EQ(*s.flagged_at, first);
}

TEST(AuditStep, AlwaysPositive) {
  const auto cfg = fixed_scale(5.0);
  AuditTrajectory s;
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    s = audit_step(std::move(s), 0, est(1e6 * uniform_real(rng)), cfg);
    ASSERT_GT(s.m_current, 0.0);
  }
}

TEST(RunAudit, AllInflateClosedForm) {
  // Every factor is 1 + lambda0 = 1.5: 1.5^7 ~ 17.1 <= 20 < 1.5^8 ~ 25.6.
  const auto t = run_audit(flat_table(20, 0, 0.0), ReportStrategy::periodic(1000, 1), fixed_scale(100.0));
  ASSERT_TRUE(t.flagged());
  EXPECT_EQ(*t.flagged_at, 8u);
  EXPECT_DOUBLE_EQ(t.m[6], std::pow(1.5, 7));
  EXPECT_DOUBLE_EQ(t.m[7], std::pow(1.5, 8));

  // Same closed form for other (lambda0, alpha): smallest t with (1+l)^t > 1/a.
  for (double lambda0 : {0.2, 0.5, 0.9}) {
    for (double alpha : {0.01, 0.05, 0.1}) {
      auto cfg = fixed_scale(10.0);
      cfg.lambda0 = lambda0;
      cfg.alpha = alpha;
      std::size_t expect = 1;
      double m = 1.0 + lambda0;
      while (!(m > 1.0 / alpha)) m *= 1.0 + lambda0, ++expect;
      EXPECT_EQ(run_audit(flat_table(200, 0, 0.0), ReportStrategy::periodic(50, 1), cfg).flagged_at, expect);
    }
  }
}

TEST(RunAudit, HonestDominance) {
  const auto table = estimate_corpus(vocab(), small_corpus(), 64, 5);
  for (const auto& cfg : {AuditConfig{}, fixed_scale(20.0)}) {
    const auto t = run_audit(table, ReportStrategy::honest_reporting(), cfg);
    ASSERT_EQ(t.size(), small_corpus().size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      ASSERT_LE(t.z[i], 0.0) << i;
      if (i > 0) ASSERT_LE(t.m[i], t.m[i - 1]);
    }
    EXPECT_FALSE(t.flagged());
    EXPECT_EQ(t.net_inflation(), 0);
  }
}

TEST(RunAudit, HonestCount) {
  const Vocabulary v0({"a", "b", "ab", "aa"}, "#");
  EXPECT_EQ(honest_count(v0, TraceRecord{"r", "", "aab", ""}), 2);
  EXPECT_EQ(honest_count(v0, TraceRecord{"r", "", "", ""}), 0);
}

TEST(RunAudit, UnambiguousCorpusStaysAtOne) {
  const Vocabulary singles({"a", "b", "c", " "}, "#");
  const auto corpus = generate_synthetic(80, LengthStats{60.0, 20.0}, 2, singles);
  for (const auto& cfg : {AuditConfig{}, fixed_scale(10.0)}) {
    const auto t = run_audit(singles, corpus, ReportStrategy::honest_reporting(), cfg, 4);
    for (std::size_t i = 0; i < t.size(); ++i) {
      ASSERT_EQ(t.z[i], 0.0);
      ASSERT_EQ(t.m[i], 1.0);
    }
  }
  EXPECT_EQ(run_audit(singles, corpus, ReportStrategy::honest_reporting(), AuditConfig{}, 4).z_scale, 1.0);
}

TEST(RunAudit, AutoScalePrefix) {
  const auto table = estimate_corpus(vocab(), small_corpus(), 64, 6);
  const auto t = run_audit(table, ReportStrategy::periodic(500), AuditConfig{});
  EXPECT_EQ(t.calibration_prefix, 50u);
  std::vector<double> mags;
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(t.z_clipped[i], 0.0);
    EXPECT_EQ(t.m[i], 1.0);
    mags.push_back(std::abs(t.z[i]));
  }
  EXPECT_DOUBLE_EQ(t.z_scale, quantile(mags, 0.95));
  EXPECT_GT(t.z_scale, 0.0);
  for (std::size_t i = 50; i < t.size(); ++i) EXPECT_LE(std::abs(t.z_clipped[i]), t.z_scale);
}

TEST(RunAudit, Quantile) {
  EXPECT_EQ(quantile({1, 2, 3, 4, 5}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile({0, 10}, 0.95), 9.5);
  EXPECT_EQ(quantile({7}, 0.95), 7.0);
  EXPECT_THROW(quantile({}, 0.5), DomainError);
}

TEST(RunAudit, SimulableAndWorkerIndependent) {
  const auto a = estimate_corpus(vocab(), small_corpus(), 32, 9, 1);
  const auto b = estimate_corpus(vocab(), small_corpus(), 32, 9, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.estimate[i].mean, b.estimate[i].mean);
  const auto s = ReportStrategy::periodic(300);
  const auto t1 = run_audit(a, s, AuditConfig{}), t2 = run_audit(b, s, AuditConfig{});
  EXPECT_EQ(t1.m, t2.m);
  EXPECT_EQ(t1.z, t2.z);
  EXPECT_EQ(t1.flagged_at, t2.flagged_at);
}

// Ville's inequality: with reports whose mean equals the estimator's mean and
// a scale fixed in advance, at most ~alpha of the runs may ever cross 1/alpha.
TEST(RunAudit, TypeOneControlUnderNull) {
  const auto corpus = generate_synthetic(150, LengthStats{40.0, 15.0}, 13);
  std::vector<SegmentationLattice> lattices;
  for (const auto& r : corpus.records) lattices.emplace_back(vocab(), r.reasoning);
  const auto cfg = fixed_scale(4.0);
  int flagged = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng = make_stream(seed, 0x71);
    AuditTrajectory t;
    for (const auto& lat : lattices) {
      const auto reported = static_cast<TokenCount>(lat.sample_count(rng));
      t = audit_step(std::move(t), reported, lat.mc_estimate(64, rng()), cfg);
    }
    flagged += t.flagged();
  }
  EXPECT_LE(flagged / 200.0, 0.07);
}

TEST(RunAudit, CanonicalReportingAcrossSeeds) {
  int flagged = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto corpus = generate_synthetic(60, LengthStats{80.0, 30.0}, 1000 + seed);
    flagged += run_audit(vocab(), corpus, ReportStrategy::honest_reporting(), AuditConfig{}, seed).flagged();
  }
  EXPECT_LE(flagged / 200.0, 0.07);
}

TEST(Strategy, Examples) {
  EXPECT_EQ(apply_strategy({5, 5, 5}, ReportStrategy::periodic(10, 2)), (std::vector<TokenCount>{5, 15, 5}));
  const std::vector<TokenCount> hundred(1000, 100);
  const auto offset = apply_strategy(hundred, ReportStrategy::with_offset(1000, 24));
  TokenCount net = 0;
  for (std::size_t i = 0; i < hundred.size(); ++i) net += offset[i] - hundred[i];
  EXPECT_EQ(net, 78400);
  EXPECT_EQ(apply_strategy(hundred, ReportStrategy::with_offset(1000, 0)), apply_strategy(hundred, ReportStrategy::periodic(1000)));
  EXPECT_EQ(apply_strategy(hundred, ReportStrategy::honest_reporting()), hundred);
}

TEST(Strategy, NegativeReportsRejected) {
  EXPECT_THROW(apply_strategy({5, 3, 9}, ReportStrategy::with_offset(100, 4, 10)), DomainError);
  EXPECT_NO_THROW(apply_strategy({5, 4, 9}, ReportStrategy::with_offset(100, 4, 10)));
  EXPECT_EQ(max_feasible_offset({5, 1, 9, 0}, 2), 5);  // positions 2 and 4 are inflated
  EXPECT_THROW(apply_strategy({1}, ReportStrategy::periodic(-1)), DomainError);
  EXPECT_THROW(apply_strategy({1}, ReportStrategy::periodic(1, 0)), DomainError);
}

TEST(Strategy, OffsetAccountingExact) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenCount> honest(1 + uniform_index(rng, 300));
    for (auto& h : honest) h = 50 + static_cast<TokenCount>(uniform_index(rng, 500));
    const std::size_t period = 1 + uniform_index(rng, 12);
    const TokenCount amount = static_cast<TokenCount>(uniform_index(rng, 5000));
    const TokenCount off = static_cast<TokenCount>(uniform_index(rng, 50));
    AuditTrajectory t;
    EstimateTable table;
    table.honest = honest;
    table.estimate.assign(honest.size(), est(300.0));
    t = run_audit(table, ReportStrategy::with_offset(amount, off, period), fixed_scale(100.0));
    const auto inflated = static_cast<TokenCount>(honest.size() / period);
    const auto offset_count = static_cast<TokenCount>(honest.size()) - inflated;
    EXPECT_EQ(t.net_inflation(), inflated * amount - offset_count * off);
  }
}

TEST(Sweep, InflationMonotoneAndZeroNeverFlags) {
  const auto table = estimate_corpus(vocab(), generate_synthetic(600, LengthStats{953.76, 654.5}, 8), 64, 8);
  std::vector<TokenCount> amounts;
  for (TokenCount a = 0; a <= 6000; a += 500) amounts.push_back(a);
  for (const auto& cfg : {AuditConfig{}, fixed_scale(3000.0)}) {
    const auto sweep = sweep_inflation(table, amounts, 10, cfg);
    ASSERT_EQ(sweep.points.size(), amounts.size());
    EXPECT_FALSE(sweep.points.front().flagged);
    EXPECT_TRUE(monotone_first_failure(sweep));
    ASSERT_TRUE(sweep.first_failing_amount.has_value());
    for (const auto& p : sweep.points) EXPECT_EQ(p.flagged, p.amount >= *sweep.first_failing_amount);
  }
  EXPECT_THROW(sweep_inflation(table, {500, 0}, 10, AuditConfig{}), DomainError);
  EXPECT_THROW(sweep_inflation(table, {}, 10, AuditConfig{}), DomainError);
}

TEST(Sweep, MonotoneFirstFailureDetector) {
  InflationSweep ok, bad;
  ok.points = {SweepPoint{0, 0, true, false, std::nullopt}, SweepPoint{1, 0, true, true, 40},
               SweepPoint{2, 0, true, true, 30}};
  bad.points = {SweepPoint{1, 0, true, true, 30}, SweepPoint{2, 0, true, true, 31}};
  EXPECT_TRUE(monotone_first_failure(ok));
  EXPECT_FALSE(monotone_first_failure(bad));
}

TEST(Sweep, OffsetFindsPassingPoint) {
  const auto table = estimate_corpus(vocab(), generate_synthetic(600, LengthStats{953.76, 654.5}, 8), 64, 8);
  std::vector<TokenCount> offsets;
  for (TokenCount o = 0; o <= 200; o += 4) offsets.push_back(o);
  const auto sweep = sweep_offset(table, 3000, 10, offsets, AuditConfig{});
  ASSERT_TRUE(sweep.points.front().flagged) << "amount should flag without offset";
  ASSERT_TRUE(sweep.first_passing_offset.has_value());
  EXPECT_GT(sweep.net_inflation_tokens, 0);
  const auto limit = max_feasible_offset(table.honest, 10);
  for (const auto& p : sweep.points) EXPECT_EQ(p.feasible, p.offset <= limit);

  const auto& hit = *std::find_if(sweep.points.begin(), sweep.points.end(),
                                  [&](const SweepPoint& p) { return p.offset == *sweep.first_passing_offset; });
  EXPECT_FALSE(hit.flagged);
  EXPECT_EQ(hit.net_inflation_tokens, sweep.net_inflation_tokens);
  const auto total_honest = std::accumulate(table.honest.begin(), table.honest.end(), TokenCount{0});
  EXPECT_DOUBLE_EQ(sweep.net_inflation_percent, 100.0 * static_cast<double>(sweep.net_inflation_tokens) / total_honest);
}

TEST(Sweep, InfeasibleOffsetsMarked) {
  const auto table = flat_table(30, 10, 12.0);
  const auto sweep = sweep_offset(table, 100, 10, {0, 10, 11, 50}, fixed_scale(10.0));
  ASSERT_EQ(sweep.points.size(), 4u);
  EXPECT_TRUE(sweep.points[1].feasible);
  EXPECT_FALSE(sweep.points[2].feasible);
  EXPECT_FALSE(sweep.points[3].feasible);
}

TEST(Config, Validation) {
  AuditConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.lambda0 = 1.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.n_mc = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = {};
  cfg.z_scale = -1;
  EXPECT_THROW(cfg.validate(), DomainError);
  EXPECT_THROW(run_audit(EstimateTable{}, ReportStrategy{}, AuditConfig{}), DomainError);
}
