#pragma once

// Statistical auditor: per-record deviations between the reported count and
// a Monte-Carlo estimate of the expected count, folded into a clipped
// betting martingale that flags the provider once it exceeds 1/alpha.
// Also the provider-side reporting strategies used against it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gauntlet/corpus.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

using TokenCount = std::int64_t;

struct AuditConfig {
  double alpha = 0.05;
  double lambda0 = 0.5;
  /// Clipping bound in tokens; 0 selects automatic calibration on a prefix.
  double z_scale = 0.0;
  std::size_t n_mc = 64;
  std::size_t calibration_records = 50;
  double calibration_quantile = 0.95;

  double threshold() const { return 1.0 / alpha; }
  bool auto_scale() const { return z_scale == 0.0; }

  void validate() const {
    if (!(alpha > 0.0) || !(alpha < 1.0)) throw DomainError("audit config: alpha must be in (0, 1)");
    if (!(lambda0 > 0.0) || !(lambda0 < 1.0)) throw DomainError("audit config: lambda0 must be in (0, 1)");
    if (z_scale < 0.0 || !std::isfinite(z_scale)) throw DomainError("audit config: z_scale must be >= 0");
    if (n_mc == 0) throw DomainError("audit config: n_mc must be >= 1");
    if (auto_scale() && calibration_records == 0) {
      throw DomainError("audit config: automatic z_scale needs calibration_records >= 1");
    }
    if (!(calibration_quantile > 0.0) || calibration_quantile > 1.0) {
      throw DomainError("audit config: calibration_quantile must be in (0, 1]");
    }
  }
};

/// Running state and full history of one audit. Rows of the calibration
/// prefix carry z_clipped = 0 and m = 1: they set the scale, not evidence.
struct AuditTrajectory {
  std::vector<TokenCount> honest;
  std::vector<TokenCount> reported;
  std::vector<double> estimate;
  std::vector<double> z;
  std::vector<double> z_clipped;
  std::vector<double> m;
  std::optional<std::size_t> flagged_at;  // 1-based record index
  double m_current = 1.0;
  TokenCount total_reported = 0;
  TokenCount total_honest = 0;
  double z_scale = 0.0;
  std::size_t calibration_prefix = 0;

  std::size_t size() const noexcept { return z.size(); }
  bool flagged() const noexcept { return flagged_at.has_value(); }
  TokenCount net_inflation() const noexcept { return total_reported - total_honest; }
  double max_m() const {
    return m.empty() ? 1.0 : *std::max_element(m.begin(), m.end());
  }
};

/// One martingale update. `cfg.z_scale` must already be resolved (> 0).
inline AuditTrajectory audit_step(AuditTrajectory state, TokenCount reported, const McEstimate& estimate,
                                  const AuditConfig& cfg, std::optional<TokenCount> honest = std::nullopt) {
  if (!(cfg.z_scale > 0.0)) throw DomainError("audit_step: z_scale must be resolved to a positive value");
  const double z = static_cast<double>(reported) - estimate.mean;
  const double clipped = std::clamp(z, -cfg.z_scale, cfg.z_scale);
  // Every factor is >= 1 - lambda0 > 0; the floor only stops long runs of
  // maximal negative evidence from underflowing to exactly zero.
  state.m_current = std::max(state.m_current * (1.0 + (cfg.lambda0 / cfg.z_scale) * clipped),
                             std::numeric_limits<double>::min());
  state.honest.push_back(honest.value_or(reported));
  state.reported.push_back(reported);
  state.estimate.push_back(estimate.mean);
  state.z.push_back(z);
  state.z_clipped.push_back(clipped);
  state.m.push_back(state.m_current);
  state.total_reported += reported;
  state.total_honest += honest.value_or(reported);
  state.z_scale = cfg.z_scale;
  if (!state.flagged_at && state.m_current > cfg.threshold()) state.flagged_at = state.size();
  return state;
}

/// Canonical (minimal) token count of the reasoning text.
inline TokenCount honest_count(const Vocabulary& vocab, const TraceRecord& record) {
  return static_cast<TokenCount>(canonical_count(vocab, record.reasoning));
}

struct ReportStrategy {
  enum class Kind { honest, periodic, periodic_with_offset };

  Kind kind = Kind::honest;
  std::size_t period = 10;
  TokenCount amount = 2000;
  TokenCount offset = 0;

  static ReportStrategy honest_reporting() { return {}; }
  static ReportStrategy periodic(TokenCount amount, std::size_t period = 10) {
    return {Kind::periodic, period, amount, 0};
  }
  static ReportStrategy with_offset(TokenCount amount, TokenCount offset, std::size_t period = 10) {
    return {Kind::periodic_with_offset, period, amount, offset};
  }

  std::string name() const {
    switch (kind) {
      case Kind::honest: return "honest";
      case Kind::periodic: return "periodic";
      case Kind::periodic_with_offset: return "periodic_with_offset";
    }
    return "unknown";
  }

  void validate() const {
    if (period < 1) throw DomainError("report strategy: period must be >= 1");
    if (amount < 0) throw DomainError("report strategy: amount must be >= 0");
    if (offset < 0) throw DomainError("report strategy: offset must be >= 0");
  }
};

/// Positions whose 1-based index is a multiple of the period are inflated;
/// with an offset the remaining positions are under-reported by it.
inline std::vector<TokenCount> apply_strategy(const std::vector<TokenCount>& honest, const ReportStrategy& s) {
  s.validate();
  std::vector<TokenCount> out(honest.size());
  for (std::size_t i = 0; i < honest.size(); ++i) {
    if (honest[i] < 0) throw DomainError("apply_strategy: negative honest count at position " + std::to_string(i + 1));
    if (s.kind == ReportStrategy::Kind::honest) {
      out[i] = honest[i];
    } else if ((i + 1) % s.period == 0) {
      out[i] = honest[i] + s.amount;
    } else {
      out[i] = s.kind == ReportStrategy::Kind::periodic_with_offset ? honest[i] - s.offset : honest[i];
      if (out[i] < 0) {
        throw DomainError("apply_strategy: offset " + std::to_string(s.offset) + " makes the report at position " +
                          std::to_string(i + 1) + " negative");
      }
    }
  }
  return out;
}

/// Largest offset that keeps every non-inflated report non-negative.
inline TokenCount max_feasible_offset(const std::vector<TokenCount>& honest, std::size_t period) {
  TokenCount lo = std::numeric_limits<TokenCount>::max();
  for (std::size_t i = 0; i < honest.size(); ++i) {
    if ((i + 1) % period != 0) lo = std::min(lo, honest[i]);
  }
  return lo;
}

/// Honest counts and Monte-Carlo estimates for every record, computed once
/// per (corpus, seed) and shared by all strategies evaluated on it.
struct EstimateTable {
  std::vector<TokenCount> honest;
  std::vector<McEstimate> estimate;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return honest.size(); }
};

namespace detail {
enum : std::uint64_t { kEstimateStream = 0xe57 };

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}
}  // namespace detail

/// Record i uses the stream derive_seed(seed, kEstimateStream, i), so the
/// table does not depend on the worker count.
inline EstimateTable estimate_corpus(const Vocabulary& vocab, const Corpus& corpus, std::size_t n_mc,
                                     std::uint64_t seed, std::size_t workers = 1) {
  if (corpus.empty()) throw DomainError("run_audit: empty corpus");
  EstimateTable t;
  t.seed = seed;
  t.honest.resize(corpus.size());
  t.estimate.resize(corpus.size());
  detail::parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const SegmentationLattice lattice(vocab, corpus.records[i].reasoning);
    t.honest[i] = static_cast<TokenCount>(lattice.min_length());
    t.estimate[i] = lattice.mc_estimate(n_mc, derive_seed(seed, detail::kEstimateStream, i));
  });
  return t;
}

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("quantile: no values");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Folds the reports through the martingale in record order. With automatic
/// scaling, the first calibration_records reports fix z_scale as a quantile
/// of |Z| and contribute no evidence.
inline AuditTrajectory run_audit(const EstimateTable& table, const ReportStrategy& strategy, AuditConfig cfg) {
  cfg.validate();
  if (table.size() == 0) throw DomainError("run_audit: empty corpus");
  const auto reported = apply_strategy(table.honest, strategy);

  AuditTrajectory traj;
  std::size_t start = 0;
  if (cfg.auto_scale()) {
    start = std::min(cfg.calibration_records, table.size());
    std::vector<double> magnitudes;
    for (std::size_t i = 0; i < start; ++i) {
      const double z = static_cast<double>(reported[i]) - table.estimate[i].mean;
      magnitudes.push_back(std::abs(z));
      traj.honest.push_back(table.honest[i]);
      traj.reported.push_back(reported[i]);
      traj.estimate.push_back(table.estimate[i].mean);
      traj.z.push_back(z);
      traj.z_clipped.push_back(0.0);
      traj.m.push_back(1.0);
      traj.total_honest += table.honest[i];
      traj.total_reported += reported[i];
    }
    cfg.z_scale = quantile(magnitudes, cfg.calibration_quantile);
    if (!(cfg.z_scale > 0.0)) cfg.z_scale = 1.0;  // no deviation at all in the prefix
    traj.calibration_prefix = start;
  }
  traj.z_scale = cfg.z_scale;
  for (std::size_t i = start; i < table.size(); ++i) {
    traj = audit_step(std::move(traj), reported[i], table.estimate[i], cfg, table.honest[i]);
  }
  return traj;
}

inline AuditTrajectory run_audit(const Vocabulary& vocab, const Corpus& corpus, const ReportStrategy& strategy,
                                 const AuditConfig& cfg, std::uint64_t seed, std::size_t workers = 1) {
  cfg.validate();
  return run_audit(estimate_corpus(vocab, corpus, cfg.n_mc, seed, workers), strategy, cfg);
}

struct SweepPoint {
  TokenCount amount = 0;
  TokenCount offset = 0;
  bool feasible = true;
  bool flagged = false;
  std::optional<std::size_t> flagged_at;
  double max_m = 1.0;
  double z_scale = 0.0;
  TokenCount net_inflation_tokens = 0;
  double net_inflation_percent = 0.0;
};

namespace detail {
inline SweepPoint sweep_point(const AuditTrajectory& t, TokenCount amount, TokenCount offset) {
  SweepPoint p;
  p.amount = amount;
  p.offset = offset;
  p.flagged = t.flagged();
  p.flagged_at = t.flagged_at;
  p.max_m = t.max_m();
  p.z_scale = t.z_scale;
  p.net_inflation_tokens = t.net_inflation();
  p.net_inflation_percent = t.total_honest > 0 ? 100.0 * static_cast<double>(t.net_inflation()) /
                                                     static_cast<double>(t.total_honest)
                                               : 0.0;
  return p;
}
}  // namespace detail

struct InflationSweep {
  std::vector<SweepPoint> points;
  std::optional<TokenCount> first_failing_amount;
};

/// One audit per amount on the same estimate table.
inline InflationSweep sweep_inflation(const EstimateTable& table, const std::vector<TokenCount>& amounts,
                                      std::size_t period, const AuditConfig& cfg) {
  if (amounts.empty()) throw DomainError("sweep_inflation: no amounts");
  if (!std::is_sorted(amounts.begin(), amounts.end())) throw DomainError("sweep_inflation: amounts must be ascending");
  InflationSweep sweep;
  for (TokenCount a : amounts) {
    const auto t = run_audit(table, ReportStrategy::periodic(a, period), cfg);
    sweep.points.push_back(detail::sweep_point(t, a, 0));
    if (t.flagged() && !sweep.first_failing_amount) sweep.first_failing_amount = a;
  }
  return sweep;
}

/// True when first-failure times never increase with the amount: once an
/// amount flags at t, every larger amount flags at some t' <= t.
inline bool monotone_first_failure(const InflationSweep& sweep) {
  std::optional<std::size_t> bound;
  for (const auto& p : sweep.points) {
    if (bound && (!p.flagged_at || *p.flagged_at > *bound)) return false;
    if (p.flagged_at) bound = p.flagged_at;
  }
  return true;
}

struct OffsetSweep {
  TokenCount amount = 0;
  std::vector<SweepPoint> points;
  std::optional<TokenCount> first_passing_offset;
  TokenCount net_inflation_tokens = 0;
  double net_inflation_percent = 0.0;
};

/// Audits the offset-compensated strategy at each offset. Offsets that would
/// make a report negative are recorded as infeasible and not audited.
inline OffsetSweep sweep_offset(const EstimateTable& table, TokenCount amount, std::size_t period,
                                const std::vector<TokenCount>& offsets, const AuditConfig& cfg) {
  if (offsets.empty()) throw DomainError("sweep_offset: no offsets");
  if (!std::is_sorted(offsets.begin(), offsets.end())) throw DomainError("sweep_offset: offsets must be ascending");
  const TokenCount limit = max_feasible_offset(table.honest, period);
  OffsetSweep sweep;
  sweep.amount = amount;
  for (TokenCount o : offsets) {
    if (o > limit) {
      SweepPoint p;
      p.amount = amount;
      p.offset = o;
      p.feasible = false;
      sweep.points.push_back(p);
      continue;
    }
    const auto t = run_audit(table, ReportStrategy::with_offset(amount, o, period), cfg);
    auto p = detail::sweep_point(t, amount, o);
    if (!p.flagged && !sweep.first_passing_offset) {
      sweep.first_passing_offset = o;
      sweep.net_inflation_tokens = p.net_inflation_tokens;
      sweep.net_inflation_percent = p.net_inflation_percent;
    }
    sweep.points.push_back(p);
  }
  return sweep;
}

}  // namespace gauntlet
