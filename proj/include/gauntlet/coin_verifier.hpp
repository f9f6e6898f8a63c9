#pragma once

// Semantic-validity layer of the commitment auditor: a deterministic
// feature-hashed embedding, the token-to-block and block-to-answer matching
// heads, and the dual (rule + calibrated aggregate) verifier.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "gauntlet/commitment.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

inline constexpr std::size_t kDefaultEmbeddingDim = 64;

struct EmbeddingVector {
  std::vector<double> values;

  bool is_zero() const {
    for (double v : values) {
      if (v != 0.0) return false;
    }
    return true;
  }
  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

namespace detail {

struct HashedSlot {
  std::uint32_t bucket;
  int sign;
};

inline HashedSlot token_slot(TokenId id, std::size_t dim) {
  const std::uint64_t h = splitmix64(0xc01dc0ffee000000ULL ^ static_cast<std::uint64_t>(id));
  return {static_cast<std::uint32_t>(h % dim), ((h >> 40) & 1) ? 1 : -1};
}

inline std::vector<double> signed_counts(std::span<const TokenId> ids, std::size_t dim) {
  std::vector<double> acc(dim, 0.0);
  for (TokenId id : ids) {
    if (id == kPadId) continue;
    const auto slot = token_slot(id, dim);
    acc[slot.bucket] += slot.sign;
  }
  return acc;
}

inline EmbeddingVector normalized(std::vector<double> acc) {
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& v : acc) v /= norm;
  }
  return EmbeddingVector{std::move(acc)};
}

}  // namespace detail

/// Feature-hashed bag of tokens: each id maps to a (bucket, sign) pair, counts
/// are accumulated and L2-normalised. Pad ids carry no content and are skipped.
inline EmbeddingVector embed(std::span<const TokenId> ids, std::size_t dim = kDefaultEmbeddingDim) {
  return detail::normalized(detail::signed_counts(ids, dim));
}

inline EmbeddingVector embed(const TokenSeq& seq, std::size_t dim = kDefaultEmbeddingDim) {
  return embed(std::span<const TokenId>(seq.ids), dim);
}

/// Cosine of two embeddings; 0 when either is the zero vector.
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.values.size() != b.values.size()) throw DomainError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

struct Calibration {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;

  nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}, {"n", n}}; }
  static Calibration from_json(const nlohmann::json& j) {
    try {
      return Calibration{j.at("mean").get<double>(), j.at("std").get<double>(), j.at("n").get<std::size_t>()};
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("calibration: ") + e.what());
    }
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }
  static Calibration load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("calibration: cannot open " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("calibration: ") + e.what());
    }
  }
};

struct VerifierConfig {
  double probing_ratio = 0.75;
  double threshold = 0.5;
  double aggregate_zmax = 3.0;
  bool aggregate_enabled = true;
  /// Fraction of probed blocks that must pass the rule check (1 = all).
  double rule_quota = 1.0;
  std::size_t token_probes = 16;
  /// A probed token is embedded together with this many neighbours on each side.
  std::size_t context_radius = 16;
  std::size_t dim = kDefaultEmbeddingDim;
  std::optional<Calibration> calibration;

  void validate() const {
    if (!(probing_ratio > 0.0) || probing_ratio > 1.0) throw DomainError("verifier: probing_ratio must be in (0, 1]");
    if (threshold < 0.0 || threshold > 1.0) throw DomainError("verifier: threshold must be in [0, 1]");
    if (!(aggregate_zmax > 0.0)) throw DomainError("verifier: aggregate_zmax must be positive");
    if (!(rule_quota > 0.0) || rule_quota > 1.0) throw DomainError("verifier: rule_quota must be in (0, 1]");
    if (dim == 0) throw DomainError("verifier: dim must be positive");
    if (token_probes == 0) throw DomainError("verifier: token_probes must be positive");
  }
};

struct BlockScore {
  double token_to_block = 0.0;
  double block_to_answer = 0.0;
  friend bool operator==(const BlockScore&, const BlockScore&) = default;
};

/// Everything the verifier needs from one committed block, computed once.
/// `position_scores[p]` is the token-to-block head evaluated at content
/// position p: the clamped cosine between the block embedding and the
/// embedding of the token's context window.
struct BlockFeatures {
  Digest leaf;
  EmbeddingVector embedding;
  std::vector<double> position_scores;
  double block_to_answer = 0.0;

  static BlockFeatures compute(const Block& block, const EmbeddingVector& answer_embedding, const VerifierConfig& cfg) {
    BlockFeatures f;
    f.leaf = leaf_hash(block);
    f.embedding = embed(std::span<const TokenId>(block.ids), cfg.dim);
    f.block_to_answer = std::max(0.0, cosine(f.embedding, answer_embedding));

    const std::size_t content = block.content_length();
    f.position_scores.resize(content);
    std::vector<detail::HashedSlot> slots(content);
    for (std::size_t p = 0; p < content; ++p) slots[p] = detail::token_slot(block.ids[p], cfg.dim);
    std::vector<long> window(cfg.dim, 0);
    std::size_t lo = 0, hi = 0;  // window covers [lo, hi)
    for (std::size_t p = 0; p < content; ++p) {
      const std::size_t want_lo = p >= cfg.context_radius ? p - cfg.context_radius : 0;
      const std::size_t want_hi = std::min(content, p + cfg.context_radius + 1);
      for (; hi < want_hi; ++hi) {
        if (block.ids[hi] != kPadId) window[slots[hi].bucket] += slots[hi].sign;
      }
      for (; lo < want_lo; ++lo) {
        if (block.ids[lo] != kPadId) window[slots[lo].bucket] -= slots[lo].sign;
      }
      double dot = 0.0, sq = 0.0;
      for (std::size_t b = 0; b < cfg.dim; ++b) {
        const double w = static_cast<double>(window[b]);
        dot += w * f.embedding.values[b];
        sq += w * w;
      }
      f.position_scores[p] = sq > 0.0 ? std::max(0.0, dot / std::sqrt(sq)) : 0.0;
    }
    return f;
  }

  /// Mean token-to-block score over the probed content positions; an empty
  /// probe set passes vacuously.
  double token_to_block(std::span<const std::size_t> probes) const {
    if (probes.empty()) return 1.0;
    double sum = 0.0;
    for (auto p : probes) {
      if (p >= position_scores.size()) throw DomainError("score_block: probe position outside block content");
      sum += position_scores[p];
    }
    return sum / static_cast<double>(probes.size());
  }
};

/// Token positions probed inside a block: `count` uniform draws (with
/// replacement) over the content positions; none for an all-pad block.
inline std::span<const std::size_t> sample_token_probes(std::size_t content, std::size_t count, Rng& rng,
                                                        std::vector<std::size_t>& out) {
  out.clear();
  if (content == 0) return out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(uniform_index(rng, content));
  return out;
}

/// The two matching heads for one block.
inline BlockScore score_block(const Block& block, const TokenSeq& answer, std::span<const std::size_t> probes,
                              const VerifierConfig& cfg = {}) {
  const auto f = BlockFeatures::compute(block, embed(answer, cfg.dim), cfg);
  return {f.token_to_block(probes), f.block_to_answer};
}

/// Attacker-side score: all content positions probed.
inline BlockScore score_block_exhaustive(const BlockFeatures& f) {
  double sum = 0.0;
  for (double s : f.position_scores) sum += s;
  const double t2b = f.position_scores.empty() ? 1.0 : sum / static_cast<double>(f.position_scores.size());
  return {t2b, f.block_to_answer};
}

enum class FailedCheck { none, rule, aggregate, duplicate_hash };

inline const char* to_string(FailedCheck c) {
  switch (c) {
    case FailedCheck::none: return "none";
    case FailedCheck::rule: return "rule";
    case FailedCheck::aggregate: return "aggregate";
    case FailedCheck::duplicate_hash: return "duplicate_hash";
  }
  return "?";
}

struct ProbedScore {
  std::size_t block_index;
  BlockScore score;
};

struct Verdict {
  bool accepted = true;
  FailedCheck failed_check = FailedCheck::none;
  std::vector<ProbedScore> block_scores;
  double aggregate_mean = 0.0;
  double aggregate_z = 0.0;
};

/// Verifier pipeline over precomputed block features. `has_duplicate` reports
/// whether two committed blocks share a leaf hash; callers that grow a trace
/// one block at a time maintain it incrementally.
inline Verdict audit_features(std::span<const BlockFeatures* const> blocks, const VerifierConfig& cfg, Rng& rng,
                              bool defense_duplicate_hash, bool has_duplicate) {
  Verdict v;
  if (defense_duplicate_hash && has_duplicate) {
    v.accepted = false;
    v.failed_check = FailedCheck::duplicate_hash;
    return v;
  }
  const auto probes = select_probes(blocks.size(), cfg.probing_ratio, rng);
  std::size_t passing = 0;
  double b2a_sum = 0.0;
  std::vector<std::size_t> positions;
  v.block_scores.reserve(probes.size());
  for (auto idx : probes) {
    const BlockFeatures& f = *blocks[idx];
    const BlockScore s{f.token_to_block(sample_token_probes(f.position_scores.size(), cfg.token_probes, rng, positions)),
                       f.block_to_answer};
    if (s.token_to_block >= cfg.threshold && s.block_to_answer >= cfg.threshold) ++passing;
    b2a_sum += s.block_to_answer;
    v.block_scores.push_back({idx, s});
  }
  if (!probes.empty()) v.aggregate_mean = b2a_sum / static_cast<double>(probes.size());

  const std::size_t required = ceil_fraction(cfg.rule_quota, probes.size());
  if (passing < required) {
    v.accepted = false;
    v.failed_check = FailedCheck::rule;
    return v;
  }
  if (cfg.aggregate_enabled && !probes.empty()) {
    if (!cfg.calibration || cfg.calibration->n == 0) throw DomainError("audit_trace: aggregate check needs a calibration");
    const double spread = std::max(cfg.calibration->std, 1e-12);
    v.aggregate_z = (v.aggregate_mean - cfg.calibration->mean) / spread;
    if (std::abs(v.aggregate_z) > cfg.aggregate_zmax) {
      v.accepted = false;
      v.failed_check = FailedCheck::aggregate;
    }
  }
  return v;
}

inline bool has_duplicate_leaf(std::span<const BlockFeatures* const> blocks) {
  std::unordered_set<std::string> seen;
  for (const auto* f : blocks) {
    if (!seen.insert(std::string(f->leaf.begin(), f->leaf.end())).second) return true;
  }
  return false;
}

/// Optional duplicate-hash defense, probe selection, rule check, aggregate check.
inline Verdict audit_trace(std::span<const Block> blocks, const TokenSeq& answer, const VerifierConfig& cfg, Rng& rng,
                           bool defense_duplicate_hash) {
  cfg.validate();
  const auto answer_embedding = embed(answer, cfg.dim);
  std::vector<BlockFeatures> features;
  features.reserve(blocks.size());
  for (const auto& b : blocks) features.push_back(BlockFeatures::compute(b, answer_embedding, cfg));
  std::vector<const BlockFeatures*> views;
  for (const auto& f : features) views.push_back(&f);
  return audit_features(views, cfg, rng, defense_duplicate_hash, defense_duplicate_hash && has_duplicate_leaf(views));
}

/// One honest trace prepared for calibration: its blocks and answer tokens.
struct HonestTrace {
  std::vector<Block> blocks;
  TokenSeq answer;
};

/// Calibrates the aggregate check: mean/std (population) of the probed mean
/// block-to-answer score over honest traces, using the verifier's own probing.
inline Calibration calibrate_aggregate(std::span<const HonestTrace> traces, const VerifierConfig& cfg,
                                       std::uint64_t seed) {
  if (traces.empty()) throw DomainError("calibrate: no honest traces");
  VerifierConfig probe_cfg = cfg;
  probe_cfg.aggregate_enabled = false;
  probe_cfg.rule_quota = 1.0;
  std::vector<double> means;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (traces[i].blocks.empty()) continue;
    Rng rng = make_stream(seed, 0xca1, i);
    const auto v = audit_trace(traces[i].blocks, traces[i].answer, probe_cfg, rng, false);
    means.push_back(v.aggregate_mean);
  }
  if (means.empty()) throw DomainError("calibrate: every honest trace is empty");
  Calibration cal;
  cal.n = means.size();
  for (double m : means) cal.mean += m;
  cal.mean /= static_cast<double>(means.size());
  for (double m : means) cal.std += (m - cal.mean) * (m - cal.mean);
  cal.std = std::sqrt(cal.std / static_cast<double>(means.size()));
  return cal;
}

}  // namespace gauntlet
