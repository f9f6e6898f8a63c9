// Acceptance suite: one PASS/FAIL line per criterion. Shipped configs are run
// through the harness exactly as the CLI would run them.

#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "gauntlet/harness.hpp"

using namespace gauntlet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const Vocabulary& vocab() { return Vocabulary::default_vocabulary(); }

Vocabulary six_tokens() { return Vocabulary({"a", "b", "ab", "aa", "ba", "aab"}, "#"); }

// ---- shipped runs -----------------------------------------------------------

struct ShippedRun {
  RunManifest manifest;
  double seconds = 0.0;
};

std::map<std::string, ShippedRun>& run_cache() {
  static std::map<std::string, ShippedRun> cache;
  return cache;
}

ShippedRun execute(const std::string& name, const std::string& subdir) {
  auto cfg = ExperimentConfig::load(fs::path(GAUNTLET_CONFIG_DIR) / (name + ".json"));
  cfg.output_dir = fs::path(GAUNTLET_WORK_DIR) / subdir / name;
  const auto t0 = Clock::now();
  ShippedRun r;
  r.manifest = run(cfg);
  r.seconds = seconds_since(t0);
  return r;
}

const ShippedRun& shipped(const std::string& name) {
  auto& cache = run_cache();
  auto it = cache.find(name);
  if (it == cache.end()) it = cache.emplace(name, execute(name, "first")).first;
  return it->second;
}

double field(const std::map<std::string, std::string>& row, const std::string& key) {
  return std::stod(row.at(key));
}

// ---- criteria ---------------------------------------------------------------

// Independent oracle: try every token at every position by plain comparison.
void enumerate(const std::vector<std::string>& tokens, const std::string& text, std::size_t pos, std::size_t depth,
               std::uint64_t& count, std::size_t& shortest) {
  if (pos == text.size()) {
    ++count;
    shortest = std::min(shortest, depth);
    return;
  }
  for (const auto& t : tokens) {
    if (text.compare(pos, t.size(), t) == 0) enumerate(tokens, text, pos + t.size(), depth + 1, count, shortest);
  }
}

Outcome tokenizer_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto v = six_tokens();
  std::size_t strings = 0, mismatches = 0;
  for (std::size_t len = 0; len <= 12; ++len) {
    for (std::uint32_t bits = 0; bits < (1u << len); ++bits) {
      std::string s;
      for (std::size_t i = 0; i < len; ++i) s += (bits >> i) & 1 ? 'b' : 'a';
      std::uint64_t count = 0;
      std::size_t shortest = SIZE_MAX;
      enumerate(v.tokens(), s, 0, 0, count, shortest);
      ++strings;
      const bool ok = count_segmentations(v, s) == count && canonical_count(v, s) == shortest &&
                      SegmentationLattice(v, s).min_length() == shortest;
      mismatches += !ok;
    }
  }
  const double secs = seconds_since(t0);
  o.check(mismatches == 0, std::to_string(mismatches) + " mismatching strings");
  o.check(secs < 10.0, "runtime " + num(secs, 2) + " s");
  o.note(std::to_string(strings) + " strings, " + num(secs, 2) + " s");
  return o;
}

Outcome uniform_sampling() {
  Outcome o;
  const auto v = six_tokens();
  o.check(count_segmentations(v, "aaa") == 3, "'aaa' should have 3 segmentations");
  Rng rng(20240607);
  std::map<std::vector<TokenId>, int> counts;
  for (int i = 0; i < 3000; ++i) ++counts[sample_segmentation(v, "aaa", rng).ids];
  o.check(counts.size() == 3, "observed " + std::to_string(counts.size()) + " distinct segmentations");
  double stat = 0.0;
  for (const auto& [_, c] : counts) stat += (c - 1000.0) * (c - 1000.0) / 1000.0;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(2), stat));
  o.check(p > 0.001, "p = " + num(p, 6));
  o.note("chi2 " + num(stat, 3) + ", p " + num(p, 4));
  return o;
}

Block random_block(Rng& rng, TokenId vocab_size) {
  Block b;
  for (std::size_t i = 0; i < kDefaultBlockSize; ++i) b.ids.push_back(1 + static_cast<TokenId>(uniform_index(rng, vocab_size)));
  return b;
}

Outcome commitment_binding() {
  Outcome o;
  Rng rng(303);
  int root_changed = 0, proof_rejected = 0, swaps = 0, swap_rejected = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 10);
    std::vector<Block> blocks;
    for (std::size_t i = 0; i < n; ++i) blocks.push_back(random_block(rng, 100));
    const auto tree = build_merkle(blocks);
    const std::size_t idx = uniform_index(rng, n), pos = uniform_index(rng, kDefaultBlockSize);
    auto tampered = blocks;
    tampered[idx].ids[pos] = tampered[idx].ids[pos] % 100 + 1;
    root_changed += build_merkle(tampered).root() != tree.root();
    proof_rejected += !verify_inclusion(tree.root(), tampered[idx], idx, tree.prove(idx));

    std::size_t other = uniform_index(rng, n - 1);
    if (other >= idx) ++other;
    if (leaf_hash(blocks[idx]) == leaf_hash(blocks[other])) continue;
    ++swaps;
    auto moved = tree.prove(idx);
    const bool at_other = verify_inclusion(tree.root(), blocks[idx], other, moved);
    moved.index = other;
    const bool relabelled = verify_inclusion(tree.root(), blocks[idx], other, moved);
    swap_rejected += !at_other && !relabelled;
  }
  o.check(root_changed == 100, std::to_string(root_changed) + "/100 roots changed");
  o.check(proof_rejected == 100, std::to_string(proof_rejected) + "/100 proofs rejected");
  o.check(swap_rejected == swaps, std::to_string(swap_rejected) + "/" + std::to_string(swaps) + " swapped proofs rejected");
  o.note("tampers 100/100, swapped proofs " + std::to_string(swap_rejected) + "/" + std::to_string(swaps) + " rejected");
  return o;
}

Outcome coin_attack_evasion() {
  Outcome o;
  Rng rng(404);
  const auto answer = canonical_tokenize(vocab(), "hence the claim follows.");
  const auto vsize = static_cast<TokenId>(vocab().size() - 1);
  int identical = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto b = random_block(rng, vsize);
    const Block copy = b;
    std::vector<std::size_t> probes;
    for (int k = 0; k < 16; ++k) probes.push_back(uniform_index(rng, kDefaultBlockSize));
    const auto s1 = score_block(b, answer, probes), s2 = score_block(copy, answer, probes);
    identical += s1.token_to_block == s2.token_to_block && s1.block_to_answer == s2.block_to_answer;
  }
  o.check(identical == 1000, std::to_string(identical) + "/1000 duplicate scores identical");

  double worst = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const auto b = random_block(rng, vsize);
    const auto k = 1 + uniform_index(rng, 8);
    const auto p = make_hash_unique(b, rng, k, vocab().size());
    worst = std::min(worst, cosine(embed(std::span<const TokenId>(b.ids)), embed(std::span<const TokenId>(p.ids))));
  }
  o.check(worst >= 0.95, "min perturbed cosine " + num(worst));

  const auto& rb = shipped("coin_rb_defense");
  const auto rb_rows = detail::read_csv(rb.manifest, "coin_attacks.csv");
  std::size_t first_dup = 0;
  for (const auto& r : rb_rows) {
    first_dup += r.at("detected") == "true" && r.at("detected_at_block") == "1" && r.at("detected_by") == "duplicate_hash";
  }
  o.check(!rb_rows.empty() && first_dup == rb_rows.size(),
          "plain random_block caught at first duplicate on " + std::to_string(first_dup) + "/" + std::to_string(rb_rows.size()));

  const auto& hu = shipped("coin_hash_unique");
  const auto hu_rows = detail::read_csv(hu.manifest, "coin_attacks.csv");
  std::size_t full = 0;
  for (const auto& r : hu_rows) full += r.at("detected") == "false" && r.at("added_blocks") == "1000";
  const double rate = hu_rows.empty() ? 0.0 : static_cast<double>(full) / static_cast<double>(hu_rows.size());
  o.check(hu_rows.size() == 200, "hash_unique suite has " + std::to_string(hu_rows.size()) + " records");
  o.check(rate >= 0.95, "hash_unique reached budget on " + num(rate));
  o.check(detail::read_csv(hu.manifest, "coin_summary.csv").at(0).at("reached_budget_rate") == num(rate),
          "summary rate disagrees with per-record rows");
  o.note("min cosine " + num(worst) + ", rb first-dup " + std::to_string(first_dup) + "/" +
         std::to_string(rb_rows.size()) + ", hash_unique budget rate " + num(rate) + " (" + num(hu.seconds, 1) + " s)");
  return o;
}

Outcome inflation_metric() {
  Outcome o;
  const double v = inflation_percent(100, 50);
  o.check(v == 50.0, "got " + num(v, 17));
  o.note("(100, 50) -> " + num(v, 1) + "%");
  return o;
}

Outcome palace_training() {
  Outcome o;
  const auto t0 = Clock::now();
  auto data = aux_from_corpus(generate_synthetic(600, LengthStats{953.76, 654.5}, 41), vocab());
  for (auto& ex : data) ex.label = 3.0 * static_cast<double>(canonical_count(vocab(), ex.answer));
  std::span<const AuxExample> all(data);
  const auto model = train_auditor(vocab(), all.first(500), TrainOptions{});
  double err = 0.0;
  for (const auto& ex : all.subspan(500)) err += std::abs(predict(vocab(), model, ex.prompt, ex.answer) - ex.label) / ex.label;
  err /= 100.0;
  const double secs = seconds_since(t0);
  o.check(err <= 0.10, "held-out MARE " + num(err));
  o.check(secs < 60.0, "runtime " + num(secs, 1) + " s");
  o.note("held-out MARE " + num(err) + ", " + num(secs, 1) + " s");
  return o;
}

Outcome palace_poisoning() {
  Outcome o;
  const auto& pal = shipped("palace");
  std::map<std::string, std::map<std::string, std::string>> rows;
  for (const auto& r : detail::read_csv(pal.manifest, "poisoning.csv")) rows[r.at("mode")] = r;
  o.check(rows.count("targeted") && rows.count("backdoor"), "poisoning.csv lacks a mode");
  if (!o.pass) return o;
  const double shift = field(rows["targeted"], "mean_shift_percent");
  const double frac = field(rows["backdoor"], "fraction_inflated");
  const double drift = field(rows["backdoor"], "untriggered_drift");
  o.check(shift >= 20.0, "targeted mean shift " + num(shift, 2) + "%");
  o.check(frac >= 0.95, "backdoor inflated fraction " + num(frac));
  o.check(drift <= 0.05, "untriggered drift " + num(drift));
  o.note("targeted shift " + num(shift, 2) + "%, backdoor fraction " + num(frac) + ", drift " + num(drift));
  return o;
}

Outcome flag_and_normalization() {
  Outcome o;
  const auto a = flag_decision(100, 100, 0.25), b = flag_decision(100, 130, 0.25), c = flag_decision(100, 60, 0.25);
  o.check(!a.flagged && a.relative_deviation == 0.0, "100 vs 100");
  o.check(b.flagged && b.relative_deviation == (130.0 - 100.0) / 100.0, "100 vs 130");
  o.check(!c.flagged && c.relative_deviation == (60.0 - 100.0) / 100.0, "100 vs 60");

  const auto& pal = shipped("palace");
  const auto model = AuditorModel::from_json(nlohmann::json::parse(read_text(pal.manifest.dir / "model_clean.json")));
  const auto cfg = ExperimentConfig::load(fs::path(GAUNTLET_CONFIG_DIR) / "palace.json");
  const auto& syn = cfg.corpus.at("synthetic");
  const auto corpus = generate_synthetic(syn.at("n").get<std::size_t>(),
                                         LengthStats{syn.at("mean").get<double>(), syn.at("std").get<double>()},
                                         syn.at("seed").get<std::uint64_t>());
  const auto suite = aux_from_corpus(corpus, vocab());
  const double tau = cfg.params.at("tau").get<double>();
  const double inflate = cfg.params.at("report_inflation").get<double>();
  std::size_t total = 0, restored = 0;
  for (const auto& cand : default_trigger_candidates()) {
    for (const auto& ex : suite) {
      const double reported = std::round(ex.label * (1.0 + inflate));
      const auto before = flag_report(vocab(), model, ex.prompt, ex.answer, reported, tau);
      const auto after = flag_report(vocab(), model, ex.prompt, normalize_answer(with_suffix(ex.answer, cand)), reported, tau);
      ++total;
      restored += before.flagged == after.flagged;
    }
  }
  o.check(restored == total, "normalization restored " + std::to_string(restored) + "/" + std::to_string(total));
  std::size_t rows = 0, perfect = 0;
  for (const auto& r : detail::read_csv(pal.manifest, "flag_rates.csv")) {
    if (r.at("agreement_with_untriggered").empty()) continue;
    ++rows;
    perfect += r.at("agreement_with_untriggered") == "1.0000";
  }
  o.check(rows == default_trigger_candidates().size() && perfect == rows,
          "run agreement perfect for " + std::to_string(perfect) + "/" + std::to_string(rows) + " candidates");
  o.note("flag examples exact, normalization restored " + std::to_string(restored) + "/" + std::to_string(total) + " over " +
         std::to_string(default_trigger_candidates().size()) + " candidates");
  return o;
}

Outcome martingale_exactness() {
  Outcome o;
  AuditConfig cfg;
  cfg.z_scale = 100.0;
  const auto up = audit_step({}, 100, McEstimate{0.0, 64, 0}, cfg);
  o.check(up.m_current == 1.5, "M' = " + num(up.m_current, 17));
  const auto down = audit_step({}, 0, McEstimate{300.0, 64, 0}, cfg);
  o.check(down.z_clipped.back() == -100.0 && down.m_current == 0.5, "clipped M' = " + num(down.m_current, 17));
  AuditTrajectory high;
  high.m_current = 20.5;
  o.check(audit_step(std::move(high), 7, McEstimate{7.0, 64, 0}, cfg).flagged_at == std::optional<std::size_t>(1),
          "20.5 should flag");

  EstimateTable table;
  table.honest.assign(30, 0);
  table.estimate.assign(30, McEstimate{0.0, 64, 0});
  const auto t = run_audit(table, ReportStrategy::periodic(1000, 1), cfg);
  // Smallest t with 1.5^t > 1/0.05.
  std::size_t expect = 1;
  for (double m = 1.5; !(m > 20.0); m *= 1.5) ++expect;
  o.check(expect == 8 && t.flagged_at == std::optional<std::size_t>(8),
          "all-inflate flagged at " + (t.flagged_at ? std::to_string(*t.flagged_at) : std::string("never")));
  o.note("M' 1.5 and 0.5 exact, all-inflate flags at t = " + (t.flagged_at ? std::to_string(*t.flagged_at) : std::string("-")));
  return o;
}

Outcome honest_dominance() {
  Outcome o;
  const auto& naive = shipped("stat_naive");
  const auto rows = detail::read_csv(naive.manifest, "trajectory_honest.csv");
  std::size_t positive = 0;
  for (const auto& r : rows) positive += field(r, "z") > 0.0 || r.at("flagged") == "true";

  const auto cfg = ExperimentConfig::load(fs::path(GAUNTLET_CONFIG_DIR) / "stat_naive.json");
  const auto& syn = cfg.corpus.at("synthetic");
  const auto corpus = generate_synthetic(syn.at("n").get<std::size_t>(),
                                         LengthStats{syn.at("mean").get<double>(), syn.at("std").get<double>()},
                                         syn.at("seed").get<std::uint64_t>());
  const auto table = estimate_corpus(vocab(), corpus, 64, 99);
  const auto t = run_audit(table, ReportStrategy::honest_reporting(), AuditConfig{});
  std::size_t direct_positive = 0;
  for (std::size_t i = 0; i < t.size(); ++i) direct_positive += t.z[i] > 0.0 || (i > 0 && t.m[i] > t.m[i - 1]);
  o.check(positive == 0 && direct_positive == 0 && !t.flagged(),
          std::to_string(positive + direct_positive) + " honest samples with Z > 0 or rising M");

  int canonical_flags = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto c = generate_synthetic(60, LengthStats{80.0, 30.0}, 5000 + seed);
    canonical_flags += run_audit(vocab(), c, ReportStrategy::honest_reporting(), AuditConfig{}, seed).flagged();
  }
  // Reports drawn from the estimator's own law, scale fixed in advance.
  const auto null_corpus = generate_synthetic(150, LengthStats{40.0, 15.0}, 13);
  std::vector<SegmentationLattice> lattices;
  for (const auto& r : null_corpus.records) lattices.emplace_back(vocab(), r.reasoning);
  AuditConfig fixed;
  fixed.z_scale = 4.0;
  int null_flags = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng = make_stream(seed, 0x4e55);
    AuditTrajectory tr;
    for (const auto& lat : lattices) {
      const auto reported = static_cast<TokenCount>(lat.sample_count(rng));
      tr = audit_step(std::move(tr), reported, lat.mc_estimate(64, rng()), fixed);
    }
    null_flags += tr.flagged();
  }
  o.check(canonical_flags / 200.0 <= 0.07, "canonical flag rate " + num(canonical_flags / 200.0));
  o.check(null_flags / 200.0 <= 0.07, "null flag rate " + num(null_flags / 200.0));
  o.note("Z <= 0 on all " + std::to_string(t.size()) + " records, flag rate canonical " + num(canonical_flags / 200.0, 3) +
         ", null " + num(null_flags / 200.0, 3));
  return o;
}

Outcome strategic_evasion() {
  Outcome o;
  const auto& naive = shipped("stat_naive");
  const auto& sweep = shipped("stat_sweep");
  for (const auto* r : {&naive, &sweep}) {
    o.check(r->seconds < 180.0, "stat run took " + num(r->seconds, 1) + " s");
  }
  std::map<std::string, std::string> evading;
  for (const auto& r : detail::read_csv(naive.manifest, "strategies.csv")) {
    if (r.at("kind") == "periodic" && r.at("period") == "10" && r.at("flagged") == "false") evading = r;
  }
  o.check(!evading.empty(), "no unflagged period-10 strategy");
  std::size_t spikes = 0;
  if (!evading.empty()) {
    for (const auto& r : detail::read_csv(naive.manifest, "trajectory_" + evading.at("strategy") + ".csv")) {
      spikes += std::stoul(r.at("index")) % 10 == 0 && field(r, "z") > 0.0;
    }
    o.check(spikes > 0, "no positive spikes in the Z trajectory");
  }

  const auto inflation = detail::read_csv(sweep.manifest, "sweep_inflation.csv");
  std::optional<std::size_t> first;
  bool monotone = true;
  for (std::size_t i = 0; i < inflation.size(); ++i) {
    const bool flagged = inflation[i].at("flagged") == "true";
    if (flagged && !first) first = i;
    if (first && !flagged) monotone = false;
  }
  o.check(first.has_value() && *first > 0, "inflation sweep has no pass-then-fail boundary");
  o.check(monotone, "inflation sweep is not monotone after the first failure");

  std::string offset_pass;
  for (const auto& r : detail::read_csv(sweep.manifest, "sweep_offset.csv")) {
    if (r.at("feasible") == "true" && r.at("flagged") == "false" && std::stoll(r.at("net_inflation_tokens")) > 0) {
      offset_pass = r.at("offset") + " (net " + r.at("net_inflation_tokens") + " tokens)";
      break;
    }
  }
  o.check(!offset_pass.empty(), "no feasible unflagged offset with positive net inflation");
  o.note("amount " + (evading.empty() ? std::string("-") : evading.at("amount")) + " unflagged with " +
         std::to_string(spikes) + " spikes; first failing amount " +
         (first ? inflation[*first].at("amount") : std::string("-")) + "; passing offset " +
         (offset_pass.empty() ? std::string("-") : offset_pass) + "; runtimes " + num(naive.seconds, 1) + " s, " +
         num(sweep.seconds, 1) + " s");
  return o;
}

Outcome end_to_end_determinism() {
  Outcome o;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(GAUNTLET_CONFIG_DIR)) {
    if (e.path().extension() == ".json") names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  std::size_t same = 0;
  for (const auto& n : names) {
    const auto& a = shipped(n);
    const auto b = execute(n, "rerun");
    const bool equal = a.manifest.digest() == b.manifest.digest() &&
                       read_text(a.manifest.dir / "manifest.json") == read_text(b.manifest.dir / "manifest.json");
    o.check(equal, n + " digest changed");
    same += equal;
  }
  o.check(!names.empty(), "no shipped configs found");
  o.note(std::to_string(same) + "/" + std::to_string(names.size()) + " configs reproduce their manifest digest");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"tokenizer oracle equivalence", tokenizer_oracle},
      {"uniform segmentation sampling", uniform_sampling},
      {"commitment binding", commitment_binding},
      {"coin duplicate scores and hash-unique evasion", coin_attack_evasion},
      {"inflation metric", inflation_metric},
      {"palace training sanity", palace_training},
      {"palace poisoning effect", palace_poisoning},
      {"flag rule and normalization defense", flag_and_normalization},
      {"martingale exactness", martingale_exactness},
      {"honest dominance and type-I control", honest_dominance},
      {"strategic evasion", strategic_evasion},
      {"end-to-end determinism", end_to_end_determinism},
  };
  fs::remove_all(GAUNTLET_WORK_DIR);
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    failures += !out.pass;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << (i + 1 < 10 ? " " : "") << i + 1 << ". " << criteria[i].first
              << " [" << num(seconds_since(t0), 1) << " s]: " << out.detail << std::endl;
  }
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
