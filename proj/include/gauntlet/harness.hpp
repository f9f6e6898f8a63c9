#pragma once

// Experiment pipelines. Each run reads only its config and the files the
// config names, writes CSV/SVG/JSON outputs and a manifest of their SHA-256
// digests. Row order and number formatting are fixed, so an identical config
// reproduces identical digests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gauntlet/coin_attacks.hpp"
#include "gauntlet/coin_verifier.hpp"
#include "gauntlet/commitment.hpp"
#include "gauntlet/corpus.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/harness_config.hpp"
#include "gauntlet/martingale.hpp"
#include "gauntlet/output.hpp"
#include "gauntlet/palace.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

inline constexpr const char* kVersion = "0.1.0";

/// What to execute for a config: its own experiment, or only the sweeps of a
/// stat config.
enum class Pipeline { gen_corpus, coin, palace, stat, sweep };

inline std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::gen_corpus: return "gen-corpus";
    case Pipeline::coin: return "coin";
    case Pipeline::palace: return "palace";
    case Pipeline::stat: return "stat";
    case Pipeline::sweep: return "sweep";
  }
  return "unknown";
}

inline Pipeline default_pipeline(Experiment e) {
  switch (e) {
    case Experiment::gen_corpus: return Pipeline::gen_corpus;
    case Experiment::coin: return Pipeline::coin;
    case Experiment::palace: return Pipeline::palace;
    case Experiment::stat: return Pipeline::stat;
  }
  return Pipeline::stat;
}

/// Config-level compatibility of a pipeline with an experiment.
inline void check_pipeline(Pipeline p, const ExperimentConfig& cfg) {
  const bool ok = p == Pipeline::sweep ? cfg.experiment == Experiment::stat : p == default_pipeline(cfg.experiment);
  if (!ok) {
    throw ConfigError("config '" + cfg.name + "' describes a " + to_string(cfg.experiment) + " experiment, not " +
                      to_string(p));
  }
  if (p == Pipeline::sweep && cfg.params.at("sweep").is_null() && cfg.params.at("offset_sweep").is_null()) {
    throw ConfigError("config '" + cfg.name + "' has no 'sweep' or 'offset_sweep' block");
  }
}

struct OutputEntry {
  std::string file;
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string version = kVersion;
  std::string pipeline;
  std::string config_hash;
  nlohmann::json config;
  std::vector<OutputEntry> inputs;
  std::vector<OutputEntry> outputs;
  std::filesystem::path dir;  // where the outputs live; not serialised

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "gauntlet";
    j["version"] = version;
    j["pipeline"] = pipeline;
    j["config_hash"] = config_hash;
    j["config"] = config;
    auto list = [](const std::vector<OutputEntry>& entries) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& e : entries) {
        nlohmann::ordered_json o;
        o["file"] = e.file;
        o["sha256"] = e.sha256;
        o["bytes"] = e.bytes;
        arr.push_back(o);
      }
      return arr;
    };
    j["inputs"] = list(inputs);
    j["outputs"] = list(outputs);
    return j;
  }

  std::string serialize() const { return to_json().dump(2) + "\n"; }
  std::string digest() const { return to_hex(sha256(serialize())); }

  const OutputEntry* find(const std::string& file) const {
    for (const auto& o : outputs) {
      if (o.file == file) return &o;
    }
    return nullptr;
  }

  static RunManifest load(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(path));
      RunManifest m;
      m.dir = dir;
      m.version = j.at("version");
      m.pipeline = j.at("pipeline");
      m.config_hash = j.at("config_hash");
      m.config = j.at("config");
      for (const auto& o : j.at("inputs")) m.inputs.push_back({o.at("file"), o.at("sha256"), o.at("bytes")});
      for (const auto& o : j.at("outputs")) m.outputs.push_back({o.at("file"), o.at("sha256"), o.at("bytes")});
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
};

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

class OutputSink {
 public:
  explicit OutputSink(std::filesystem::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& file, const std::string& text) {
    write_text(dir_ / file, text);
    entries_.push_back({file, to_hex(sha256(text)), text.size()});
  }

  const std::vector<OutputEntry>& entries() const noexcept { return entries_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  std::filesystem::path dir_;
  std::vector<OutputEntry> entries_;
};

struct RunContext {
  const ExperimentConfig& cfg;
  std::size_t workers;
  OutputSink& out;
  std::vector<OutputEntry>& inputs;
};

inline void record_input(RunContext& ctx, const std::string& as_written) {
  const auto text = read_text(ctx.cfg.resolve(as_written));
  ctx.inputs.push_back({as_written, to_hex(sha256(text)), text.size()});
}

inline Vocabulary load_vocabulary(RunContext& ctx) {
  return stage("vocabulary", [&] {
    if (!ctx.cfg.vocabulary) return Vocabulary::default_vocabulary();
    record_input(ctx, *ctx.cfg.vocabulary);
    return Vocabulary::load(ctx.cfg.resolve(*ctx.cfg.vocabulary));
  });
}

inline Corpus load_corpus_for(RunContext& ctx, const Vocabulary& vocab) {
  return stage("corpus", [&] {
    const auto& c = ctx.cfg.corpus;
    if (c.contains("path")) {
      const std::string path = c.at("path");
      record_input(ctx, path);
      Corpus corpus = load_corpus(ctx.cfg.resolve(path));
      if (corpus.empty()) throw DomainError("corpus file holds no records");
      validate_decodable(corpus, vocab);
      return corpus;
    }
    const auto& s = c.at("synthetic");
    LengthStats target;
    target.mean = s.at("mean").get<double>();
    target.std = s.at("std").get<double>();
    return generate_synthetic(s.at("n").get<std::size_t>(), target, s.at("seed").get<std::uint64_t>(), vocab);
  });
}

// ---- gen-corpus -----------------------------------------------------------

inline void run_gen_corpus(RunContext& ctx) {
  const auto vocab = load_vocabulary(ctx);
  const auto corpus = load_corpus_for(ctx, vocab);
  const auto bucket = ctx.cfg.params.at("bucket_width").get<std::size_t>();
  const auto stats = stage("stats", [&] { return corpus_stats(corpus, vocab, bucket); });
  stage("write", [&] {
    std::string jsonl;
    for (const auto& r : corpus.records) jsonl += record_to_jsonl(r) + "\n";
    ctx.out.write(ctx.cfg.params.at("output").get<std::string>(), jsonl);

    nlohmann::ordered_json s;
    s["records"] = corpus.size();
    s["mean"] = std::stod(fmt(stats.mean, 4));
    s["std"] = std::stod(fmt(stats.std, 4));
    s["bucket_width"] = stats.bucket_width;
    CsvWriter hist({"bucket_start", "count"});
    Series series{"records", {}, {}, false};
    for (const auto& [b, n] : stats.histogram) {
      hist.row({std::to_string(b), std::to_string(n)});
      series.x.push_back(static_cast<double>(b));
      series.y.push_back(static_cast<double>(n));
    }
    ctx.out.write("corpus_stats.json", s.dump(2) + "\n");
    ctx.out.write("length_histogram.csv", hist.str());
    ctx.out.write("length_histogram.svg",
                  render_svg({"Reasoning length distribution", "canonical tokens (bucket start)", "records", {series}, {}, ""}));
  });
}

// ---- coin -------------------------------------------------------------------

struct CoinSelection {
  std::vector<HonestTrace> calibration;
  std::vector<TraceRecord> suite;
};

/// Benign records: block count within [min_blocks, max_blocks] and every
/// honest block passes both heads. The first ones calibrate the aggregate
/// check; the following ones are attacked.
inline CoinSelection select_coin_records(const Corpus& corpus, const Vocabulary& vocab, const VerifierConfig& vcfg,
                                         const nlohmann::json& p) {
  const auto block_size = p.at("block_size").get<std::size_t>();
  const auto min_blocks = p.at("min_blocks").get<std::size_t>(), max_blocks = p.at("max_blocks").get<std::size_t>();
  const auto n_cal = p.at("calibration_records").get<std::size_t>(), n_suite = p.at("records").get<std::size_t>();
  CoinSelection sel;
  for (const auto& r : corpus.records) {
    if (sel.calibration.size() >= n_cal && sel.suite.size() >= n_suite) break;
    auto blocks = partition_blocks(canonical_tokenize(vocab, r.reasoning), block_size);
    if (blocks.size() < min_blocks || blocks.size() > max_blocks) continue;
    auto answer = canonical_tokenize(vocab, r.answer);
    if (!honest_trace_passes_rule(blocks, answer, vcfg)) continue;
    if (sel.calibration.size() < n_cal) {
      sel.calibration.push_back({std::move(blocks), std::move(answer)});
    } else {
      sel.suite.push_back(r);
    }
  }
  if (sel.calibration.empty() || sel.suite.empty()) {
    throw DomainError("corpus has too few benign records (calibration " + std::to_string(sel.calibration.size()) +
                      ", suite " + std::to_string(sel.suite.size()) + ")");
  }
  return sel;
}

enum : std::uint64_t { kCoinCalibrationStream = 0xca1b, kCoinAttackStream = 0xa77a };

inline void run_coin(RunContext& ctx) {
  const auto& p = ctx.cfg.params;
  const auto vocab = load_vocabulary(ctx);
  const auto corpus = load_corpus_for(ctx, vocab);
  const VerifierConfig base = ctx.cfg.verifier_config();
  const auto sel = stage("select", [&] { return select_coin_records(corpus, vocab, base, p); });

  VerifierConfig reuse_cfg = base, gen_cfg = base;
  gen_cfg.probing_ratio = p.at("generative_probing_ratio").get<double>();
  stage("calibrate", [&] {
    reuse_cfg.calibration = calibrate_aggregate(sel.calibration, reuse_cfg, derive_seed(ctx.cfg.seed, kCoinCalibrationStream));
    gen_cfg.calibration = calibrate_aggregate(sel.calibration, gen_cfg, derive_seed(ctx.cfg.seed, kCoinCalibrationStream));
  });

  std::vector<AttackKind> kinds;
  for (const auto& a : p.at("attacks")) kinds.push_back(AttackKind::parse(a.get<std::string>()));
  std::vector<bool> defenses;
  for (const auto& d : p.at("defense")) defenses.push_back(d.get<bool>());

  AttackOptions opts;
  opts.budget = p.at("budget").get<std::size_t>();
  opts.unique_tokens = p.at("unique_tokens").get<std::size_t>();
  opts.block_size = p.at("block_size").get<std::size_t>();

  struct Job {
    AttackKind kind;
    bool defense;
    std::size_t record;
  };
  std::vector<Job> jobs;
  for (const auto& k : kinds) {
    for (bool d : defenses) {
      for (std::size_t i = 0; i < sel.suite.size(); ++i) jobs.push_back({k, d, i});
    }
  }
  std::vector<AttackReport> reports(jobs.size());
  stage("attack", [&] {
    parallel_for(jobs.size(), ctx.workers, [&](std::size_t j) {
      const auto& job = jobs[j];
      AttackOptions o = opts;
      o.defense = job.defense;
      const auto& vcfg = job.kind.source == BlockSource::generative ? gen_cfg : reuse_cfg;
      reports[j] = inflate_iterative(sel.suite[job.record], job.kind, vcfg, o,
                                     derive_seed(ctx.cfg.seed, kCoinAttackStream, job.record), vocab);
    });
  });

  stage("write", [&] {
    nlohmann::ordered_json cal;
    cal["reuse"] = {{"probing_ratio", reuse_cfg.probing_ratio}, {"mean", reuse_cfg.calibration->mean},
                    {"std", reuse_cfg.calibration->std}, {"n", reuse_cfg.calibration->n}};
    cal["generative"] = {{"probing_ratio", gen_cfg.probing_ratio}, {"mean", gen_cfg.calibration->mean},
                         {"std", gen_cfg.calibration->std}, {"n", gen_cfg.calibration->n}};
    cal["suite_records"] = sel.suite.size();
    ctx.out.write("calibration.json", cal.dump(2) + "\n");

    std::string rows = attack_csv_header() + ",detected_by,final_root\n";
    for (const auto& r : reports) {
      rows += to_csv_row(r) + "," + (r.detected_by ? to_string(*r.detected_by) : "") + "," + r.final_root + "\n";
    }
    ctx.out.write("coin_attacks.csv", rows);

    CsvWriter summary({"kind", "defense", "records", "mean_inflation_percent", "reached_budget_rate", "detection_rate",
                       "mean_detected_at_block"});
    CsvWriter by_blocks({"kind", "defense", "original_blocks", "records", "mean_inflation_percent"});
    std::map<bool, std::vector<Series>> charts;
    for (const auto& k : kinds) {
      for (bool d : defenses) {
        std::size_t n = 0, full = 0, detected = 0;
        double infl = 0.0, at = 0.0;
        std::map<std::size_t, std::pair<std::size_t, double>> groups;
        for (std::size_t j = 0; j < jobs.size(); ++j) {
          if (!(jobs[j].kind == k) || jobs[j].defense != d) continue;
          const auto& r = reports[j];
          ++n;
          infl += r.inflation_percent;
          if (r.added_blocks == r.budget) ++full;
          if (r.detected) {
            ++detected;
            at += static_cast<double>(*r.detected_at_block);
          }
          auto& g = groups[r.original_blocks];
          ++g.first;
          g.second += r.inflation_percent;
        }
        summary.row({k.name(), d ? "true" : "false", std::to_string(n), fmt(infl / n, 4),
                     fmt(static_cast<double>(full) / n, 4), fmt(static_cast<double>(detected) / n, 4),
                     detected ? fmt(at / detected, 4) : ""});
        Series s{k.name(), {}, {}, true};
        for (const auto& [blocks, g] : groups) {
          by_blocks.row({k.name(), d ? "true" : "false", std::to_string(blocks), std::to_string(g.first),
                         fmt(g.second / g.first, 4)});
          s.x.push_back(static_cast<double>(blocks));
          s.y.push_back(g.second / g.first);
        }
        charts[d].push_back(std::move(s));
      }
    }
    ctx.out.write("coin_summary.csv", summary.str());
    ctx.out.write("coin_by_blocks.csv", by_blocks.str());
    for (const auto& [d, series] : charts) {
      ctx.out.write(d ? "coin_inflation_defense.svg" : "coin_inflation.svg",
                    render_svg({std::string("Mean inflation by original block count") + (d ? " (duplicate-hash defense)" : ""),
                                "original blocks", "inflation %", series, {}, ""}));
    }
  });
}

// ---- palace -----------------------------------------------------------------

enum : std::uint64_t { kSplitStream = 0x5b17, kTargetedStream = 0x7a46, kBackdoorStream = 0xbd00 };

inline void run_palace(RunContext& ctx) {
  const auto& p = ctx.cfg.params;
  const auto vocab = load_vocabulary(ctx);
  std::vector<AuxExample> aux = stage("corpus", [&] {
    if (p.at("aux").is_string()) {
      record_input(ctx, p.at("aux"));
      auto data = load_aux(ctx.cfg.resolve(p.at("aux")));
      for (const auto& ex : data) {
        vocab.require_decodable(ex.prompt);
        vocab.require_decodable(ex.answer);
      }
      return data;
    }
    return aux_from_corpus(load_corpus_for(ctx, vocab), vocab);
  });
  if (aux.size() < 2) throw PipelineError("corpus", "need at least two auxiliary examples");

  std::vector<AuxExample> train, holdout;
  stage("split", [&] {
    std::vector<std::size_t> order(aux.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_stream(ctx.cfg.seed, kSplitStream);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    auto n_hold = static_cast<std::size_t>(std::llround(p.at("holdout_fraction").get<double>() * aux.size()));
    n_hold = std::clamp<std::size_t>(n_hold, 1, aux.size() - 1);
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_hold ? holdout : train).push_back(aux[order[i]]);
  });

  const TrainOptions topts = ctx.cfg.train_options();
  const auto clean = stage("train", [&] { return train_auditor(vocab, train, topts); });
  const double tau = p.at("tau").get<double>();
  const double report_inflation = p.at("report_inflation").get<double>();
  const auto candidates = p.at("triggers").get<std::vector<std::string>>();

  const auto sweep = stage("trigger_sweep", [&] { return trigger_sweep(vocab, clean, holdout, candidates); });

  struct NormRow {
    std::string token;
    double triggered_rate = 0, normalized_rate = 0, agreement = 0;
  };
  double honest_rate = 0, inflated_rate = 0;
  std::vector<NormRow> norm_rows;
  stage("normalization", [&] {
    const double n = static_cast<double>(holdout.size());
    std::vector<FlagDecision> base;
    for (const auto& ex : holdout) {
      const double reported = std::round(ex.label * (1.0 + report_inflation));
      honest_rate += flag_report(vocab, clean, ex.prompt, ex.answer, ex.label, tau).flagged;
      base.push_back(flag_report(vocab, clean, ex.prompt, ex.answer, reported, tau));
      inflated_rate += base.back().flagged;
    }
    honest_rate /= n;
    inflated_rate /= n;
    for (const auto& cand : candidates) {
      NormRow row{cand};
      for (std::size_t i = 0; i < holdout.size(); ++i) {
        const auto& ex = holdout[i];
        const auto triggered = with_suffix(ex.answer, cand);
        const double reported = base[i].reported;
        row.triggered_rate += flag_report(vocab, clean, ex.prompt, triggered, reported, tau).flagged;
        const auto normalized = flag_report(vocab, clean, ex.prompt, normalize_answer(triggered), reported, tau);
        row.normalized_rate += normalized.flagged;
        row.agreement += normalized.flagged == base[i].flagged;
      }
      row.triggered_rate /= n;
      row.normalized_rate /= n;
      row.agreement /= n;
      norm_rows.push_back(row);
    }
  });

  std::map<std::string, std::pair<std::size_t, double>> style;  // wins, prediction sum
  std::size_t style_n = 0;
  stage("style", [&] {
    std::map<std::string, std::map<std::string, std::string>> external;
    if (p.at("variants").is_string()) {
      record_input(ctx, p.at("variants"));
      external = load_variants(ctx.cfg.resolve(p.at("variants")));
    }
    const auto limit = std::min(holdout.size(), p.at("style_records").get<std::size_t>());
    for (std::size_t i = 0; i < limit; ++i) {
      const auto& ex = holdout[i];
      std::map<std::string, std::string> variants;
      if (!external.empty()) {
        auto it = external.find(ex.id);
        if (it == external.end()) continue;
        variants = it->second;
        variants.emplace("original", ex.answer);
      } else {
        variants = rewrite_variants(ex.answer);
      }
      const auto r = style_variant_eval(vocab, clean, ex.prompt, variants);
      ++style_n;
      ++style[r.best_variant].first;
      for (const auto& [name, pred] : r.per_variant_prediction) style[name].second += pred;
    }
  });

  struct PoisonRow {
    std::string mode;
    std::size_t poisoned = 0, evaluated = 0;
    CorruptionEffect effect;
    std::vector<double> loss;
  };
  std::vector<PoisonRow> poison_rows;
  for (auto mode : {PoisonSpec::Mode::targeted, PoisonSpec::Mode::backdoor}) {
    const char* key = mode == PoisonSpec::Mode::targeted ? "targeted" : "backdoor";
    if (!p.at(key).at("enabled").get<bool>()) continue;
    stage(key, [&] {
      const auto spec = ctx.cfg.poison_spec(mode);
      Rng rng = make_stream(ctx.cfg.seed, mode == PoisonSpec::Mode::targeted ? kTargetedStream : kBackdoorStream);
      const auto poisoned = corrupt_auxiliary(train, spec, rng);
      const auto model = train_auditor(vocab, poisoned.data, topts);
      PoisonRow row{key, poisoned.poisoned_ids.size()};
      if (mode == PoisonSpec::Mode::targeted) {
        std::vector<AuxExample> low;
        for (const auto& ex : holdout) {
          if (ex.label < spec.label_threshold) low.push_back(ex);
        }
        row.effect = evaluate_corruption(vocab, clean, model, low);
      } else {
        row.effect = evaluate_corruption(vocab, clean, model, holdout, spec.trigger);
      }
      row.evaluated = row.effect.evaluated;
      row.loss = model.training_meta.epoch_loss;
      poison_rows.push_back(std::move(row));
    });
  }

  stage("write", [&] {
    ctx.out.write("model_clean.json", clean.to_json().dump() + "\n");
    CsvWriter ts({"token", "mean_delta", "success_rate"});
    for (const auto& r : sweep) ts.row({r.token, fmt(r.mean_delta, 4), fmt(r.success_rate, 4)});
    ctx.out.write("trigger_sweep.csv", ts.str());

    CsvWriter fr({"scenario", "records", "flag_rate", "agreement_with_untriggered"});
    const auto n = std::to_string(holdout.size());
    fr.row({"honest", n, fmt(honest_rate, 4), ""});
    fr.row({"inflated", n, fmt(inflated_rate, 4), ""});
    for (const auto& r : norm_rows) {
      fr.row({"inflated+trigger:" + r.token, n, fmt(r.triggered_rate, 4), ""});
      fr.row({"inflated+trigger:" + r.token + "+normalized", n, fmt(r.normalized_rate, 4), fmt(r.agreement, 4)});
    }
    ctx.out.write("flag_rates.csv", fr.str());

    CsvWriter sv({"variant", "wins", "share", "mean_prediction"});
    for (const auto& [name, s] : style) {
      sv.row({name, std::to_string(s.first), fmt(style_n ? static_cast<double>(s.first) / style_n : 0.0, 4),
              fmt(style_n ? s.second / style_n : 0.0, 4)});
    }
    ctx.out.write("style_variants.csv", sv.str());

    CsvWriter pc({"mode", "poisoned", "evaluated", "fraction_inflated", "mean_inflation_percent",
                  "mean_inflation_vs_label_percent", "mean_shift_percent", "untriggered_drift"});
    for (const auto& r : poison_rows) {
      pc.row({r.mode, std::to_string(r.poisoned), std::to_string(r.evaluated), fmt(r.effect.fraction_inflated, 4),
              fmt(r.effect.mean_inflation_percent, 4), fmt(r.effect.mean_inflation_vs_label_percent, 4),
              fmt(r.effect.mean_shift_percent, 4), fmt(r.effect.untriggered_drift, 6)});
    }
    ctx.out.write("poisoning.csv", pc.str());

    std::vector<std::string> header = {"epoch", "clean"};
    for (const auto& r : poison_rows) header.push_back(r.mode);
    CsvWriter lc(header);
    std::vector<Series> series{{"clean", {}, {}, false}};
    for (const auto& r : poison_rows) series.push_back({r.mode, {}, {}, false});
    for (std::size_t e = 0; e < clean.training_meta.epoch_loss.size(); ++e) {
      std::vector<std::string> row = {std::to_string(e + 1), fmt(clean.training_meta.epoch_loss[e], 3)};
      series[0].x.push_back(static_cast<double>(e + 1));
      series[0].y.push_back(clean.training_meta.epoch_loss[e]);
      for (std::size_t k = 0; k < poison_rows.size(); ++k) {
        row.push_back(fmt(poison_rows[k].loss[e], 3));
        series[k + 1].x.push_back(static_cast<double>(e + 1));
        series[k + 1].y.push_back(poison_rows[k].loss[e]);
      }
      lc.row(row);
    }
    ctx.out.write("training_loss.csv", lc.str());
    ctx.out.write("training_loss.svg", render_svg({"Auditor training loss", "epoch", "MSE (tokens^2)", series, {}, ""}));
  });
}

// ---- stat -------------------------------------------------------------------

inline std::string trajectory_csv(const AuditTrajectory& t) {
  CsvWriter w({"index", "honest", "reported", "estimate", "z", "z_clipped", "m", "flagged"});
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool flagged = t.flagged_at && i + 1 >= *t.flagged_at;
    w.row({std::to_string(i + 1), std::to_string(t.honest[i]), std::to_string(t.reported[i]), fmt(t.estimate[i], 4),
           fmt(t.z[i], 4), fmt(t.z_clipped[i], 4), fmt_g(t.m[i]), flagged ? "true" : "false"});
  }
  return w.str();
}

inline std::string sweep_csv(const std::vector<SweepPoint>& points, bool offsets) {
  CsvWriter w({offsets ? "offset" : "amount", "amount", "feasible", "flagged", "flagged_at", "max_m", "z_scale",
               "net_inflation_tokens", "net_inflation_percent"});
  for (const auto& p : points) {
    w.row({std::to_string(offsets ? p.offset : p.amount), std::to_string(p.amount), p.feasible ? "true" : "false",
           p.flagged ? "true" : "false", p.flagged_at ? std::to_string(*p.flagged_at) : "", fmt_g(p.max_m),
           fmt(p.z_scale, 4), std::to_string(p.net_inflation_tokens), fmt(p.net_inflation_percent, 4)});
  }
  return w.str();
}

inline void run_stat(RunContext& ctx, bool sweeps_only) {
  const auto& p = ctx.cfg.params;
  const auto vocab = load_vocabulary(ctx);
  const auto corpus = load_corpus_for(ctx, vocab);
  const AuditConfig acfg = ctx.cfg.audit_config();
  const auto table = stage("estimate", [&] {
    return estimate_corpus(vocab, corpus, acfg.n_mc, derive_seed(ctx.cfg.seed, kEstimateStream), ctx.workers);
  });
  const double log_threshold = std::log10(acfg.threshold());

  if (!sweeps_only) {
    CsvWriter summary({"strategy", "kind", "period", "amount", "offset", "flagged", "flagged_at", "max_m", "z_scale",
                       "total_honest", "total_reported", "net_inflation_tokens", "net_inflation_percent"});
    for (const auto& [name, strategy] : ctx.cfg.strategies()) {
      const auto traj = stage("audit", [&] { return run_audit(table, strategy, acfg); });
      stage("write", [&] {
        ctx.out.write("trajectory_" + name + ".csv", trajectory_csv(traj));
        Series m{"log10 M", {}, {}, false}, z{"Z", {}, {}, false};
        for (std::size_t i = 0; i < traj.size(); ++i) {
          m.x.push_back(static_cast<double>(i + 1));
          m.y.push_back(std::max(std::log10(traj.m[i]), -10.0));
          z.x.push_back(static_cast<double>(i + 1));
          z.y.push_back(traj.z[i]);
        }
        ctx.out.write("trajectory_" + name + ".svg",
                      render_svg({"Audit martingale: " + name, "record", "log10 M (floored at -10)", {m}, log_threshold,
                                  "1/alpha"}));
        ctx.out.write("deviations_" + name + ".svg",
                      render_svg({"Per-record deviation Z: " + name, "record", "reported - estimate", {z}, 0.0, ""}));
        const double pct = traj.total_honest ? 100.0 * traj.net_inflation() / static_cast<double>(traj.total_honest) : 0.0;
        summary.row({name, strategy.name(), std::to_string(strategy.period), std::to_string(strategy.amount),
                     std::to_string(strategy.offset), traj.flagged() ? "true" : "false",
                     traj.flagged_at ? std::to_string(*traj.flagged_at) : "", fmt_g(traj.max_m()), fmt(traj.z_scale, 4),
                     std::to_string(traj.total_honest), std::to_string(traj.total_reported),
                     std::to_string(traj.net_inflation()), fmt(pct, 4)});
      });
    }
    ctx.out.write("strategies.csv", summary.str());
  }

  if (!p.at("sweep").is_null()) {
    const auto& s = p.at("sweep");
    const auto amounts = expand_range(s.at("amounts"), "stat.sweep.amounts");
    const auto result = stage("sweep", [&] {
      return sweep_inflation(table, std::vector<TokenCount>(amounts.begin(), amounts.end()),
                             s.at("period").get<std::size_t>(), acfg);
    });
    stage("write", [&] {
      ctx.out.write("sweep_inflation.csv", sweep_csv(result.points, false));
      Series m{"max log10 M", {}, {}, true};
      for (const auto& pt : result.points) {
        m.x.push_back(static_cast<double>(pt.amount));
        m.y.push_back(std::log10(pt.max_m));
      }
      ctx.out.write("sweep_inflation.svg",
                    render_svg({"Inflation sweep", "amount added every period", "max log10 M", {m}, log_threshold, "1/alpha"}));
    });
  }
  if (!p.at("offset_sweep").is_null()) {
    const auto& s = p.at("offset_sweep");
    const auto offsets = expand_range(s.at("offsets"), "stat.offset_sweep.offsets");
    const auto result = stage("offset_sweep", [&] {
      return sweep_offset(table, s.at("amount").get<TokenCount>(), s.at("period").get<std::size_t>(),
                          std::vector<TokenCount>(offsets.begin(), offsets.end()), acfg);
    });
    stage("write", [&] {
      ctx.out.write("sweep_offset.csv", sweep_csv(result.points, true));
      Series m{"max log10 M", {}, {}, true};
      for (const auto& pt : result.points) {
        if (!pt.feasible) continue;
        m.x.push_back(static_cast<double>(pt.offset));
        m.y.push_back(std::log10(pt.max_m));
      }
      ctx.out.write("sweep_offset.svg", render_svg({"Offset sweep (amount " + std::to_string(result.amount) + ")",
                                                    "offset on non-inflated records", "max log10 M", {m}, log_threshold,
                                                    "1/alpha"}));
    });
  }
}

}  // namespace detail

/// Executes the pipeline and writes outputs plus manifest.json into
/// cfg.output_dir. Worker count affects speed only, never outputs.
inline RunManifest run(const ExperimentConfig& cfg, Pipeline pipeline, std::size_t workers = 1) {
  check_pipeline(pipeline, cfg);
  detail::stage("output", [&] { std::filesystem::create_directories(cfg.output_dir); });
  detail::OutputSink sink(cfg.output_dir);
  RunManifest manifest;
  manifest.pipeline = to_string(pipeline);
  manifest.config = cfg.resolved();
  manifest.config_hash = to_hex(sha256(manifest.config.dump()));
  manifest.dir = cfg.output_dir;
  detail::RunContext ctx{cfg, std::max<std::size_t>(1, workers), sink, manifest.inputs};
  switch (pipeline) {
    case Pipeline::gen_corpus: detail::run_gen_corpus(ctx); break;
    case Pipeline::coin: detail::run_coin(ctx); break;
    case Pipeline::palace: detail::run_palace(ctx); break;
    case Pipeline::stat: detail::run_stat(ctx, false); break;
    case Pipeline::sweep: detail::run_stat(ctx, true); break;
  }
  manifest.outputs = sink.entries();
  detail::stage("write", [&] { write_text(cfg.output_dir / "manifest.json", manifest.serialize()); });
  return manifest;
}

inline RunManifest run(const ExperimentConfig& cfg, std::size_t workers = 1) {
  return run(cfg, default_pipeline(cfg.experiment), workers);
}

namespace detail {

using CsvTable = std::vector<std::map<std::string, std::string>>;

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
      else if (c == '"') quoted = false;
      else cur += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline CsvTable read_csv(const RunManifest& m, const std::string& file) {
  const auto* entry = m.find(file);
  if (!entry) throw Error("report: manifest lists no output '" + file + "'");
  const auto path = m.dir / file;
  if (!std::filesystem::exists(path)) throw Error("report: output missing on disk: " + path.string());
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  CsvTable rows;
  while (std::getline(in, line)) {
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) throw ParseError("report: malformed row in " + file);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = fields[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Human-readable summary of a completed run, read back from its outputs.
inline std::string emit_report(const RunManifest& m) {
  if (m.outputs.empty()) throw Error("report: manifest lists no outputs");
  for (const auto& o : m.outputs) {
    if (!std::filesystem::exists(m.dir / o.file)) throw Error("report: output missing on disk: " + o.file);
  }
  std::ostringstream os;
  os << "run: " << m.config.value("name", std::string("?")) << " (" << m.pipeline << ", seed "
     << m.config.value("seed", 0ULL) << ")\n";
  os << "config_hash: " << m.config_hash << "\n";

  if (m.pipeline == "gen-corpus") {
    const auto stats = nlohmann::json::parse(read_text(m.dir / "corpus_stats.json"));
    os << "records: " << stats.at("records") << "\nmean canonical length: " << stats.at("mean")
       << "\nstd: " << stats.at("std") << "\n";
  } else if (m.pipeline == "coin") {
    const auto summary = detail::read_csv(m, "coin_summary.csv");
    os << "\nattack                      defense  mean inflation %  reached budget  detected\n";
    for (const auto& r : summary) {
      char line[160];
      std::snprintf(line, sizeof line, "%-27s %-8s %16s  %14s  %8s\n", r.at("kind").c_str(), r.at("defense").c_str(),
                    r.at("mean_inflation_percent").c_str(), r.at("reached_budget_rate").c_str(),
                    r.at("detection_rate").c_str());
      os << line;
    }
    const auto groups = detail::read_csv(m, "coin_by_blocks.csv");
    for (const std::string defense : {"false", "true"}) {
      std::vector<std::string> kinds;
      std::map<std::string, std::map<std::string, std::string>> table;  // blocks -> kind -> mean
      for (const auto& r : groups) {
        if (r.at("defense") != defense) continue;
        if (std::find(kinds.begin(), kinds.end(), r.at("kind")) == kinds.end()) kinds.push_back(r.at("kind"));
        table[r.at("original_blocks")][r.at("kind")] = r.at("mean_inflation_percent");
      }
      if (kinds.empty()) continue;
      os << "\nmean inflation % by original block count (defense " << (defense == "true" ? "on" : "off") << ")\n";
      os << "blocks";
      for (const auto& k : kinds) os << "  " << k;
      os << "\n";
      std::vector<std::string> keys;
      for (const auto& [b, _] : table) keys.push_back(b);
      std::sort(keys.begin(), keys.end(), [](const std::string& a, const std::string& b) { return std::stoul(a) < std::stoul(b); });
      for (const auto& b : keys) {
        os << std::string(6 - std::min<std::size_t>(6, b.size()), ' ') << b;
        for (const auto& k : kinds) {
          const auto it = table[b].find(k);
          const std::string v = it == table[b].end() ? "-" : it->second;
          os << "  " << std::string(k.size() > v.size() ? k.size() - v.size() : 0, ' ') << v;
        }
        os << "\n";
      }
    }
  } else if (m.pipeline == "palace") {
    const auto sweep = detail::read_csv(m, "trigger_sweep.csv");
    os << "\ntrigger tokens (mean delta, success rate):\n";
    for (const auto& r : sweep) os << "  " << r.at("token") << ": " << r.at("mean_delta") << ", " << r.at("success_rate") << "\n";
    os << "\nflag rates:\n";
    for (const auto& r : detail::read_csv(m, "flag_rates.csv")) {
      os << "  " << r.at("scenario") << ": " << r.at("flag_rate");
      if (!r.at("agreement_with_untriggered").empty()) os << " (agreement " << r.at("agreement_with_untriggered") << ")";
      os << "\n";
    }
    os << "\nstyle variants (share of largest prediction):\n";
    for (const auto& r : detail::read_csv(m, "style_variants.csv")) os << "  " << r.at("variant") << ": " << r.at("share") << "\n";
    os << "\npoisoning:\n";
    for (const auto& r : detail::read_csv(m, "poisoning.csv")) {
      os << "  " << r.at("mode") << ": poisoned " << r.at("poisoned") << ", inflated fraction " << r.at("fraction_inflated")
         << ", mean inflation " << r.at("mean_inflation_percent") << "%, mean shift " << r.at("mean_shift_percent")
         << "%, untriggered drift " << r.at("untriggered_drift") << "\n";
    }
  } else if (m.pipeline == "stat" || m.pipeline == "sweep") {
    if (m.pipeline == "stat") {
      for (const auto& r : detail::read_csv(m, "strategies.csv")) {
        os << "\nstrategy " << r.at("strategy") << " (" << r.at("kind") << ")\n";
        os << "  flagged_at: " << (r.at("flagged_at").empty() ? "none" : r.at("flagged_at")) << "\n";
        os << "  max M: " << r.at("max_m") << "  z_scale: " << r.at("z_scale") << "\n";
        os << "  net inflation: " << r.at("net_inflation_tokens") << " tokens (" << r.at("net_inflation_percent") << "%)\n";
      }
    }
    if (m.find("sweep_inflation.csv")) {
      std::string first = "none";
      for (const auto& r : detail::read_csv(m, "sweep_inflation.csv")) {
        if (r.at("flagged") == "true") {
          first = r.at("amount") + " (flagged_at " + r.at("flagged_at") + ")";
          break;
        }
      }
      os << "\ninflation sweep: first failing amount: " << first << "\n";
    }
    if (m.find("sweep_offset.csv")) {
      std::string first = "none";
      for (const auto& r : detail::read_csv(m, "sweep_offset.csv")) {
        if (r.at("feasible") == "true" && r.at("flagged") == "false") {
          first = r.at("offset") + " (net inflation " + r.at("net_inflation_tokens") + " tokens, " +
                  r.at("net_inflation_percent") + "%)";
          break;
        }
      }
      os << "offset sweep: first passing offset: " << first << "\n";
    }
  }
  return os.str();
}

}  // namespace gauntlet
