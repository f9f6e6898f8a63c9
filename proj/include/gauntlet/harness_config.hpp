#pragma once

// Experiment configuration: one JSON document per experiment. User keys are
// merged over a default tree, so every resolved config spells out all of its
// parameters; unknown keys and type mismatches are rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gauntlet/coin_attacks.hpp"
#include "gauntlet/coin_verifier.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/martingale.hpp"
#include "gauntlet/palace.hpp"

namespace gauntlet {

enum class Experiment { gen_corpus, coin, palace, stat };

inline std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::gen_corpus: return "gen-corpus";
    case Experiment::coin: return "coin";
    case Experiment::palace: return "palace";
    case Experiment::stat: return "stat";
  }
  return "unknown";
}

inline Experiment parse_experiment(const std::string& s) {
  if (s == "gen-corpus") return Experiment::gen_corpus;
  if (s == "coin") return Experiment::coin;
  if (s == "palace") return Experiment::palace;
  if (s == "stat") return Experiment::stat;
  throw ConfigError("unknown experiment '" + s + "' (expected gen-corpus, coin, palace or stat)");
}

namespace detail {

using json = nlohmann::json;

inline json attack_names_all() {
  json names = json::array();
  for (const auto& k : AttackKind::all()) names.push_back(k.name());
  return names;
}

inline json corpus_defaults() {
  return {{"path", nullptr}, {"synthetic", {{"n", 1000}, {"mean", 953.76}, {"std", 654.5}, {"seed", nullptr}}}};
}

inline json module_defaults(Experiment e) {
  switch (e) {
    case Experiment::gen_corpus:
      return {{"output", "corpus.jsonl"}, {"bucket_width", 100}};
    case Experiment::coin:
      return {{"records", 200},
              {"calibration_records", 200},
              {"min_blocks", 2},
              {"max_blocks", 7},
              {"budget", 1000},
              {"block_size", 256},
              {"unique_tokens", 4},
              {"attacks", attack_names_all()},
              {"defense", json::array({false, true})},
              {"generative_probing_ratio", 0.5},
              {"verifier",
               {{"probing_ratio", 0.75},
                {"threshold", 0.5},
                {"aggregate", true},
                {"aggregate_zmax", 3.0},
                {"rule_quota", 1.0},
                {"token_probes", 16},
                {"context_radius", 16},
                {"dim", 64}}}};
    case Experiment::palace:
      return {{"aux", nullptr},
              {"variants", nullptr},
              {"holdout_fraction", 0.2},
              {"train",
               {{"epochs", 100}, {"learning_rate", 0.005}, {"batch_size", 16}, {"dim", 4096},
                {"precondition_floor", 0.01}}},
              {"tau", 0.25},
              {"report_inflation", 0.3},
              {"triggers", default_trigger_candidates()},
              {"style_records", 200},
              {"targeted",
               {{"enabled", true}, {"rate", 0.10}, {"label_threshold", 600.0}, {"factor", 5.0}, {"cap", 2917.26}}},
              {"backdoor",
               {{"enabled", true},
                {"rate", 0.052},
                {"label_threshold", 600.0},
                {"trigger", "Think harder"},
                {"target", 2917.0},
                {"noise_std", 150.0},
                {"cap", 2917.26},
                {"rate_base", "all"}}}};
    case Experiment::stat:
      return {{"n_mc", 64},
              {"alpha", 0.05},
              {"lambda0", 0.5},
              {"z_scale", 0.0},
              {"calibration_records", 50},
              {"calibration_quantile", 0.95},
              {"strategies", json::array({{{"name", "honest"}, {"kind", "honest"}}})},
              {"sweep", nullptr},
              {"offset_sweep", nullptr}};
  }
  return json::object();
}

inline json strategy_defaults() {
  return {{"name", ""}, {"kind", "honest"}, {"period", 10}, {"amount", 2000}, {"offset", 0}};
}

inline json sweep_defaults() { return {{"period", 10}, {"amounts", nullptr}}; }

inline json offset_sweep_defaults() {
  return {{"amount", 2500}, {"period", 10}, {"offsets", nullptr}};
}

inline bool same_kind(const json& d, const json& v) {
  if (d.is_number() && v.is_number()) {
    if (d.is_number_float()) return true;
    return !v.is_number_float() || std::trunc(v.get<double>()) == v.get<double>();
  }
  return d.type() == v.type();
}

/// Overlays `user` on `defaults`. A null default accepts any value.
inline json merge_defaults(const json& defaults, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError(where + ": expected an object");
  json out = defaults;
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown key '" + path + "'");
    const json& d = defaults.at(key);
    if (d.is_null() || value.is_null()) {
      out[key] = value;
    } else if (d.is_object()) {
      out[key] = merge_defaults(d, value, path);
    } else if (!same_kind(d, value)) {
      throw ConfigError("'" + path + "' has the wrong type (expected " + std::string(d.type_name()) + ")");
    } else if (d.is_number_integer() || d.is_number_unsigned()) {
      out[key] = static_cast<long long>(value.get<double>());
    } else {
      out[key] = value;
    }
  }
  return out;
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + where + "." + key + "' is missing or has the wrong type");
  }
}

inline std::vector<long long> expand_range(const json& spec, const std::string& where) {
  std::vector<long long> out;
  if (spec.is_array()) {
    for (const auto& v : spec) {
      if (!v.is_number()) throw ConfigError("'" + where + "' must hold numbers");
      out.push_back(v.get<long long>());
    }
  } else if (spec.is_object()) {
    const json r = merge_defaults({{"start", 0}, {"stop", 0}, {"step", 1}}, spec, where);
    const long long start = r["start"], stop = r["stop"], step = r["step"];
    if (step <= 0) throw ConfigError("'" + where + ".step' must be positive");
    for (long long v = start; v <= stop; v += step) out.push_back(v);
  } else {
    throw ConfigError("'" + where + "' must be a list or a {start, stop, step} range");
  }
  return out;
}

}  // namespace detail

struct ExperimentConfig {
  Experiment experiment = Experiment::stat;
  std::string name;
  std::uint64_t seed = 0;
  std::filesystem::path base_dir;    // relative paths resolve against this
  std::filesystem::path output_dir;  // not part of the resolved config
  std::optional<std::string> vocabulary;
  nlohmann::json corpus;  // either {"path"} or {"synthetic": {...}}
  nlohmann::json params;  // module block with defaults applied

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  /// The full parameter set recorded in the manifest and hashed.
  nlohmann::json resolved() const {
    nlohmann::json j;
    j["experiment"] = to_string(experiment);
    j["name"] = name;
    j["seed"] = seed;
    j["vocabulary"] = vocabulary ? nlohmann::json(*vocabulary) : nlohmann::json(nullptr);
    j["corpus"] = corpus;
    j[module_key()] = params;
    return j;
  }

  std::string module_key() const {
    return experiment == Experiment::gen_corpus ? "gen_corpus" : to_string(experiment);
  }

  VerifierConfig verifier_config() const {
    const auto& v = params.at("verifier");
    VerifierConfig cfg;
    cfg.probing_ratio = v.at("probing_ratio").get<double>();
    cfg.threshold = v.at("threshold").get<double>();
    cfg.aggregate_enabled = v.at("aggregate").get<bool>();
    cfg.aggregate_zmax = v.at("aggregate_zmax").get<double>();
    cfg.rule_quota = v.at("rule_quota").get<double>();
    cfg.token_probes = v.at("token_probes").get<std::size_t>();
    cfg.context_radius = v.at("context_radius").get<std::size_t>();
    cfg.dim = v.at("dim").get<std::size_t>();
    return cfg;
  }

  AuditConfig audit_config() const {
    AuditConfig cfg;
    cfg.n_mc = params.at("n_mc").get<std::size_t>();
    cfg.alpha = params.at("alpha").get<double>();
    cfg.lambda0 = params.at("lambda0").get<double>();
    cfg.z_scale = params.at("z_scale").get<double>();
    cfg.calibration_records = params.at("calibration_records").get<std::size_t>();
    cfg.calibration_quantile = params.at("calibration_quantile").get<double>();
    return cfg;
  }

  std::vector<std::pair<std::string, ReportStrategy>> strategies() const {
    std::vector<std::pair<std::string, ReportStrategy>> out;
    for (const auto& s : params.at("strategies")) {
      ReportStrategy r;
      const auto kind = s.at("kind").get<std::string>();
      if (kind == "honest") r.kind = ReportStrategy::Kind::honest;
      else if (kind == "periodic") r.kind = ReportStrategy::Kind::periodic;
      else if (kind == "periodic_with_offset") r.kind = ReportStrategy::Kind::periodic_with_offset;
      else throw ConfigError("stat.strategies: unknown kind '" + kind + "'");
      r.period = s.at("period").get<std::size_t>();
      r.amount = s.at("amount").get<TokenCount>();
      r.offset = s.at("offset").get<TokenCount>();
      out.emplace_back(s.at("name").get<std::string>(), r);
    }
    return out;
  }

  TrainOptions train_options() const {
    const auto& t = params.at("train");
    TrainOptions o;
    o.epochs = t.at("epochs").get<int>();
    o.learning_rate = t.at("learning_rate").get<double>();
    o.batch_size = t.at("batch_size").get<std::size_t>();
    o.dim = t.at("dim").get<std::size_t>();
    o.precondition_floor = t.at("precondition_floor").get<double>();
    o.seed = derive_seed(seed, 0x7a11);
    return o;
  }

  PoisonSpec poison_spec(PoisonSpec::Mode mode) const {
    const auto& b = params.at(mode == PoisonSpec::Mode::targeted ? "targeted" : "backdoor");
    PoisonSpec s = mode == PoisonSpec::Mode::targeted ? PoisonSpec::targeted_default() : PoisonSpec::backdoor_default();
    s.rate = b.at("rate").get<double>();
    s.label_threshold = b.at("label_threshold").get<double>();
    s.cap = b.at("cap").get<double>();
    if (mode == PoisonSpec::Mode::targeted) {
      s.factor = b.at("factor").get<double>();
    } else {
      s.trigger = b.at("trigger").get<std::string>();
      s.target = b.at("target").get<double>();
      s.noise_std = b.at("noise_std").get<double>();
      const auto base = b.at("rate_base").get<std::string>();
      if (base == "all") s.rate_base = PoisonSpec::RateBase::all;
      else if (base == "eligible") s.rate_base = PoisonSpec::RateBase::eligible;
      else throw ConfigError("palace.backdoor.rate_base must be 'all' or 'eligible'");
    }
    return s;
  }

  /// Parameter-level checks; everything a pipeline reads is validated here.
  void validate() const {
    if (name.empty()) throw ConfigError("'name' must not be empty");
    if (vocabulary && !std::filesystem::exists(resolve(*vocabulary))) {
      throw ConfigError("vocabulary file not found: " + *vocabulary);
    }
    const bool has_path = corpus.contains("path") && !corpus["path"].is_null();
    if (has_path) {
      if (!corpus["path"].is_string()) throw ConfigError("'corpus.path' must be a string");
      if (!std::filesystem::exists(resolve(corpus["path"]))) {
        throw ConfigError("corpus file not found: " + corpus["path"].get<std::string>());
      }
    } else {
      const auto& s = corpus.at("synthetic");
      if (detail::get<long long>(s, "n", "corpus.synthetic") < 1) throw ConfigError("'corpus.synthetic.n' must be >= 1");
      if (!(detail::get<double>(s, "mean", "corpus.synthetic") > 0.0)) throw ConfigError("'corpus.synthetic.mean' must be positive");
      if (detail::get<double>(s, "std", "corpus.synthetic") < 0.0) throw ConfigError("'corpus.synthetic.std' must be >= 0");
    }
    try {
      switch (experiment) {
        case Experiment::gen_corpus:
          if (params.at("bucket_width").get<long long>() < 1) throw ConfigError("'gen_corpus.bucket_width' must be >= 1");
          if (params.at("output").get<std::string>().empty()) throw ConfigError("'gen_corpus.output' must not be empty");
          break;
        case Experiment::coin: {
          verifier_config().validate();
          for (const auto& a : params.at("attacks")) AttackKind::parse(a.get<std::string>());
          if (params.at("attacks").empty()) throw ConfigError("'coin.attacks' must not be empty");
          for (const auto& d : params.at("defense")) {
            if (!d.is_boolean()) throw ConfigError("'coin.defense' must hold booleans");
          }
          if (params.at("budget").get<long long>() < 1) throw ConfigError("'coin.budget' must be >= 1");
          if (params.at("records").get<long long>() < 1) throw ConfigError("'coin.records' must be >= 1");
          if (params.at("calibration_records").get<long long>() < 1) throw ConfigError("'coin.calibration_records' must be >= 1");
          if (params.at("block_size").get<long long>() < 1) throw ConfigError("'coin.block_size' must be >= 1");
          const auto k = params.at("unique_tokens").get<long long>();
          if (k < 1 || k > 8) throw ConfigError("'coin.unique_tokens' must be in [1, 8]");
          const auto g = params.at("generative_probing_ratio").get<double>();
          if (!(g > 0.0) || g > 1.0) throw ConfigError("'coin.generative_probing_ratio' must be in (0, 1]");
          break;
        }
        case Experiment::palace: {
          for (const char* key : {"aux", "variants"}) {
            if (!params.at(key).is_null() && !params.at(key).is_string()) {
              throw ConfigError(std::string("'palace.") + key + "' must be a path or null");
            }
          }
          if (params.at("aux").is_string() && !std::filesystem::exists(resolve(params.at("aux")))) {
            throw ConfigError("auxiliary data file not found: " + params.at("aux").get<std::string>());
          }
          if (params.at("variants").is_string() && !std::filesystem::exists(resolve(params.at("variants")))) {
            throw ConfigError("variants file not found: " + params.at("variants").get<std::string>());
          }
          const auto h = params.at("holdout_fraction").get<double>();
          if (!(h > 0.0) || !(h < 1.0)) throw ConfigError("'palace.holdout_fraction' must be in (0, 1)");
          const auto o = train_options();
          if (o.epochs < 1 || !(o.learning_rate > 0.0) || o.batch_size < 1 || o.dim < 8) {
            throw ConfigError("'palace.train' has a non-positive parameter");
          }
          if (!(params.at("tau").get<double>() > 0.0)) throw ConfigError("'palace.tau' must be positive");
          if (params.at("triggers").empty()) throw ConfigError("'palace.triggers' must not be empty");
          params.at("triggers").get<std::vector<std::string>>();
          poison_spec(PoisonSpec::Mode::targeted).validate();
          poison_spec(PoisonSpec::Mode::backdoor).validate();
          break;
        }
        case Experiment::stat: {
          audit_config().validate();
          std::set<std::string> names;
          for (const auto& [n, s] : strategies()) {
            s.validate();
            if (n.empty()) throw ConfigError("every stat strategy needs a name");
            if (n.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_-") != std::string::npos) {
              throw ConfigError("strategy name '" + n + "' may only use [a-z0-9_-]");
            }
            if (!names.insert(n).second) throw ConfigError("duplicate strategy name '" + n + "'");
          }
          if (!params.at("sweep").is_null()) {
            const auto amounts = detail::expand_range(params["sweep"]["amounts"], "stat.sweep.amounts");
            if (amounts.empty()) throw ConfigError("'stat.sweep.amounts' must not be empty");
            if (!std::is_sorted(amounts.begin(), amounts.end())) throw ConfigError("'stat.sweep.amounts' must be ascending");
          }
          if (!params.at("offset_sweep").is_null()) {
            const auto offsets = detail::expand_range(params["offset_sweep"]["offsets"], "stat.offset_sweep.offsets");
            if (offsets.empty()) throw ConfigError("'stat.offset_sweep.offsets' must not be empty");
            if (!std::is_sorted(offsets.begin(), offsets.end())) throw ConfigError("'stat.offset_sweep.offsets' must be ascending");
          }
          break;
        }
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid ") + module_key() + " block: " + e.what());
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }

  static ExperimentConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir,
                                    const std::string& fallback_name) {
    using detail::json;
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    if (!doc.contains("experiment")) throw ConfigError("missing 'experiment'");
    if (!doc["experiment"].is_string()) throw ConfigError("'experiment' must be a string");
    ExperimentConfig cfg;
    cfg.experiment = parse_experiment(doc["experiment"]);
    cfg.base_dir = base_dir;
    const std::string mkey = cfg.module_key();
    static const std::set<std::string> common = {"experiment", "name", "seed", "output_dir", "vocabulary", "corpus"};
    for (const auto& [key, _] : doc.items()) {
      if (!common.count(key) && key != mkey) throw ConfigError("unknown key '" + key + "'");
    }
    if (!doc.contains("seed")) throw ConfigError("missing 'seed' (every experiment must be seeded)");
    if (!doc["seed"].is_number_unsigned() && !(doc["seed"].is_number_integer() && doc["seed"].get<long long>() >= 0)) {
      throw ConfigError("'seed' must be a non-negative integer");
    }
    cfg.seed = doc["seed"].get<std::uint64_t>();
    cfg.name = doc.contains("name") ? detail::get<std::string>(doc, "name", "") : fallback_name;
    if (doc.contains("output_dir")) {
      cfg.output_dir = cfg.resolve(detail::get<std::string>(doc, "output_dir", ""));
    } else {
      cfg.output_dir = base_dir / "runs" / cfg.name;
    }
    if (doc.contains("vocabulary") && !doc["vocabulary"].is_null()) {
      cfg.vocabulary = detail::get<std::string>(doc, "vocabulary", "");
    }
    json corpus = doc.contains("corpus") ? doc["corpus"] : json::object();
    if (!corpus.is_object()) throw ConfigError("'corpus' must be an object");
    if (corpus.contains("path") && corpus.contains("synthetic")) {
      throw ConfigError("'corpus' takes either 'path' or 'synthetic', not both");
    }
    if (corpus.contains("path")) {
      if (!corpus["path"].is_string()) throw ConfigError("'corpus.path' must be a string");
      cfg.corpus = {{"path", corpus["path"]}};
    } else {
      json merged = detail::merge_defaults(detail::corpus_defaults(), corpus, "corpus");
      if (merged["synthetic"]["seed"].is_null()) merged["synthetic"]["seed"] = cfg.seed;
      cfg.corpus = {{"synthetic", merged["synthetic"]}};
    }
    json module = doc.contains(mkey) ? doc[mkey] : json::object();
    cfg.params = detail::merge_defaults(detail::module_defaults(cfg.experiment), module, mkey);
    if (cfg.experiment == Experiment::stat) {
      json strategies = json::array();
      for (const auto& s : cfg.params["strategies"]) strategies.push_back(detail::merge_defaults(detail::strategy_defaults(), s, "stat.strategies"));
      cfg.params["strategies"] = strategies;
      if (!cfg.params["sweep"].is_null()) cfg.params["sweep"] = detail::merge_defaults(detail::sweep_defaults(), cfg.params["sweep"], "stat.sweep");
      if (!cfg.params["offset_sweep"].is_null()) {
        cfg.params["offset_sweep"] = detail::merge_defaults(detail::offset_sweep_defaults(), cfg.params["offset_sweep"], "stat.offset_sweep");
      }
    }
    cfg.validate();
    return cfg;
  }

  /// `seed_override` replaces the document's seed before defaults are
  /// derived from it.
  static ExperimentConfig load(const std::filesystem::path& path,
                               std::optional<std::uint64_t> seed_override = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    if (seed_override && doc.is_object()) doc["seed"] = *seed_override;
    return from_json(doc, path.parent_path(), path.stem().string());
  }
};

}  // namespace gauntlet
