#pragma once

// Predictive reasoning-length auditor over (prompt, answer) and the attacks
// against it: trigger tokens, answer restyling, label poisoning and a
// phrase-triggered backdoor. The auditor is a linear regressor over hashed
// features, trained by deterministic mini-batch gradient descent.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gauntlet/corpus.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

struct AuxExample {
  std::string id;
  std::string prompt;
  std::string answer;
  double label = 1.0;  // reasoning-token count
};

/// Auxiliary data from a corpus: labels are canonical reasoning counts.
inline std::vector<AuxExample> aux_from_corpus(const Corpus& corpus, const Vocabulary& vocab) {
  std::vector<AuxExample> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus.records) {
    out.push_back({r.id, r.prompt, r.answer, static_cast<double>(std::max<std::size_t>(1, canonical_count(vocab, r.reasoning)))});
  }
  return out;
}

/// Corpus JSONL schema plus an integer "label".
inline std::vector<AuxExample> load_aux(const std::filesystem::path& path) {
  static const std::set<std::string> keys = {"id", "prompt", "reasoning", "answer", "label"};
  static const std::set<std::string> required = {"id", "prompt", "answer", "label"};
  std::vector<AuxExample> out;
  std::set<std::string> ids;
  for (const auto& line : detail::read_jsonl(path, keys, required)) {
    const auto& label = line.value.at("label");
    if (!label.is_number_integer() || label.get<long long>() < 1) {
      throw ValidationError("line " + std::to_string(line.line_no) + ": label must be an integer >= 1");
    }
    AuxExample ex{detail::string_field(line, "id"), detail::string_field(line, "prompt"),
                  detail::string_field(line, "answer"), static_cast<double>(label.get<long long>())};
    if (!ids.insert(ex.id).second) throw ValidationError("duplicate id '" + ex.id + "' on line " + std::to_string(line.line_no));
    out.push_back(std::move(ex));
  }
  return out;
}

inline constexpr std::size_t kDefaultFeatureDim = 4096;

/// Sparse feature vector with sorted, unique indices.
struct FeatureVector {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  double dot(std::span<const double> weights) const {
    double s = 0.0;
    for (std::size_t i = 0; i < index.size(); ++i) s += weights[index[i]] * value[i];
    return s;
  }
  std::vector<double> dense(std::size_t dim) const {
    std::vector<double> d(dim, 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) d[index[i]] = value[i];
    return d;
  }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

namespace detail {

// Reserved dense slots ahead of the hashed region.
enum : std::uint32_t { kSlotPromptChars = 0, kSlotAnswerChars = 1, kSlotAnswerTokens = 2, kReservedSlots = 3 };

inline constexpr double kLengthScale = 0.01;
inline constexpr double kCountScale = 0.1;

enum : std::uint64_t { kNsAnswerUnigram = 0xa1, kNsAnswerBigram = 0xa2, kNsPromptUnigram = 0x91 };

}  // namespace detail

/// Hashed (P, A) features: character lengths of P and A, canonical token count
/// of A, signed-hashed token unigrams and bigrams of A, token unigrams of P.
inline FeatureVector featurize(const Vocabulary& vocab, std::string_view prompt, std::string_view answer,
                               std::size_t dim = kDefaultFeatureDim) {
  if (dim <= detail::kReservedSlots) throw DomainError("featurize: dimension too small");
  const auto a = canonical_tokenize(vocab, answer);
  const auto p = canonical_tokenize(vocab, prompt);
  std::map<std::uint32_t, double> acc;
  auto put = [&](std::uint32_t slot, double v) {
    if (v != 0.0) acc[slot] += v;
  };
  put(detail::kSlotPromptChars, detail::kLengthScale * static_cast<double>(prompt.size()));
  put(detail::kSlotAnswerChars, detail::kLengthScale * static_cast<double>(answer.size()));
  put(detail::kSlotAnswerTokens, detail::kLengthScale * static_cast<double>(a.count()));
  const std::uint64_t hashed = dim - detail::kReservedSlots;
  auto hashed_put = [&](std::uint64_t key) {
    const std::uint64_t h = splitmix64(key);
    const double sign = (h >> 63) ? 1.0 : -1.0;
    acc[static_cast<std::uint32_t>(detail::kReservedSlots + h % hashed)] += sign * detail::kCountScale;
  };
  for (std::size_t i = 0; i < a.count(); ++i) {
    hashed_put((detail::kNsAnswerUnigram << 56) ^ a.ids[i]);
    if (i + 1 < a.count()) {
      hashed_put((detail::kNsAnswerBigram << 56) ^ (static_cast<std::uint64_t>(a.ids[i]) << 24) ^ a.ids[i + 1]);
    }
  }
  for (TokenId id : p.ids) hashed_put((detail::kNsPromptUnigram << 56) ^ id);

  FeatureVector fv;
  for (const auto& [slot, v] : acc) {
    if (v == 0.0) continue;  // signed collisions may cancel
    fv.index.push_back(slot);
    fv.value.push_back(v);
  }
  return fv;
}

struct TrainingMeta {
  int epochs = 100;
  double learning_rate = 0.005;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
  double label_scale = 1.0;
  std::vector<double> epoch_loss;  // mean squared error, tokens^2
};

struct AuditorModel {
  std::vector<double> weights;
  double bias = 0.0;
  TrainingMeta training_meta;

  std::size_t dim() const noexcept { return weights.size(); }

  nlohmann::json to_json() const {
    nlohmann::ordered_json j;
    j["dim"] = weights.size();
    j["weights"] = weights;
    j["bias"] = bias;
    j["training_meta"] = {{"epochs", training_meta.epochs},
                          {"learning_rate", training_meta.learning_rate},
                          {"seed", training_meta.seed},
                          {"batch_size", training_meta.batch_size},
                          {"label_scale", training_meta.label_scale},
                          {"epoch_loss", training_meta.epoch_loss}};
    return j;
  }

  static AuditorModel from_json(const nlohmann::json& j) {
    try {
      AuditorModel m;
      m.weights = j.at("weights").get<std::vector<double>>();
      if (m.weights.size() != j.at("dim").get<std::size_t>()) throw ParseError("auditor model: dim mismatch");
      m.bias = j.at("bias").get<double>();
      const auto& meta = j.at("training_meta");
      m.training_meta.epochs = meta.at("epochs").get<int>();
      m.training_meta.learning_rate = meta.at("learning_rate").get<double>();
      m.training_meta.seed = meta.at("seed").get<std::uint64_t>();
      m.training_meta.batch_size = meta.value("batch_size", std::size_t{16});
      m.training_meta.label_scale = meta.value("label_scale", 1.0);
      m.training_meta.epoch_loss = meta.value("epoch_loss", std::vector<double>{});
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("auditor model: ") + e.what());
    }
  }
};

struct TrainOptions {
  int epochs = 100;
  double learning_rate = 0.005;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
  std::size_t dim = kDefaultFeatureDim;
  double precondition_floor = 1e-2;
};

/// Least-squares fit by mini-batch gradient descent. Labels are divided by
/// their mean during optimisation; stored weights are in token units.
/// Example order per epoch is a seeded shuffle, so training is deterministic.
inline AuditorModel train_auditor(const Vocabulary& vocab, std::span<const AuxExample> data, const TrainOptions& opts) {
  if (data.empty()) throw DomainError("train_auditor: empty training data");
  if (opts.epochs < 1 || !(opts.learning_rate > 0.0) || opts.batch_size == 0) {
    throw DomainError("train_auditor: epochs, learning_rate and batch_size must be positive");
  }
  std::vector<FeatureVector> xs;
  xs.reserve(data.size());
  double label_sum = 0.0;
  for (const auto& ex : data) {
    if (!(ex.label >= 1.0)) throw DomainError("train_auditor: label of '" + ex.id + "' must be >= 1");
    xs.push_back(featurize(vocab, ex.prompt, ex.answer, opts.dim));
    label_sum += ex.label;
  }
  const double scale = label_sum / static_cast<double>(data.size());

  // Diagonal preconditioner: each coordinate's step is divided by its mean
  // square over the data (floored), which equalises the length slots and
  // the sparse hashed counts.
  std::vector<double> step(opts.dim, 0.0);
  for (const auto& x : xs) {
    for (std::size_t j = 0; j < x.index.size(); ++j) step[x.index[j]] += x.value[j] * x.value[j];
  }
  for (double& v : step) v = opts.learning_rate / std::max(v / static_cast<double>(xs.size()), opts.precondition_floor);

  std::vector<double> w(opts.dim, 0.0), grad(opts.dim, 0.0);
  double bias = 0.0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(opts.seed, 0x7a1);

  AuditorModel model;
  model.training_meta = TrainingMeta{opts.epochs, opts.learning_rate, opts.seed, opts.batch_size, scale, {}};
  std::vector<std::uint32_t> touched;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      double bias_grad = 0.0;
      touched.clear();
      for (std::size_t k = start; k < end; ++k) {
        const auto& x = xs[order[k]];
        const double residual = bias + x.dot(w) - data[order[k]].label / scale;
        bias_grad += residual * inv;
        for (std::size_t j = 0; j < x.index.size(); ++j) {
          if (grad[x.index[j]] == 0.0) touched.push_back(x.index[j]);
          grad[x.index[j]] += residual * x.value[j] * inv;
        }
      }
      for (auto idx : touched) {
        w[idx] -= step[idx] * grad[idx];
        grad[idx] = 0.0;
      }
      bias -= opts.learning_rate * bias_grad;
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double r = (bias + xs[i].dot(w)) * scale - data[i].label;
      loss += r * r;
    }
    loss /= static_cast<double>(xs.size());
    if (!std::isfinite(loss)) {
      throw TrainingDivergence("train_auditor: non-finite loss at epoch " + std::to_string(epoch), epoch);
    }
    model.training_meta.epoch_loss.push_back(loss);
  }
  for (double& v : w) v *= scale;
  model.weights = std::move(w);
  model.bias = bias * scale;
  return model;
}

inline double predict(const AuditorModel& model, const FeatureVector& x) {
  return std::max(1.0, model.bias + x.dot(model.weights));
}

/// dot(weights, featurize(P, A)) + bias, clamped to >= 1.
inline double predict(const Vocabulary& vocab, const AuditorModel& model, std::string_view prompt,
                      std::string_view answer) {
  return predict(model, featurize(vocab, prompt, answer, model.dim()));
}

struct FlagDecision {
  double predicted = 0.0;
  double reported = 0.0;
  double relative_deviation = 0.0;
  bool flagged = false;
};

/// One-sided deviation test: only over-reporting beyond tau is flagged.
inline FlagDecision flag_decision(double predicted, double reported, double tau) {
  if (!(tau > 0.0)) throw DomainError("flag_report: tau must be positive");
  FlagDecision d{predicted, reported, (reported - predicted) / std::max(predicted, 1.0), false};
  d.flagged = d.relative_deviation > tau;
  return d;
}

inline FlagDecision flag_report(const Vocabulary& vocab, const AuditorModel& model, std::string_view prompt,
                                std::string_view answer, double reported, double tau = 0.25) {
  return flag_decision(predict(vocab, model, prompt, answer), reported, tau);
}

/// Appended after a single space.
inline std::string with_suffix(std::string_view answer, std::string_view token) {
  std::string out(answer);
  out += ' ';
  out += token;
  return out;
}

inline std::vector<std::string> default_trigger_candidates() {
  return {"boxed", "nil", "9", "();", "end", "ok", "qed", "xx", "42", "done"};
}

struct TriggerResult {
  std::string token;
  double mean_delta = 0.0;
  double success_rate = 0.0;
};

/// Appends each candidate to every answer and measures the prediction shift.
/// Ranked by mean_delta, descending; ties keep candidate order.
inline std::vector<TriggerResult> trigger_sweep(const Vocabulary& vocab, const AuditorModel& model,
                                                std::span<const AuxExample> data,
                                                const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw DomainError("trigger_sweep: no candidates");
  if (data.empty()) throw DomainError("trigger_sweep: empty corpus");
  std::vector<double> base(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) base[i] = predict(vocab, model, data[i].prompt, data[i].answer);
  std::vector<TriggerResult> results;
  for (const auto& cand : candidates) {
    TriggerResult r{cand, 0.0, 0.0};
    std::size_t wins = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double delta = predict(vocab, model, data[i].prompt, with_suffix(data[i].answer, cand)) - base[i];
      r.mean_delta += delta;
      if (delta > 0.0) ++wins;
    }
    r.mean_delta /= static_cast<double>(data.size());
    r.success_rate = static_cast<double>(wins) / static_cast<double>(data.size());
    results.push_back(std::move(r));
  }
  std::stable_sort(results.begin(), results.end(),
                   [](const TriggerResult& a, const TriggerResult& b) { return a.mean_delta > b.mean_delta; });
  return results;
}

namespace detail {

inline bool is_terminator_at(std::string_view text, std::size_t i) {
  const char c = text[i];
  if (c != '.' && c != '!' && c != '?') return false;
  return i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
}

inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (is_terminator_at(text, i)) {
      std::size_t s = start;
      while (s < i && text[s] == ' ') ++s;
      out.emplace_back(text.substr(s, i + 1 - s));
      start = i + 1;
    }
  }
  std::size_t s = start;
  while (s < text.size() && text[s] == ' ') ++s;
  if (s < text.size()) out.emplace_back(text.substr(s));
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace detail

/// Pre-normalisation defense: drops trailing whitespace, then drops a trailing
/// fragment of at most two words that follows the last sentence terminator.
inline std::string normalize_answer(std::string_view answer) {
  std::size_t end = answer.size();
  while (end > 0 && std::isspace(static_cast<unsigned char>(answer[end - 1]))) --end;
  std::string_view text = answer.substr(0, end);
  std::optional<std::size_t> last;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (detail::is_terminator_at(text, i)) last = i;
  }
  if (!last || *last + 1 == text.size()) return std::string(text);
  std::istringstream words{std::string(text.substr(*last + 1))};
  std::size_t n_words = 0;
  for (std::string w; words >> w;) ++n_words;
  if (n_words <= 2) return std::string(text.substr(0, *last + 1));
  return std::string(text);
}

/// Rule-based restyling: original, long (restated clauses appended), verbose
/// (connective-padded sentences) and concise (first clause of each sentence).
inline std::map<std::string, std::string> rewrite_variants(std::string_view answer) {
  const auto sentences = detail::split_sentences(answer);
  std::map<std::string, std::string> out;
  out["original"] = std::string(answer);

  std::vector<std::string> restated;
  for (const auto& s : sentences) restated.push_back("put another way, " + s);
  out["long"] = sentences.empty() ? std::string(answer) : std::string(answer) + " " + detail::join(restated, " ");

  static const char* kConnectives[] = {"indeed, ", "in fact, ", "moreover, ", "notably, "};
  std::vector<std::string> padded;
  for (std::size_t i = 0; i < sentences.size(); ++i) padded.push_back(kConnectives[i % 4] + sentences[i]);
  out["verbose"] = sentences.empty() ? std::string(answer) : detail::join(padded, " ");

  std::vector<std::string> clipped;
  for (const auto& s : sentences) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) {
      clipped.push_back(s);
    } else {
      const char last = s.back();
      clipped.push_back(s.substr(0, comma) + ((last == '.' || last == '!' || last == '?') ? std::string(1, last) : ""));
    }
  }
  if (clipped.size() > 1) clipped.erase(clipped.begin(), clipped.end() - 1);
  out["concise"] = sentences.empty() ? std::string(answer) : detail::join(clipped, " ");
  return out;
}

/// Variant file rows: JSONL {"id", "variant_name", "answer"}.
inline std::map<std::string, std::map<std::string, std::string>> load_variants(const std::filesystem::path& path) {
  static const std::set<std::string> keys = {"id", "variant_name", "answer"};
  std::map<std::string, std::map<std::string, std::string>> out;
  for (const auto& line : detail::read_jsonl(path, keys, keys)) {
    out[detail::string_field(line, "id")][detail::string_field(line, "variant_name")] =
        detail::string_field(line, "answer");
  }
  return out;
}

struct StyleResult {
  std::string best_variant;
  std::map<std::string, double> per_variant_prediction;
};

/// Prediction per answer variant; the maximum wins, ties resolve to "original".
inline StyleResult style_variant_eval(const Vocabulary& vocab, const AuditorModel& model, std::string_view prompt,
                                      const std::map<std::string, std::string>& variants) {
  if (!variants.count("original")) throw DomainError("style_variant_eval: variants must include 'original'");
  StyleResult r;
  for (const auto& [name, text] : variants) r.per_variant_prediction[name] = predict(vocab, model, prompt, text);
  r.best_variant = "original";
  double best = r.per_variant_prediction.at("original");
  for (const auto& [name, value] : r.per_variant_prediction) {
    if (value > best) {
      best = value;
      r.best_variant = name;
    }
  }
  return r;
}

struct PoisonSpec {
  enum class Mode { targeted, backdoor };
  enum class RateBase { all, eligible };

  Mode mode = Mode::targeted;
  double rate = 0.10;
  double label_threshold = 600.0;
  double factor = 5.0;
  double cap = 2917.26;
  std::string trigger = "Think harder";
  double target = 2917.0;
  double noise_std = 150.0;
  /// Whether `rate` is a fraction of the whole dataset or of the eligible stratum.
  RateBase rate_base = RateBase::all;

  /// Three-sigma cap of a reference length distribution.
  static double three_sigma_cap(double mean, double std) { return mean + 3.0 * std; }

  static PoisonSpec targeted_default() { return PoisonSpec{}; }
  static PoisonSpec backdoor_default() {
    PoisonSpec s;
    s.mode = Mode::backdoor;
    s.rate = 0.052;
    return s;
  }

  void validate() const {
    if (!(rate > 0.0) || rate > 1.0) throw DomainError("poison spec: rate must be in (0, 1]");
    if (mode == Mode::targeted && !(factor > 1.0)) throw DomainError("poison spec: factor must exceed 1");
    if (!(cap >= 1.0)) throw DomainError("poison spec: cap must be >= 1");
    if (noise_std < 0.0) throw DomainError("poison spec: noise_std must be non-negative");
  }
};

struct PoisonResult {
  std::vector<AuxExample> data;
  std::set<std::string> poisoned_ids;
};

/// Rewrites the labels (and, for the backdoor, the answers) of a random
/// subset of examples whose label is below the threshold.
inline PoisonResult corrupt_auxiliary(std::span<const AuxExample> data, const PoisonSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < spec.label_threshold) eligible.push_back(i);
  }
  const std::size_t base = spec.rate_base == PoisonSpec::RateBase::all ? data.size() : eligible.size();
  const auto wanted = static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(base)));
  if (wanted > eligible.size()) {
    throw DomainError("corrupt_auxiliary: need " + std::to_string(wanted) + " examples below the threshold, have " +
                      std::to_string(eligible.size()) + " (short by " + std::to_string(wanted - eligible.size()) + ")");
  }
  PoisonResult out;
  out.data.assign(data.begin(), data.end());
  for (auto pick : sample_without_replacement(eligible.size(), wanted, rng)) {
    auto& ex = out.data[eligible[pick]];
    if (spec.mode == PoisonSpec::Mode::targeted) {
      ex.label = std::round(std::min(spec.factor * ex.label, spec.cap));
    } else {
      ex.answer = spec.trigger + " " + ex.answer;
      const double noisy = spec.noise_std > 0.0 ? gaussian(rng, spec.target, spec.noise_std) : spec.target;
      ex.label = std::round(std::clamp(noisy, 1.0, spec.cap));
    }
    out.poisoned_ids.insert(ex.id);
  }
  return out;
}

struct CorruptionEffect {
  double fraction_inflated = 0.0;
  /// Mean of 100 (poisoned - clean) / clean over the inflated examples.
  double mean_inflation_percent = 0.0;
  /// Same quantity measured against the ground-truth label instead of the clean model.
  double mean_inflation_vs_label_percent = 0.0;
  /// 100 (mean poisoned - mean clean) / mean clean over the evaluated set.
  double mean_shift_percent = 0.0;
  /// Mean |poisoned - clean| / clean on the unmodified answers.
  double untriggered_drift = 0.0;
  std::size_t evaluated = 0;
};

/// Compares a poisoned auditor with its clean twin. With a trigger the
/// inflation figures are measured on triggered copies of the answers.
inline CorruptionEffect evaluate_corruption(const Vocabulary& vocab, const AuditorModel& clean,
                                            const AuditorModel& poisoned, std::span<const AuxExample> eval_set,
                                            const std::optional<std::string>& trigger = std::nullopt) {
  if (clean.dim() != poisoned.dim()) throw DomainError("evaluate_corruption: models use different feature spaces");
  CorruptionEffect e;
  e.evaluated = eval_set.size();
  if (eval_set.empty()) return e;
  std::size_t inflated = 0;
  double sum_p = 0.0, sum_c = 0.0;
  for (const auto& ex : eval_set) {
    const auto plain = featurize(vocab, ex.prompt, ex.answer, clean.dim());
    const double pc = predict(clean, plain), pp = predict(poisoned, plain);
    e.untriggered_drift += std::abs(pp - pc) / pc;

    const auto x = trigger ? featurize(vocab, ex.prompt, *trigger + " " + ex.answer, clean.dim()) : plain;
    const double c = trigger ? predict(clean, x) : pc;
    const double p = trigger ? predict(poisoned, x) : pp;
    sum_c += c;
    sum_p += p;
    if (p > c) {
      ++inflated;
      e.mean_inflation_percent += 100.0 * (p - c) / c;
      e.mean_inflation_vs_label_percent += 100.0 * (p - ex.label) / ex.label;
    }
  }
  const double n = static_cast<double>(eval_set.size());
  e.untriggered_drift /= n;
  e.fraction_inflated = static_cast<double>(inflated) / n;
  if (inflated) {
    e.mean_inflation_percent /= static_cast<double>(inflated);
    e.mean_inflation_vs_label_percent /= static_cast<double>(inflated);
  }
  e.mean_shift_percent = 100.0 * (sum_p - sum_c) / sum_c;
  return e;
}

}  // namespace gauntlet
