#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <boost/random/lognormal_distribution.hpp>
#include <nlohmann/json.hpp>

#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

struct TraceRecord {
  std::string id;
  std::string prompt;
  std::string reasoning;
  std::string answer;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct Corpus {
  enum class Source { ingested, synthetic };

  std::vector<TraceRecord> records;
  Source source = Source::ingested;
  std::uint64_t seed = 0;  // meaningful for synthetic corpora only

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
};

struct LengthStats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t bucket_width = 100;
  std::map<std::size_t, std::size_t> histogram;  // bucket lower bound -> count
};

namespace detail {

struct JsonlLine {
  std::size_t line_no;
  nlohmann::json value;
};

/// Parses a JSONL file into objects, rejecting keys outside `allowed` and
/// missing `required` keys. Blank lines are skipped.
inline std::vector<JsonlLine> read_jsonl(const std::filesystem::path& path, const std::set<std::string>& allowed,
                                         const std::set<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<JsonlLine> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!value.is_object()) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected an object");
    for (const auto& [key, _] : value.items()) {
      if (!allowed.count(key)) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    }
    for (const auto& key : required) {
      if (!value.contains(key)) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": missing key '" + key + "'");
      }
    }
    out.push_back({line_no, std::move(value)});
  }
  return out;
}

inline std::string string_field(const JsonlLine& line, const char* key) {
  const auto& v = line.value.at(key);
  if (!v.is_string()) {
    throw ParseError("line " + std::to_string(line.line_no) + ": '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

/// Tracks the minimal segmentation length of a growing string.
class IncrementalMinCount {
 public:
  explicit IncrementalMinCount(const Vocabulary& vocab) : vocab_(vocab), best_{0} {}

  void append(std::string_view piece) {
    for (char c : piece) {
      text_.push_back(c);
      const std::size_t end = text_.size();
      std::size_t value = std::numeric_limits<std::size_t>::max();
      const std::size_t reach = std::min(end, vocab_.max_token_length());
      for (std::size_t len = 1; len <= reach; ++len) {
        const std::size_t start = end - len;
        if (best_[start] == std::numeric_limits<std::size_t>::max()) continue;
        if (vocab_.find(std::string_view(text_).substr(start, len))) value = std::min(value, best_[start] + 1);
      }
      best_.push_back(value);
    }
  }

  std::size_t count() const { return best_.back(); }
  const std::string& text() const { return text_; }

 private:
  const Vocabulary& vocab_;
  std::string text_;
  std::vector<std::size_t> best_;
};

inline const std::vector<std::string>& english_lexicon() {
  static const std::vector<std::string> words = {
      "the", "of", "and", "to", "in", "is", "it", "that", "for", "on", "as", "with", "this", "we", "at", "by", "from",
      "be", "or", "an", "are", "not", "so", "if", "then", "there", "their", "other", "these", "those", "here", "where",
      "when", "which", "what", "while", "value", "values", "sum", "term", "terms", "first", "second", "next", "last",
      "step", "steps", "check", "result", "results", "number", "numbers", "answer", "question", "function", "equation",
      "integer", "total", "count", "order", "point", "points", "line", "lines", "side", "sides", "angle", "area",
      "rate", "time", "distance", "case", "cases", "condition", "constraint", "solution", "method", "approach",
      "consider", "compute", "consistent", "find", "finding", "need", "needs", "gives", "given", "means", "implies",
      "therefore", "however", "because", "since", "thus", "again", "another", "each", "every", "both", "either",
      "more", "less", "than", "equal", "greater", "smaller", "larger", "factor", "factors", "prime", "even", "odd",
      "divide", "multiply", "add", "subtract", "remainder", "ratio", "pattern", "sequence", "series", "test",
      "recheck", "correct", "wrong", "maybe", "perhaps", "wait", "let", "me", "see", "think", "try", "use", "using",
      "reason", "reasoning", "patient", "symptom", "treatment", "dose", "risk", "history", "result", "string",
      "array", "loop", "index", "entry", "return", "note", "hence", "start", "end", "into", "onto", "under", "over",
      "inside", "outside", "interest", "station", "relation", "nation", "attention", "sentence", "entire"};
  return words;
}

}  // namespace detail

/// Reads a JSONL corpus: one {"id","prompt","reasoning","answer"} object per line.
inline Corpus load_corpus(const std::filesystem::path& path) {
  static const std::set<std::string> keys = {"id", "prompt", "reasoning", "answer"};
  const auto lines = detail::read_jsonl(path, keys, keys);
  Corpus corpus;
  corpus.source = Corpus::Source::ingested;
  std::unordered_map<std::string, std::size_t> first_line;
  for (const auto& line : lines) {
    TraceRecord rec{detail::string_field(line, "id"), detail::string_field(line, "prompt"),
                    detail::string_field(line, "reasoning"), detail::string_field(line, "answer")};
    auto [it, inserted] = first_line.emplace(rec.id, line.line_no);
    if (!inserted) {
      throw ValidationError("duplicate id '" + rec.id + "' on lines " + std::to_string(it->second) + " and " +
                            std::to_string(line.line_no));
    }
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

inline std::string record_to_jsonl(const TraceRecord& rec) {
  nlohmann::ordered_json obj;
  obj["id"] = rec.id;
  obj["prompt"] = rec.prompt;
  obj["reasoning"] = rec.reasoning;
  obj["answer"] = rec.answer;
  return obj.dump();
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& rec : corpus.records) out << record_to_jsonl(rec) << '\n';
}

/// Throws TokenizationError naming the record and field when any text field
/// holds a character the vocabulary cannot cover.
inline void validate_decodable(const Corpus& corpus, const Vocabulary& vocab) {
  for (const auto& rec : corpus.records) {
    for (const auto& [name, text] : {std::pair{"prompt", &rec.prompt}, std::pair{"reasoning", &rec.reasoning},
                                     std::pair{"answer", &rec.answer}}) {
      if (auto pos = vocab.first_undecodable(*text)) {
        throw TokenizationError("record '" + rec.id + "' field " + name + ": undecodable character at position " +
                                    std::to_string(*pos),
                                *pos);
      }
    }
  }
}

inline LengthStats length_stats(const std::vector<std::size_t>& counts, std::size_t bucket_width = 100) {
  if (counts.empty()) throw DomainError("corpus_stats: empty corpus");
  if (bucket_width == 0) throw DomainError("corpus_stats: bucket width must be positive");
  LengthStats stats;
  stats.bucket_width = bucket_width;
  double sum = 0.0;
  for (auto c : counts) {
    sum += static_cast<double>(c);
    ++stats.histogram[(c / bucket_width) * bucket_width];
  }
  stats.mean = sum / static_cast<double>(counts.size());
  double sq = 0.0;
  for (auto c : counts) sq += (static_cast<double>(c) - stats.mean) * (static_cast<double>(c) - stats.mean);
  stats.std = std::sqrt(sq / static_cast<double>(counts.size()));
  return stats;
}

/// Statistics of the canonical token counts of the reasoning texts.
inline LengthStats corpus_stats(const Corpus& corpus, const Vocabulary& vocab, std::size_t bucket_width = 100) {
  if (corpus.empty()) throw DomainError("corpus_stats: empty corpus");
  std::vector<std::size_t> counts;
  counts.reserve(corpus.size());
  for (const auto& rec : corpus.records) counts.push_back(canonical_count(vocab, rec.reasoning));
  return length_stats(counts, bucket_width);
}

/// Seed-reproducible corpus whose reasoning canonical counts follow a
/// log-normal law moment-matched to `target`, truncated to [1, mean + 6 std].
/// Answer and prompt lengths grow with the reasoning length so that a
/// length predictor has signal to learn.
inline Corpus generate_synthetic(std::size_t n, const LengthStats& target, std::uint64_t seed,
                                 const Vocabulary& vocab = Vocabulary::default_vocabulary()) {
  if (n == 0) throw DomainError("generate_synthetic: n must be >= 1");
  if (!(target.mean > 0.0)) throw DomainError("generate_synthetic: target mean must be positive");
  if (target.std < 0.0) throw DomainError("generate_synthetic: target std must be non-negative");

  const bool has_space = vocab.covers(' ');
  const std::string sep = has_space ? " " : "";
  const std::string full_stop = vocab.covers('.') ? "." : "";
  const std::string question = vocab.covers('?') ? "?" : full_stop;

  std::vector<std::string> words;
  for (const auto& w : detail::english_lexicon()) {
    if (!vocab.first_undecodable(w)) words.push_back(w);
  }
  std::vector<std::string> digits;
  for (char c = '0'; c <= '9'; ++c) {
    if (vocab.covers(c)) digits.emplace_back(1, c);
  }
  if (words.size() < 20) {
    // Vocabulary without English coverage: words are short token concatenations.
    std::vector<std::string> pieces;
    for (const auto& t : vocab.tokens()) {
      if (t != " ") pieces.push_back(t);
    }
    Rng lex_rng = make_stream(seed, 0x1e8);
    words.clear();
    for (int i = 0; i < 64; ++i) {
      std::string w;
      const std::size_t parts = 1 + uniform_index(lex_rng, 3);
      for (std::size_t p = 0; p < parts; ++p) w += pieces[uniform_index(lex_rng, pieces.size())];
      words.push_back(w);
    }
  }

  const double var_ratio = (target.std * target.std) / (target.mean * target.mean);
  const double sigma = std::sqrt(std::log1p(var_ratio));
  const double mu = std::log(target.mean) - 0.5 * sigma * sigma;
  const double upper = target.mean + 6.0 * target.std;

  Rng rng(derive_seed(seed, 0x5e7));
  Corpus corpus;
  corpus.source = Corpus::Source::synthetic;
  corpus.seed = seed;
  corpus.records.reserve(n);

  auto random_word = [&]() -> const std::string& { return words[uniform_index(rng, words.size())]; };
  auto sentences = [&](std::size_t n_words, const std::string& terminator) {
    std::string out;
    std::size_t in_sentence = 0;
    const std::size_t sentence_len = 6 + uniform_index(rng, 7);
    for (std::size_t w = 0; w < n_words; ++w) {
      if (!out.empty()) out += sep;
      out += random_word();
      if (++in_sentence == sentence_len && w + 1 < n_words) {
        out += full_stop;
        in_sentence = 0;
      }
    }
    return out + terminator;
  };

  for (std::size_t i = 0; i < n; ++i) {
    double length = 0.0;
    if (sigma == 0.0) {
      length = target.mean;
    } else {
      boost::random::lognormal_distribution<double> law(mu, sigma);
      do {
        length = law(rng);
      } while (length < 1.0 || length > upper);
    }
    const auto goal = static_cast<std::size_t>(std::max(1.0, std::round(length)));

    detail::IncrementalMinCount reasoning(vocab);
    std::size_t in_sentence = 0;
    std::size_t sentence_len = 6 + uniform_index(rng, 9);
    while (reasoning.count() < goal) {
      std::string piece;
      if (!reasoning.text().empty()) piece += sep;
      piece += random_word();
      if (++in_sentence == sentence_len) {
        piece += full_stop;
        in_sentence = 0;
        sentence_len = 6 + uniform_index(rng, 9);
      }
      reasoning.append(piece);
    }

    const double scale = static_cast<double>(goal);
    const auto prompt_words = static_cast<std::size_t>(std::max(3.0, std::round(5.0 + scale / 150.0 + gaussian(rng, 0.0, 1.5))));
    const auto answer_words = static_cast<std::size_t>(std::max(2.0, std::round(3.0 + scale / 40.0 + gaussian(rng, 0.0, 2.0))));
    std::string answer = sentences(answer_words, "");
    if (!digits.empty() && has_space) {
      std::string number;
      const std::size_t n_digits = 1 + uniform_index(rng, 3);
      for (std::size_t d = 0; d < n_digits; ++d) number += digits[uniform_index(rng, digits.size())];
      answer += full_stop + sep + "the answer is" + sep + number;
      if (vocab.first_undecodable(answer)) answer = sentences(answer_words, "");
    }
    answer += full_stop;

    char id[32];
    std::snprintf(id, sizeof id, "rec-%05zu", i);
    corpus.records.push_back(TraceRecord{id, sentences(prompt_words, question), reasoning.text(), answer});
  }
  return corpus;
}

}  // namespace gauntlet
