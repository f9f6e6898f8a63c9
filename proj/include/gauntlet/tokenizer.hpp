#pragma once

// Ambiguous toy tokenizer: a vocabulary in which most strings admit several
// segmentations, plus the lattice machinery used to count, sample and
// minimise over those segmentations.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>

#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"

namespace gauntlet {

using TokenId = std::uint32_t;
using BigCount = boost::multiprecision::cpp_int;

inline constexpr TokenId kPadId = 0;

struct TokenSeq {
  std::vector<TokenId> ids;

  std::size_t count() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Ordered token list with a reserved padding id. Ids are assigned by list
/// position starting at 1; id 0 is the pad. Immutable once constructed.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> tokens, std::string pad) : tokens_(std::move(tokens)), pad_(std::move(pad)) {
    validate();
    build_trie();
  }

  static Vocabulary from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ParseError("vocabulary: expected a JSON object");
    for (const auto& [key, _] : doc.items()) {
      if (key != "tokens" && key != "pad") throw ParseError("vocabulary: unknown key '" + key + "'");
    }
    if (!doc.contains("tokens") || !doc["tokens"].is_array()) throw ParseError("vocabulary: 'tokens' must be an array");
    if (!doc.contains("pad") || !doc["pad"].is_string()) throw ParseError("vocabulary: 'pad' must be a string");
    std::vector<std::string> tokens;
    for (const auto& t : doc["tokens"]) {
      if (!t.is_string()) throw ParseError("vocabulary: every token must be a string");
      tokens.push_back(t.get<std::string>());
    }
    return Vocabulary(std::move(tokens), doc["pad"].get<std::string>());
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("vocabulary: cannot open " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("vocabulary: " + path.string() + ": " + e.what());
    }
    return from_json(doc);
  }

  nlohmann::json to_json() const { return {{"tokens", tokens_}, {"pad", pad_}}; }

  /// Experiment default: printable single characters plus 40 frequent
  /// lowercase bigrams/trigrams.
  static const Vocabulary& default_vocabulary() {
    static const Vocabulary vocab = [] {
      std::vector<std::string> tokens;
      for (char c = 'a'; c <= 'z'; ++c) tokens.emplace_back(1, c);
      for (char c = 'A'; c <= 'Z'; ++c) tokens.emplace_back(1, c);
      for (char c = '0'; c <= '9'; ++c) tokens.emplace_back(1, c);
      for (char c : std::string(" .,;:!?'()-+=/*")) tokens.emplace_back(1, c);
      for (const char* g : {"th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te", "of", "ed",
                            "is", "it", "al", "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le", "ve", "co",
                            "the", "ing", "and", "ion", "tio", "ent", "her", "for"}) {
        tokens.emplace_back(g);
      }
      return Vocabulary(std::move(tokens), "<pad>");
    }();
    return vocab;
  }

  /// Number of ids including the pad.
  std::size_t size() const noexcept { return tokens_.size() + 1; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& pad() const noexcept { return pad_; }
  std::size_t max_token_length() const noexcept { return max_len_; }

  const std::string& token(TokenId id) const {
    if (id == kPadId) return pad_;
    if (id > tokens_.size()) throw DomainError("vocabulary: invalid token id " + std::to_string(id));
    return tokens_[id - 1];
  }

  bool valid_id(TokenId id) const noexcept { return id <= tokens_.size(); }

  std::optional<TokenId> find(std::string_view s) const {
    int node = 0;
    for (char c : s) {
      node = trie_[node].next[static_cast<unsigned char>(c)];
      if (node < 0) return std::nullopt;
    }
    if (trie_[node].id == 0) return std::nullopt;
    return trie_[node].id;
  }

  /// Characters covered by single-character tokens.
  std::string alphabet() const {
    std::string out;
    for (const auto& t : tokens_) {
      if (t.size() == 1) out.push_back(t[0]);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool covers(char c) const noexcept { return single_[static_cast<unsigned char>(c)]; }

  /// First position holding a character no token covers, if any.
  std::optional<std::size_t> first_undecodable(std::string_view text) const {
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (!covers(text[i])) return i;
    }
    return std::nullopt;
  }

  void require_decodable(std::string_view text) const {
    if (auto pos = first_undecodable(text)) {
      throw TokenizationError("tokenizer: undecodable character at position " + std::to_string(*pos), *pos);
    }
  }

  /// Calls fn(length, id) for every token that matches text at position pos,
  /// in increasing length.
  template <typename Fn>
  void for_each_match(std::string_view text, std::size_t pos, Fn&& fn) const {
    int node = 0;
    for (std::size_t i = pos; i < text.size() && i - pos < max_len_; ++i) {
      node = trie_[node].next[static_cast<unsigned char>(text[i])];
      if (node < 0) return;
      if (trie_[node].id != 0) fn(i - pos + 1, trie_[node].id);
    }
  }

 private:
  struct TrieNode {
    std::array<int, 256> next;
    TokenId id = 0;
    TrieNode() { next.fill(-1); }
  };

  void validate() {
    if (tokens_.empty()) throw ValidationError("vocabulary: no tokens");
    if (pad_.empty()) throw ValidationError("vocabulary: empty pad string");
    std::unordered_set<std::string> seen;
    single_.fill(false);
    for (const auto& t : tokens_) {
      if (t.empty()) throw ValidationError("vocabulary: empty token");
      if (!seen.insert(t).second) throw ValidationError("vocabulary: duplicate token '" + t + "'");
      if (t.find(pad_) != std::string::npos) throw ValidationError("vocabulary: pad occurs inside token '" + t + "'");
      if (t.size() == 1) single_[static_cast<unsigned char>(t[0])] = true;
      max_len_ = std::max(max_len_, t.size());
    }
    for (const auto& t : tokens_) {
      for (char c : t) {
        if (!single_[static_cast<unsigned char>(c)]) {
          throw ValidationError("vocabulary: character '" + std::string(1, c) + "' of token '" + t +
                                "' is not a single-character token");
        }
      }
    }
  }

  void build_trie() {
    trie_.assign(1, TrieNode{});
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      int node = 0;
      for (char c : tokens_[i]) {
        auto& slot = trie_[node].next[static_cast<unsigned char>(c)];
        if (slot < 0) {
          slot = static_cast<int>(trie_.size());
          trie_.emplace_back();
        }
        node = trie_[node].next[static_cast<unsigned char>(c)];
      }
      trie_[node].id = static_cast<TokenId>(i + 1);
    }
  }

  std::vector<std::string> tokens_;
  std::string pad_;
  std::size_t max_len_ = 0;
  std::array<bool, 256> single_{};
  std::vector<TrieNode> trie_;
};

namespace detail {

/// Minimal number of tokens covering text[i..] for every i.
inline std::vector<std::size_t> min_suffix_lengths(const Vocabulary& vocab, std::string_view text) {
  constexpr auto kInf = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> best(text.size() + 1, kInf);
  best[text.size()] = 0;
  for (std::size_t i = text.size(); i-- > 0;) {
    vocab.for_each_match(text, i, [&](std::size_t len, TokenId) {
      if (best[i + len] != kInf) best[i] = std::min(best[i], best[i + len] + 1);
    });
  }
  return best;
}

}  // namespace detail

/// Minimal-length segmentation. Among minimal segmentations, each step takes
/// the longest token that still reaches the global minimum.
inline TokenSeq canonical_tokenize(const Vocabulary& vocab, std::string_view text) {
  vocab.require_decodable(text);
  const auto best = detail::min_suffix_lengths(vocab, text);
  TokenSeq seq;
  seq.ids.reserve(best[0]);
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t take = 0;
    TokenId id = 0;
    vocab.for_each_match(text, pos, [&](std::size_t len, TokenId tid) {
      if (best[pos + len] + 1 == best[pos]) {
        take = len;
        id = tid;
      }
    });
    seq.ids.push_back(id);
    pos += take;
  }
  return seq;
}

inline std::size_t canonical_count(const Vocabulary& vocab, std::string_view text) {
  vocab.require_decodable(text);
  return detail::min_suffix_lengths(vocab, text)[0];
}

inline std::string detokenize(const Vocabulary& vocab, const TokenSeq& seq) {
  std::string out;
  for (TokenId id : seq.ids) {
    if (!vocab.valid_id(id)) throw DomainError("detokenize: invalid token id " + std::to_string(id));
    out += vocab.token(id);
  }
  return out;
}

/// Result of the Monte-Carlo expected-count estimator.
struct McEstimate {
  double mean = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

/// The segmentation lattice of one string: suffix segmentation counts (exact,
/// arbitrary precision) and the forward transition law that samples a
/// segmentation uniformly.
class SegmentationLattice {
 public:
  SegmentationLattice(const Vocabulary& vocab, std::string_view text) : vocab_(&vocab), length_(text.size()) {
    vocab.require_decodable(text);
    const std::size_t n = text.size();
    std::vector<BigCount> suffix(n + 1);
    suffix[n] = 1;
    std::vector<std::size_t> min_rest(n + 1, 0), max_rest(n + 1, 0);
    for (std::size_t i = n; i-- > 0;) {
      std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
      vocab.for_each_match(text, i, [&](std::size_t len, TokenId) {
        suffix[i] += suffix[i + len];
        lo = std::min(lo, min_rest[i + len] + 1);
        hi = std::max(hi, max_rest[i + len] + 1);
      });
      min_rest[i] = lo;
      max_rest[i] = hi;
    }
    total_ = suffix[0];
    min_len_ = min_rest[0];
    max_len_ = max_rest[0];

    offsets_.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      offsets_[i] = edges_.size();
      const int shift = std::max(0, static_cast<int>(boost::multiprecision::msb(suffix[i])) - 62);
      const double denom = static_cast<double>(static_cast<std::uint64_t>(suffix[i] >> shift));
      double cumulative = 0.0;
      vocab.for_each_match(text, i, [&](std::size_t len, TokenId id) {
        const double num = static_cast<double>(static_cast<std::uint64_t>(suffix[i + len] >> shift));
        cumulative += num / denom;
        edges_.push_back(Edge{static_cast<std::uint32_t>(len), id, cumulative});
      });
    }
    offsets_[n] = edges_.size();
  }

  const BigCount& count() const noexcept { return total_; }
  std::size_t min_length() const noexcept { return min_len_; }
  std::size_t max_length() const noexcept { return max_len_; }

  /// One segmentation drawn uniformly from all segmentations.
  TokenSeq sample(Rng& rng) const {
    TokenSeq seq;
    walk(rng, [&](const Edge& e) { seq.ids.push_back(e.id); });
    return seq;
  }

  /// Token count of one uniformly drawn segmentation.
  std::size_t sample_count(Rng& rng) const {
    std::size_t tokens = 0;
    walk(rng, [&](const Edge&) { ++tokens; });
    return tokens;
  }

  McEstimate mc_estimate(std::size_t n_samples, std::uint64_t seed) const {
    if (n_samples == 0) throw DomainError("mc_expected_count: n_samples must be >= 1");
    Rng rng(seed);
    std::uint64_t total = 0;
    for (std::size_t s = 0; s < n_samples; ++s) total += sample_count(rng);
    return McEstimate{static_cast<double>(total) / static_cast<double>(n_samples), n_samples, seed};
  }

 private:
  struct Edge {
    std::uint32_t len;
    TokenId id;
    double cumulative;
  };

  template <typename Visit>
  void walk(Rng& rng, Visit&& visit) const {
    std::size_t pos = 0;
    while (pos < length_) {
      const std::size_t first = offsets_[pos], last = offsets_[pos + 1];
      std::size_t pick = last - 1;
      if (last - first > 1) {
        const double u = uniform_real(rng) * edges_[last - 1].cumulative;
        for (std::size_t e = first; e < last; ++e) {
          if (u < edges_[e].cumulative) {
            pick = e;
            break;
          }
        }
      }
      visit(edges_[pick]);
      pos += edges_[pick].len;
    }
  }

  const Vocabulary* vocab_;
  std::size_t length_;
  BigCount total_;
  std::size_t min_len_ = 0, max_len_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<Edge> edges_;
};

inline BigCount count_segmentations(const Vocabulary& vocab, std::string_view text) {
  return SegmentationLattice(vocab, text).count();
}

inline TokenSeq sample_segmentation(const Vocabulary& vocab, std::string_view text, Rng& rng) {
  return SegmentationLattice(vocab, text).sample(rng);
}

/// Mean token count over n_samples uniformly sampled segmentations.
inline McEstimate mc_expected_count(const Vocabulary& vocab, std::string_view text, std::size_t n_samples,
                                    std::uint64_t seed) {
  return SegmentationLattice(vocab, text).mc_estimate(n_samples, seed);
}

}  // namespace gauntlet
