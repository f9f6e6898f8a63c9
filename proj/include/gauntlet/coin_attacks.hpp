#pragma once

// Inflation attacks against the commitment auditor: four block sources, each
// optionally hash-diversified, driven by an append-and-reaudit loop.

#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "gauntlet/coin_verifier.hpp"
#include "gauntlet/commitment.hpp"
#include "gauntlet/corpus.hpp"
#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

enum class BlockSource { random_block, duplicate_all, top_block, generative };

struct AttackKind {
  BlockSource source = BlockSource::random_block;
  bool hash_unique = false;

  std::string name() const {
    static constexpr const char* kNames[] = {"random_block", "duplicate_all", "top_block", "generative"};
    return std::string(kNames[static_cast<int>(source)]) + (hash_unique ? "/hash_unique" : "/plain");
  }

  static AttackKind parse(const std::string& text) {
    AttackKind kind;
    std::string base = text;
    if (auto slash = text.find('/'); slash != std::string::npos) {
      base = text.substr(0, slash);
      const auto variant = text.substr(slash + 1);
      if (variant == "hash_unique") {
        kind.hash_unique = true;
      } else if (variant != "plain") {
        throw ParseError("attack kind: unknown variant '" + variant + "'");
      }
    }
    if (base == "random_block") kind.source = BlockSource::random_block;
    else if (base == "duplicate_all") kind.source = BlockSource::duplicate_all;
    else if (base == "top_block") kind.source = BlockSource::top_block;
    else if (base == "generative") kind.source = BlockSource::generative;
    else throw ParseError("attack kind: unknown source '" + base + "'");
    return kind;
  }

  static std::vector<AttackKind> all() {
    std::vector<AttackKind> kinds;
    for (bool unique : {false, true}) {
      for (auto src : {BlockSource::random_block, BlockSource::duplicate_all, BlockSource::top_block,
                       BlockSource::generative}) {
        kinds.push_back({src, unique});
      }
    }
    return kinds;
  }

  friend bool operator==(const AttackKind&, const AttackKind&) = default;
};

inline double inflation_percent(std::size_t original, std::size_t added) {
  if (original == 0) throw DomainError("inflation_percent: original count must be positive");
  return 100.0 * static_cast<double>(added) / static_cast<double>(original);
}

/// Inserts k random non-pad ids at the front or the back of the block content
/// (one coin flip per block), then truncates from the opposite end back to
/// the block size.
inline Block make_hash_unique(const Block& block, Rng& rng, std::size_t k, std::size_t vocab_size) {
  if (k < 1 || k > 8) throw DomainError("make_hash_unique: k must be in [1, 8]");
  if (vocab_size < 2) throw DomainError("make_hash_unique: vocabulary has no content tokens");
  const std::size_t size = block.size();
  std::vector<TokenId> content(block.ids.begin(), block.ids.begin() + static_cast<std::ptrdiff_t>(block.content_length()));
  std::vector<TokenId> inserted(k);
  for (auto& id : inserted) id = static_cast<TokenId>(1 + uniform_index(rng, vocab_size - 1));
  if (coin_flip(rng)) {
    content.insert(content.begin(), inserted.begin(), inserted.end());
    if (content.size() > size) content.resize(size);
  } else {
    content.insert(content.end(), inserted.begin(), inserted.end());
    if (content.size() > size) content.erase(content.begin(), content.begin() + static_cast<std::ptrdiff_t>(content.size() - size));
  }
  Block out;
  out.ids = std::move(content);
  out.ids.resize(size, kPadId);
  return out;
}

/// Produces the next adversarial block for one record. Stateful: the
/// duplicate_all cursor advances per call and the top block is scored once.
class BlockCrafter {
 public:
  BlockCrafter(BlockSource source, std::vector<Block> honest, TokenSeq answer, const VerifierConfig& cfg,
               std::size_t vocab_size)
      : source_(source), honest_(std::move(honest)), answer_(std::move(answer)), cfg_(cfg), vocab_size_(vocab_size) {
    if (source_ != BlockSource::generative && honest_.empty()) {
      throw DomainError("craft_block: reuse attacks need a non-empty honest trace");
    }
    block_size_ = honest_.empty() ? kDefaultBlockSize : honest_.front().size();
  }

  Block craft(Rng& rng) {
    switch (source_) {
      case BlockSource::random_block:
        return honest_[uniform_index(rng, honest_.size())];
      case BlockSource::duplicate_all: {
        const Block& b = honest_[cursor_ % honest_.size()];
        ++cursor_;
        return b;
      }
      case BlockSource::top_block:
        return honest_[top_index()];
      case BlockSource::generative:
        return generate(rng);
    }
    throw DomainError("craft_block: unknown source");
  }

  /// Index of the honest block maximising token_to_block + block_to_answer
  /// under an exhaustive evaluation of the verifier's own heads.
  std::size_t top_index() {
    if (!top_) {
      const auto answer_embedding = embed(answer_, cfg_.dim);
      double best = -1.0;
      std::size_t best_index = 0;
      for (std::size_t i = 0; i < honest_.size(); ++i) {
        const auto s = score_block_exhaustive(BlockFeatures::compute(honest_[i], answer_embedding, cfg_));
        if (s.token_to_block + s.block_to_answer > best) {
          best = s.token_to_block + s.block_to_answer;
          best_index = i;
        }
      }
      top_ = best_index;
    }
    return *top_;
  }

 private:
  // Unigram sampler: 0.8 from the answer's token distribution, 0.2 uniform
  // over the vocabulary.
  Block generate(Rng& rng) {
    Block b;
    b.ids.resize(block_size_);
    for (auto& id : b.ids) {
      if (!answer_.empty() && uniform_real(rng) < 0.8) {
        id = answer_.ids[uniform_index(rng, answer_.count())];
      } else {
        id = static_cast<TokenId>(1 + uniform_index(rng, vocab_size_ - 1));
      }
    }
    return b;
  }

  BlockSource source_;
  std::vector<Block> honest_;
  TokenSeq answer_;
  VerifierConfig cfg_;
  std::size_t vocab_size_;
  std::size_t block_size_;
  std::size_t cursor_ = 0;
  std::optional<std::size_t> top_;
};

struct AttackReport {
  std::string record_id;
  AttackKind kind;
  bool defense = false;
  std::size_t original_blocks = 0;
  std::size_t added_blocks = 0;
  double inflation_percent = 0.0;
  bool detected = false;
  std::optional<std::size_t> detected_at_block;
  std::optional<FailedCheck> detected_by;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  std::string final_root;
};

inline std::string attack_csv_header() {
  return "record_id,kind,defense,original_blocks,added_blocks,inflation_percent,detected,detected_at_block,seed";
}

inline std::string to_csv_row(const AttackReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << r.record_id << ',' << r.kind.name() << ',' << (r.defense ? "true" : "false") << ',' << r.original_blocks << ','
     << r.added_blocks << ',' << r.inflation_percent << ',' << (r.detected ? "true" : "false") << ',';
  if (r.detected_at_block) os << *r.detected_at_block;
  os << ',' << r.seed;
  return os.str();
}

struct AttackOptions {
  std::size_t budget = 1000;
  bool defense = false;
  std::size_t unique_tokens = 4;  // k for hash diversification
  std::size_t block_size = kDefaultBlockSize;
};

namespace detail {
enum : std::uint64_t { kAuditStream = 0xa0d1, kCraftStream = 0xc4af, kPerturbStream = 0x9e47 };
}

/// Appends one crafted block per iteration and re-audits the whole trace,
/// stopping at the first rejection or when the budget is exhausted. Only
/// appends that the audit accepted are counted and committed.
inline AttackReport inflate_iterative(const TraceRecord& record, AttackKind kind, const VerifierConfig& cfg,
                                      const AttackOptions& opts, std::uint64_t seed,
                                      const Vocabulary& vocab = Vocabulary::default_vocabulary()) {
  cfg.validate();
  if (opts.budget < 1) throw DomainError("inflate_iterative: budget must be >= 1");
  const auto honest = partition_blocks(canonical_tokenize(vocab, record.reasoning), opts.block_size);
  if (honest.empty()) throw DomainError("inflate_iterative: record '" + record.id + "' has empty reasoning");
  const auto answer = canonical_tokenize(vocab, record.answer);
  const auto answer_embedding = embed(answer, cfg.dim);

  Rng audit_rng = make_stream(seed, detail::kAuditStream);
  Rng craft_rng = make_stream(seed, detail::kCraftStream);
  Rng perturb_rng = make_stream(seed, detail::kPerturbStream);

  std::vector<Block> committed = honest;
  std::vector<std::shared_ptr<const BlockFeatures>> features;
  std::unordered_set<std::string> leaves;
  bool has_duplicate = false;
  for (const auto& b : honest) {
    auto f = std::make_shared<const BlockFeatures>(BlockFeatures::compute(b, answer_embedding, cfg));
    has_duplicate |= !leaves.insert(std::string(f->leaf.begin(), f->leaf.end())).second;
    features.push_back(std::move(f));
  }
  // Features of honest blocks are reused for exact copies.
  std::vector<std::shared_ptr<const BlockFeatures>> honest_features = features;

  BlockCrafter crafter(kind.source, honest, answer, cfg, vocab.size());
  AttackReport report;
  report.record_id = record.id;
  report.kind = kind;
  report.defense = opts.defense;
  report.original_blocks = honest.size();
  report.budget = opts.budget;
  report.seed = seed;

  std::vector<const BlockFeatures*> views;
  for (std::size_t iteration = 1; iteration <= opts.budget; ++iteration) {
    Block next = crafter.craft(craft_rng);
    std::shared_ptr<const BlockFeatures> f;
    if (kind.hash_unique) {
      next = make_hash_unique(next, perturb_rng, opts.unique_tokens, vocab.size());
    } else if (kind.source != BlockSource::generative) {
      for (std::size_t i = 0; i < honest.size(); ++i) {
        if (honest[i] == next) {
          f = honest_features[i];
          break;
        }
      }
    }
    if (!f) f = std::make_shared<const BlockFeatures>(BlockFeatures::compute(next, answer_embedding, cfg));
    const std::string leaf_key(f->leaf.begin(), f->leaf.end());
    const bool duplicate_now = has_duplicate || leaves.count(leaf_key) > 0;

    views.clear();
    for (const auto& p : features) views.push_back(p.get());
    views.push_back(f.get());
    const Verdict verdict = audit_features(views, cfg, audit_rng, opts.defense, duplicate_now);
    if (!verdict.accepted) {
      report.detected = true;
      report.detected_at_block = iteration;
      report.detected_by = verdict.failed_check;
      break;
    }
    has_duplicate = duplicate_now;
    leaves.insert(leaf_key);
    features.push_back(std::move(f));
    committed.push_back(std::move(next));
    ++report.added_blocks;
  }
  report.inflation_percent = inflation_percent(report.original_blocks, report.added_blocks);
  report.final_root = build_merkle(committed).root_hex();
  return report;
}

/// Accepted by an exhaustive honest audit: every block passes both heads.
inline bool honest_trace_passes_rule(const std::vector<Block>& blocks, const TokenSeq& answer,
                                     const VerifierConfig& cfg) {
  const auto answer_embedding = embed(answer, cfg.dim);
  for (const auto& b : blocks) {
    const auto s = score_block_exhaustive(BlockFeatures::compute(b, answer_embedding, cfg));
    if (s.token_to_block < cfg.threshold || s.block_to_answer < cfg.threshold) return false;
  }
  return true;
}

}  // namespace gauntlet
