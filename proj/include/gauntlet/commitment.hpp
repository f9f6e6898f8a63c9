#pragma once

// Token-quantity layer: fixed-size blocks committed as leaves of a SHA-256
// Merkle tree.
//
// Leaf   = SHA256(0x00 || id_0 || ... || id_{B-1}), ids as 4-byte little endian.
// Node   = SHA256(0x01 || left || right).
// A level with an odd number of nodes pairs its last node with itself.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "gauntlet/error.hpp"
#include "gauntlet/rng.hpp"
#include "gauntlet/tokenizer.hpp"

namespace gauntlet {

using Digest = std::array<std::uint8_t, 32>;

inline constexpr std::size_t kDefaultBlockSize = 256;

inline Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw Error("sha256: digest computation failed");
  }
  return out;
}

inline Digest sha256(std::string_view text) {
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

struct Block {
  std::vector<TokenId> ids;

  std::size_t size() const noexcept { return ids.size(); }
  /// Number of leading non-pad ids.
  std::size_t content_length() const noexcept {
    std::size_t n = ids.size();
    while (n > 0 && ids[n - 1] == kPadId) --n;
    return n;
  }
  friend bool operator==(const Block&, const Block&) = default;
};

/// Splits seq into ceil(len / block_size) blocks, padding the last with kPadId.
inline std::vector<Block> partition_blocks(const TokenSeq& seq, std::size_t block_size = kDefaultBlockSize) {
  if (block_size == 0) throw DomainError("partition_blocks: block_size must be >= 1");
  std::vector<Block> blocks;
  blocks.reserve((seq.count() + block_size - 1) / block_size);
  for (std::size_t start = 0; start < seq.count(); start += block_size) {
    Block b;
    b.ids.assign(block_size, kPadId);
    const std::size_t n = std::min(block_size, seq.count() - start);
    std::copy_n(seq.ids.begin() + static_cast<std::ptrdiff_t>(start), n, b.ids.begin());
    blocks.push_back(std::move(b));
  }
  return blocks;
}

/// Inverse of partition_blocks: concatenation with padding stripped.
inline TokenSeq unpartition_blocks(std::span<const Block> blocks) {
  TokenSeq seq;
  for (const auto& b : blocks) {
    const auto n = b.content_length();
    seq.ids.insert(seq.ids.end(), b.ids.begin(), b.ids.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return seq;
}

inline Digest leaf_hash(const Block& block) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(1 + 4 * block.ids.size());
  bytes.push_back(0x00);
  for (TokenId id : block.ids) {
    bytes.push_back(static_cast<std::uint8_t>(id & 0xff));
    bytes.push_back(static_cast<std::uint8_t>((id >> 8) & 0xff));
    bytes.push_back(static_cast<std::uint8_t>((id >> 16) & 0xff));
    bytes.push_back(static_cast<std::uint8_t>((id >> 24) & 0xff));
  }
  return sha256(bytes);
}

inline Digest node_hash(const Digest& left, const Digest& right) {
  std::array<std::uint8_t, 65> bytes{};
  bytes[0] = 0x01;
  std::copy(left.begin(), left.end(), bytes.begin() + 1);
  std::copy(right.begin(), right.end(), bytes.begin() + 33);
  return sha256(bytes);
}

struct InclusionProof {
  struct Step {
    Digest sibling;
    bool sibling_on_left;
  };
  std::size_t index = 0;
  std::size_t leaf_count = 0;
  std::vector<Step> siblings;
};

class MerkleTree {
 public:
  static MerkleTree from_leaves(std::vector<Digest> leaves) {
    if (leaves.empty()) throw DomainError("build_merkle: no blocks");
    MerkleTree tree;
    tree.levels_.push_back(std::move(leaves));
    while (tree.levels_.back().size() > 1) {
      const auto& below = tree.levels_.back();
      std::vector<Digest> above;
      above.reserve((below.size() + 1) / 2);
      for (std::size_t i = 0; i < below.size(); i += 2) {
        const Digest& right = i + 1 < below.size() ? below[i + 1] : below[i];
        above.push_back(node_hash(below[i], right));
      }
      tree.levels_.push_back(std::move(above));
    }
    return tree;
  }

  const Digest& root() const { return levels_.back().front(); }
  std::string root_hex() const { return to_hex(root()); }
  std::size_t leaf_count() const { return levels_.front().size(); }
  const std::vector<Digest>& leaves() const { return levels_.front(); }
  const std::vector<std::vector<Digest>>& levels() const { return levels_; }

  /// Recomputes every level from the leaves and compares.
  bool consistent() const {
    for (std::size_t l = 1; l < levels_.size(); ++l) {
      const auto& below = levels_[l - 1];
      for (std::size_t i = 0; i < levels_[l].size(); ++i) {
        const Digest& right = 2 * i + 1 < below.size() ? below[2 * i + 1] : below[2 * i];
        if (node_hash(below[2 * i], right) != levels_[l][i]) return false;
      }
    }
    return true;
  }

  InclusionProof prove(std::size_t index) const {
    if (index >= leaf_count()) {
      throw DomainError("prove: index " + std::to_string(index) + " out of range for " +
                        std::to_string(leaf_count()) + " leaves");
    }
    InclusionProof proof{index, leaf_count(), {}};
    std::size_t pos = index;
    for (std::size_t l = 0; l + 1 < levels_.size(); ++l) {
      const auto& level = levels_[l];
      if (pos % 2 == 1) {
        proof.siblings.push_back({level[pos - 1], true});
      } else {
        proof.siblings.push_back({pos + 1 < level.size() ? level[pos + 1] : level[pos], false});
      }
      pos /= 2;
    }
    return proof;
  }

 private:
  std::vector<std::vector<Digest>> levels_;
};

inline MerkleTree build_merkle(std::span<const Block> blocks) {
  if (blocks.empty()) throw DomainError("build_merkle: no blocks");
  std::vector<Digest> leaves;
  leaves.reserve(blocks.size());
  for (const auto& b : blocks) leaves.push_back(leaf_hash(b));
  return MerkleTree::from_leaves(std::move(leaves));
}

/// True iff `block` sits at `index` of the tree committed to by `root`. The
/// sibling sides are derived from the index and must agree with the proof.
inline bool verify_inclusion(const Digest& root, const Block& block, std::size_t index, const InclusionProof& proof) {
  if (index != proof.index || index >= proof.leaf_count) return false;
  Digest current = leaf_hash(block);
  std::size_t pos = index;
  std::size_t width = proof.leaf_count;
  for (const auto& step : proof.siblings) {
    if (width <= 1) return false;
    const bool expect_left = pos % 2 == 1;
    if (step.sibling_on_left != expect_left) return false;
    if (!expect_left && pos + 1 == width && step.sibling != current) return false;
    current = expect_left ? node_hash(step.sibling, current) : node_hash(current, step.sibling);
    pos /= 2;
    width = (width + 1) / 2;
  }
  return width == 1 && current == root;
}

struct ProofCheck {
  InclusionProof proof;
  bool valid;
};

/// Builds the proof for `index` and checks `block` against it.
inline ProofCheck prove_and_verify(const MerkleTree& tree, const Block& block, std::size_t index) {
  auto proof = tree.prove(index);
  const bool valid = verify_inclusion(tree.root(), block, index, proof);
  return {std::move(proof), valid};
}

/// ceil(ratio * n_blocks) distinct block indices, uniform without replacement, sorted.
inline std::vector<std::size_t> select_probes(std::size_t n_blocks, double probing_ratio, Rng& rng) {
  if (!(probing_ratio > 0.0) || probing_ratio > 1.0) throw DomainError("select_probes: ratio must be in (0, 1]");
  if (n_blocks == 0) return {};
  return sample_without_replacement(n_blocks, ceil_fraction(probing_ratio, n_blocks), rng);
}

}  // namespace gauntlet
