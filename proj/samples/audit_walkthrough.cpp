// A short tour of the library on one synthetic record: tokenization
// ambiguity, block commitment, one commitment-audit attack and a tiny
// statistical audit.

#include <iostream>

#include "gauntlet/gauntlet.hpp"

int main() {
  using namespace gauntlet;
  const auto& vocab = Vocabulary::default_vocabulary();

  const std::string text = "the answer is there";
  std::cout << "text: \"" << text << "\"\n"
            << "  canonical tokens: " << canonical_count(vocab, text) << "\n"
            << "  segmentations: " << count_segmentations(vocab, text) << "\n"
            << "  expected tokens (uniform segmentation, 256 samples): "
            << mc_expected_count(vocab, text, 256, 1).mean << "\n";

  LengthStats target;
  target.mean = 600;
  target.std = 200;
  const auto corpus = generate_synthetic(200, target, 7, vocab);
  const auto& record = corpus.records.front();

  const auto blocks = partition_blocks(canonical_tokenize(vocab, record.reasoning));
  const auto tree = build_merkle(blocks);
  std::cout << "\nrecord " << record.id << ": " << blocks.size() << " blocks, root " << tree.root_hex().substr(0, 16)
            << "...\n";

  VerifierConfig cfg;
  std::vector<HonestTrace> honest;
  for (const auto& r : corpus.records) {
    honest.push_back({partition_blocks(canonical_tokenize(vocab, r.reasoning)), canonical_tokenize(vocab, r.answer)});
  }
  cfg.calibration = calibrate_aggregate(honest, cfg, 3);
  AttackOptions opts;
  opts.budget = 50;
  for (bool defense : {false, true}) {
    const auto report = inflate_iterative(record, AttackKind::parse("random_block/plain"), cfg, opts, 11, vocab);
    std::cout << "  random-block attack, defense " << (defense ? "on " : "off") << ": +" << report.added_blocks
              << " blocks (" << report.inflation_percent << "%), detected: " << (report.detected ? "yes" : "no") << "\n";
    opts.defense = true;
  }

  AuditConfig acfg;
  const auto table = estimate_corpus(vocab, corpus, acfg.n_mc, 5);
  for (TokenCount amount : {0, 300, 3000}) {
    const auto t = run_audit(table, ReportStrategy::periodic(amount), acfg);
    std::cout << "\nperiodic +" << amount << " every 10th record: flagged_at "
              << (t.flagged_at ? std::to_string(*t.flagged_at) : std::string("none")) << ", net inflation "
              << t.net_inflation() << " tokens";
  }
  std::cout << "\n";
}
