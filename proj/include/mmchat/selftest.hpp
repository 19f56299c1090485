#pragma once

#include <string>
#include <vector>

// Built-in correctness checks that need no data files: finite-difference
// gradient checks, metric oracles, preprocessing properties and seeded
// training determinism. Output is deterministic (no timings).
namespace mmchat::selftest {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Report {
  std::vector<Check> checks;
  bool ok() const;
  // One "PASS|FAIL name: detail" line per check.
  std::string text() const;
};

// Every layer type, the contrastive loss and the masked generation loss;
// each passes when the max relative error is below 1e-3.
std::vector<Check> gradient_checks();
// Library metrics against brute-force recomputation on `cases` seeded random
// inputs, plus hand-computed anchors.
std::vector<Check> metric_checks(int cases = 200, unsigned seed = 2024);
// Idempotence and sample-count identities on seeded random dialogues.
std::vector<Check> preprocessing_checks(int trials = 50, unsigned seed = 7);
// Two identical seeded training runs must give bit-identical parameters.
std::vector<Check> determinism_checks();

Report run_all();

}  // namespace mmchat::selftest
