#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ual/dataset.hpp"

namespace ual {

struct SynthOptions {
  std::size_t low_entropy = 64;   // arithmetic samples
  std::size_t high_entropy = 64;  // random-prose samples
  std::uint64_t seed = 0;
};

/// Two-regime corpus: deterministic arithmetic (one right answer) and seeded
/// random prose (many acceptable answers), interleaved. `scores` holds mock
/// judge scores keyed by sample id: 5-20 for arithmetic, 70-95 for prose.
struct SynthCorpus {
  Dataset dataset;
  std::map<std::string, int> scores;
};

SynthCorpus make_two_regime_corpus(const SynthOptions& options);

/// {"id": ..., "score": ...} lines in dataset order, for mock:table=.
std::string score_table_jsonl(const SynthCorpus& corpus);

}  // namespace ual
