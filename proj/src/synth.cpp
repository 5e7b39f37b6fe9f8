#include "ual/synth.hpp"

#include <array>
#include <random>

#include <json.hpp>

namespace ual {

namespace {

constexpr std::array<const char*, 8> kTopics = {"the sea", "a city", "the night", "a garden",
                                                "winter", "a journey", "music", "an old friend"};

constexpr std::array<const char*, 40> kWords = {
    "soft",  "light", "over",  "under", "green", "quiet", "river", "stone", "wind",  "bright",
    "slow",  "warm",  "cold",  "deep",  "far",   "near",  "song",  "rain",  "cloud", "path",
    "small", "open",  "gold",  "blue",  "wild",  "calm",  "dream", "shore", "hill",  "leaf",
    "glass", "smoke", "salt",  "bell",  "moss",  "sand",  "fire",  "frost", "tide",  "dust"};

Sample arithmetic_sample(std::size_t index, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> operand(10, 99);
  const int a = operand(rng);
  const int b = operand(rng);
  Sample s;
  s.id = "arith-" + std::to_string(index);
  s.instruction = "Compute " + std::to_string(a) + "+" + std::to_string(b) + ". Answer: ";
  s.response = std::to_string(a + b) + ".";
  return s;
}

Sample prose_sample(std::size_t index, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> topic(0, kTopics.size() - 1);
  std::uniform_int_distribution<std::size_t> word(0, kWords.size() - 1);
  std::uniform_int_distribution<int> length(5, 9);
  Sample s;
  s.id = "prose-" + std::to_string(index);
  s.instruction = std::string("Write a line about ") + kTopics[topic(rng)] + ". Answer: ";
  const int n = length(rng);
  for (int i = 0; i < n; ++i) {
    if (i > 0) s.response += ' ';
    s.response += kWords[word(rng)];
  }
  s.response += '.';
  return s;
}

}  // namespace

SynthCorpus make_two_regime_corpus(const SynthOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> low_score(5, 20);
  std::uniform_int_distribution<int> high_score(70, 95);
  SynthCorpus corpus;
  std::size_t low = 0, high = 0;
  while (low < options.low_entropy || high < options.high_entropy) {
    if (low < options.low_entropy) {
      auto s = arithmetic_sample(low++, rng);
      corpus.scores[s.id] = low_score(rng);
      corpus.dataset.push_back(std::move(s));
    }
    if (high < options.high_entropy) {
      auto s = prose_sample(high++, rng);
      corpus.scores[s.id] = high_score(rng);
      corpus.dataset.push_back(std::move(s));
    }
  }
  return corpus;
}

std::string score_table_jsonl(const SynthCorpus& corpus) {
  std::string out;
  for (const auto& s : corpus.dataset) {
    nlohmann::ordered_json row;
    row["id"] = s.id;
    row["score"] = corpus.scores.at(s.id);
    out += row.dump() + "\n";
  }
  return out;
}

}  // namespace ual
