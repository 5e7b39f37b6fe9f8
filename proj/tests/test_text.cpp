#include <doctest.h>

#include <random>

#include "ual/dataset.hpp"
#include "ual/error.hpp"
#include "ual/io.hpp"
#include "ual/tokenizer.hpp"
#include "ual/trainer.hpp"

using namespace ual;

TEST_CASE("tokenize examples") {
  CHECK(tokenize("") == std::vector<int>{kBos, kEos});
  CHECK(tokenize("ab") == std::vector<int>{kBos, 97, 98, kEos});
  CHECK(tokenize("\xff") == std::vector<int>{kBos, 255, kEos});
  CHECK(kByteVocabSize == 259);
}

TEST_CASE("detokenize inverts tokenize on random byte strings") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> len(0, 64);
  for (int i = 0; i < 1000; ++i) {
    std::string s(static_cast<std::size_t>(len(rng)), '\0');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    CHECK(detokenize(tokenize(s)) == s);
  }
  const std::vector<int> with_pad{kBos, 104, kPad, 105, kEos};
  CHECK(detokenize(with_pad) == "hi");
}

TEST_CASE("dataset parse and serialize round-trip") {
  const std::string text =
      "{\"id\":\"a\",\"instruction\":\"x\",\"response\":\"y\"}\n"
      "\n"
      "{\"id\":\"b\",\"instruction\":\"caf\xc3\xa9\",\"response\":\"\",\"uncertainty\":0.25}\r\n";
  const auto ds = parse_dataset(text);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].id == "a");
  CHECK(!ds[0].uncertainty);
  CHECK(ds[1].instruction == "caf\xc3\xa9");
  CHECK(*ds[1].uncertainty == 0.25);
  CHECK(parse_dataset(serialize_dataset(ds)) == ds);
}

TEST_CASE("dataset errors carry the line number") {
  std::string text;
  for (int i = 1; i <= 6; ++i) {
    text += "{\"id\":\"s" + std::to_string(i) + "\",\"instruction\":\"q\",\"response\":\"r\"}\n";
  }
  SUBCASE("malformed JSON") {
    text += "{\"id\": \"s7\", \"instruction\": \n";
    try {
      parse_dataset(text);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("line 7") != std::string::npos);
      CHECK(e.code() == ExitCode::kInputError);
    }
  }
  SUBCASE("missing field") {
    text += "{\"id\": \"s7\", \"instruction\": \"q\"}\n";
    CHECK_THROWS_WITH_AS(parse_dataset(text), doctest::Contains("line 7"), FormatError);
  }
  SUBCASE("wrong type") {
    text += "{\"id\": \"s7\", \"instruction\": \"q\", \"response\": \"r\", \"uncertainty\": \"high\"}\n";
    CHECK_THROWS_WITH_AS(parse_dataset(text), doctest::Contains("line 7"), FormatError);
  }
}

TEST_CASE("encode_sample masks response tokens and the final EOS") {
  const auto e = encode_sample({"x", "ab", "cd", {}}, 16);
  // Sequence: BOS a b c d EOS
  CHECK(e.inputs == std::vector<int>{kBos, 'a', 'b', 'c', 'd'});
  CHECK(e.targets == std::vector<int>{'a', 'b', 'c', 'd', kEos});
  CHECK(e.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
}

TEST_CASE("encode_sample truncates the instruction from the left") {
  const auto e = encode_sample({"x", "0123456789", "abc", {}}, 8);
  CHECK(e.inputs.size() == 8);
  // BOS 0..9 a b c EOS is 15 tokens; 14 inputs must shrink to 8, so 6 bytes go.
  CHECK(e.inputs == std::vector<int>{kBos, '6', '7', '8', '9', 'a', 'b', 'c'});
  CHECK(e.targets == std::vector<int>{'6', '7', '8', '9', 'a', 'b', 'c', kEos});
  std::size_t masked = 0;
  for (auto m : e.mask) masked += m;
  CHECK(masked == 4);
}

TEST_CASE("encode_sample keeps a response that exactly fits and rejects a longer one") {
  // Response of T-1 bytes: BOS + response + EOS is T + 1 tokens, so T inputs.
  const auto fit = encode_sample({"x", "instruction", std::string(7, 'r'), {}}, 8);
  CHECK(fit.inputs.size() == 8);
  CHECK(fit.inputs[0] == kBos);
  CHECK_THROWS_AS(encode_sample({"x", "", std::string(8, 'r'), {}}, 8), InputError);
}

TEST_CASE("make_batch right-pads") {
  const auto a = encode_sample({"a", "q", "r", {}}, 16);
  const auto b = encode_sample({"b", "qqq", "rrr", {}}, 16);
  const EncodedSample* members[] = {&a, &b};
  const double v[] = {0.1, 0.2};
  const auto batch = make_batch(members, v);
  CHECK(batch.batch_size() == 2);
  CHECK(batch.seq_len() == b.inputs.size());
  CHECK(batch.inputs.tokens[a.inputs.size()] == kPad);
  CHECK(batch.loss_mask[a.inputs.size()] == 0);
  CHECK(batch.sample_ids == std::vector<std::string>{"a", "b"});
  CHECK(batch.smoothing == std::vector<double>{0.1, 0.2});
}

TEST_CASE("sha256") {
  CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
