#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "recallprobe/query.hpp"
#include "recallprobe/tokenizer.hpp"

using namespace rp;

namespace {

std::string byte_symbol(int b) {
  return detail::cp_to_utf8(detail::byte_to_cp_table()[static_cast<std::size_t>(b)]);
}

// Byte symbols 0..255 plus a handful of merged tokens used across the cases.
BpeTokenizer make_bpe() {
  nlohmann::json vocab = nlohmann::json::object();
  for (int b = 0; b < 256; ++b) vocab[byte_symbol(b)] = b;
  const std::string sp = byte_symbol(' ');
  const std::string nl = byte_symbol('\n');
  vocab["lo"] = 256;
  vocab["low"] = 257;
  vocab[sp + "low"] = 258;
  vocab["er"] = 259;
  vocab[sp + "lower"] = 260;
  vocab[sp + sp] = 261;
  vocab[sp + sp + nl] = 262;
  vocab["it"] = 263;
  vocab["ab"] = 264;
  vocab["12"] = 265;
  vocab["b1"] = 266;
  const std::string merges = "l o\n"
                             "lo w\n" +
                             sp + " low\n" +
                             "e r\n" +
                             sp + "low er\n" +
                             sp + " " + sp + "\n" +
                             sp + sp + " " + nl + "\n" +
                             "i t\n"
                             "b 1\n"
                             "a b\n"
                             "1 2\n";
  return BpeTokenizer(vocab.dump(), merges);
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("byte to codepoint table matches the usual byte-level mapping") {
  const auto& table = detail::byte_to_cp_table();
  CHECK(table[static_cast<std::size_t>('A')] == 'A');
  CHECK(table[static_cast<std::size_t>('!')] == '!');
  CHECK(table[static_cast<std::size_t>(' ')] == 0x120);   // space
  CHECK(table[static_cast<std::size_t>('\n')] == 0x10a);  // newline
  CHECK(table[static_cast<std::size_t>('\t')] == 0x109);  // tab
  CHECK(table[0] == 0x100);
  // every byte maps to a distinct codepoint
  std::set<int> seen(table.begin(), table.end());
  CHECK(seen.size() == 256);
  CHECK(detail::cp_to_utf8(0x120) == "\xc4\xa0");
}

TEST_CASE("bpe merges follow rank order inside pre-tokens") {
  const BpeTokenizer tok = make_bpe();

  auto enc = tok.encode("low lower");
  REQUIRE(enc.ids == std::vector<int>{257, 260});
  CHECK(enc.spans[0].begin == 0);
  CHECK(enc.spans[0].end == 3);
  CHECK(enc.spans[1].begin == 3);  // leading space glued to the word
  CHECK(enc.spans[1].end == 9);

  // lowest rank wins leftmost; no merge joins the leftover l
  enc = tok.encode("lol");
  CHECK(enc.ids == std::vector<int>{256, static_cast<int>('l')});
  CHECK(enc.spans[0].end == 2);
  CHECK(enc.spans[1].begin == 2);
}

TEST_CASE("pre-tokenizer splits letters, digits, contractions and whitespace") {
  const BpeTokenizer tok = make_bpe();

  // letter run and digit run are separate pre-tokens, so the b1 merge that
  // would bridge them never fires even though its rank comes first
  CHECK(tok.encode("ab12").ids == std::vector<int>{264, 265});

  // trailing whitespace before a non-space stays with the whitespace run
  // except for its last character
  CHECK(tok.encode("a  \nb").ids ==
        std::vector<int>{static_cast<int>('a'), 261, static_cast<int>('\n'),
                         static_cast<int>('b')});

  // contractions split before the apostrophe
  auto enc = tok.encode("it's");
  CHECK(enc.ids == std::vector<int>{263, static_cast<int>('\''), static_cast<int>('s')});
  CHECK(enc.spans[0].end == 2);

  // a lone trailing whitespace run is one pre-token
  enc = tok.encode("low   ");
  CHECK(enc.ids.size() == 3);  // low, double space, single space
  CHECK(enc.ids[0] == 257);
  CHECK(enc.ids[1] == 261);
  CHECK(enc.ids[2] == static_cast<int>(' '));
}

TEST_CASE("bpe decode inverts encode byte for byte") {
  const BpeTokenizer tok = make_bpe();
  const std::string cases[] = {"low lower",
                               "a  \nb",
                               "it's 123!!",
                               "h\xc3\xa9llo w\xc3\xb6rld\n\ttab",
                               "\xf0\x9f\x8e\x89 party",
                               " low x",
                               "x   "};
  for (const std::string& text : cases) {
    const auto enc = tok.encode(text);
    CHECK(tok.decode(std::span<const int>(enc.ids)) == text);
    // spans tile the text and each token decodes to its span
    std::size_t at = 0;
    for (std::size_t i = 0; i < enc.ids.size(); ++i) {
      CHECK(enc.spans[i].begin == at);
      CHECK(tok.decode(enc.ids[i]) ==
            text.substr(enc.spans[i].begin, enc.spans[i].end - enc.spans[i].begin));
      at = enc.spans[i].end;
    }
    CHECK(at == text.size());
  }
}

TEST_CASE("bpe rejects merges that leave the vocabulary") {
  nlohmann::json vocab = nlohmann::json::object();
  for (int b = 0; b < 256; ++b) vocab[byte_symbol(b)] = b;
  const BpeTokenizer tok(vocab.dump(), "x y\n");
  CHECK_THROWS_AS(tok.encode("xy"), Error);
}

TEST_CASE("whitespace tokenizer is strict on encode and lossy on encode_terms") {
  WhitespaceTokenizer tok({{"hello", 0}, {"world", 1}});
  const auto enc = tok.encode("hello  world");
  CHECK(enc.ids == std::vector<int>{0, 1});
  CHECK(enc.spans[0].begin == 0);
  CHECK(enc.spans[0].end == 5);
  CHECK(enc.spans[1].begin == 7);
  CHECK(enc.spans[1].end == 12);
  CHECK(tok.decode(1) == "world");
  CHECK(tok.vocab_size() == 2);
  CHECK_THROWS_AS(tok.encode("hello there"), Error);
  CHECK(tok.encode_terms("hello there world") == std::vector<int>{0, 1});
  CHECK_THROWS_AS(WhitespaceTokenizer({{"a", 0}, {"b", 0}}), Error);
}

TEST_CASE("tokenizer loader picks the format from the merges argument") {
  const std::string vocab_path = temp_path("rp_tok_vocab.json");
  {
    std::ofstream out(vocab_path);
    out << R"({"a": 0, "b": 1})";
  }
  auto ws = load_tokenizer(vocab_path, "");
  CHECK(ws->name() == "whitespace");
  CHECK(ws->encode("b a").ids == std::vector<int>{1, 0});

  nlohmann::json vocab = nlohmann::json::object();
  for (int b = 0; b < 256; ++b) vocab[byte_symbol(b)] = b;
  const std::string bpe_vocab_path = temp_path("rp_tok_bpe_vocab.json");
  const std::string merges_path = temp_path("rp_tok_merges.txt");
  {
    std::ofstream out(bpe_vocab_path);
    out << vocab.dump();
    std::ofstream m(merges_path);
    m << "#version: test\n";
  }
  auto bpe = load_tokenizer(bpe_vocab_path, merges_path);
  CHECK(bpe->name() == "bpe");
  CHECK(bpe->encode("A").ids == std::vector<int>{65});
  std::remove(vocab_path.c_str());
  std::remove(bpe_vocab_path.c_str());
  std::remove(merges_path.c_str());
}

TEST_CASE("query tokenization marks subject and relation positions") {
  WhitespaceTokenizer tok({{"Beats", 0},
                           {"Music", 1},
                           {"is", 2},
                           {"owned", 3},
                           {"by", 4},
                           {"The", 5}});
  const auto q = tokenize_query("Beats Music is owned by", "Beats Music", tok);
  CHECK(q.token_ids == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(q.subject_positions == std::vector<int>{0, 1});
  CHECK(q.relation_positions == std::vector<int>{2, 3});
  CHECK(q.last_position() == 4);
  CHECK_FALSE(q.widened_subject_span);
  CHECK_NOTHROW(q.validate());

  // first occurrence wins
  const auto q2 = tokenize_query("The Beats Music is owned by Beats", "Beats", tok);
  CHECK(q2.subject_positions == std::vector<int>{1});
}

TEST_CASE("query subject spans widen only over non-whitespace spill") {
  const BpeTokenizer tok = make_bpe();

  // subject cut inside a token widens to the whole token
  const auto q = tokenize_query("low lower", "ow", tok);
  CHECK(q.subject_positions == std::vector<int>{0});
  CHECK(q.widened_subject_span);

  // a leading glued space is not a widening
  const auto q2 = tokenize_query(" low x", "low", tok);
  CHECK(q2.subject_positions == std::vector<int>{0});
  CHECK_FALSE(q2.widened_subject_span);
  CHECK(q2.relation_positions == std::vector<int>{1});
}

TEST_CASE("query tokenization rejects degenerate subjects") {
  WhitespaceTokenizer tok({{"Paris", 0}, {"is", 1}, {"nice", 2}});
  CHECK_THROWS_AS(tokenize_query("Paris is nice", "London", tok), Error);
  CHECK_THROWS_AS(tokenize_query("Paris is nice", "", tok), Error);
  // subject covering the final position leaves no prediction site
  CHECK_THROWS_AS(tokenize_query("is Paris", "Paris", tok).validate(), Error);
  // single token query has no room for subject plus prediction
  CHECK_THROWS_AS(tokenize_query("Paris", "Paris", tok).validate(), Error);
}
