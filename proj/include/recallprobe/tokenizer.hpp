#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "recallprobe/errors.hpp"
#include "recallprobe/io.hpp"

namespace rp {

// Byte range [begin, end) a token covers in the original text.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct Encoding {
  std::vector<int> ids;
  std::vector<TokenSpan> spans;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual Encoding encode(std::string_view text) const = 0;
  virtual std::string decode(int token) const = 0;
  virtual int vocab_size() const = 0;
  virtual std::string name() const = 0;

  // Token ids for arbitrary text where coverage matters more than fidelity;
  // the word-level tokenizer drops words it has no id for instead of failing.
  virtual std::vector<int> encode_terms(std::string_view text) const {
    return encode(text).ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) out += decode(id);
    return out;
  }
};

namespace detail {

inline bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

}  // namespace detail

// Splits on runs of ASCII whitespace; every word must be a vocabulary entry.
// Token spans cover the word itself, not the separators around it.
class WhitespaceTokenizer : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(std::unordered_map<std::string, int> vocab)
      : vocab_(std::move(vocab)) {
    int max_id = -1;
    for (const auto& [word, id] : vocab_) {
      if (id < 0) fail(errc::validation, "tokenizer: negative id for '" + word + "'");
      max_id = std::max(max_id, id);
    }
    words_.resize(static_cast<std::size_t>(max_id) + 1);
    for (const auto& [word, id] : vocab_) {
      if (!words_[static_cast<std::size_t>(id)].empty())
        fail(errc::validation, "tokenizer: id " + std::to_string(id) + " assigned twice");
      words_[static_cast<std::size_t>(id)] = word;
    }
  }

  static WhitespaceTokenizer from_file(const std::string& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      fail(errc::validation, "tokenizer vocabulary '" + path + "' is not valid JSON: " + e.what());
    }
    return WhitespaceTokenizer(j.get<std::unordered_map<std::string, int>>());
  }

  Encoding encode(std::string_view text) const override {
    Encoding enc;
    for (const auto& [word, span] : split(text)) {
      auto it = vocab_.find(word);
      if (it == vocab_.end())
        fail(errc::validation, "word '" + word + "' is not in the vocabulary");
      enc.ids.push_back(it->second);
      enc.spans.push_back(span);
    }
    return enc;
  }

  std::vector<int> encode_terms(std::string_view text) const override {
    std::vector<int> ids;
    for (const auto& [word, span] : split(text)) {
      (void)span;
      auto it = vocab_.find(word);
      if (it != vocab_.end()) ids.push_back(it->second);
    }
    return ids;
  }

  using Tokenizer::decode;
  std::string decode(int token) const override {
    if (token < 0 || static_cast<std::size_t>(token) >= words_.size() ||
        words_[static_cast<std::size_t>(token)].empty())
      fail(errc::validation, "token id " + std::to_string(token) + " is not in the vocabulary");
    return words_[static_cast<std::size_t>(token)];
  }

  int vocab_size() const override { return static_cast<int>(vocab_.size()); }
  std::string name() const override { return "whitespace"; }

 private:
  static std::vector<std::pair<std::string, TokenSpan>> split(std::string_view text) {
    std::vector<std::pair<std::string, TokenSpan>> out;
    std::size_t i = 0;
    while (i < text.size()) {
      if (detail::is_ascii_space(text[i])) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && !detail::is_ascii_space(text[j])) ++j;
      out.emplace_back(std::string(text.substr(i, j - i)), TokenSpan{i, j});
      i = j;
    }
    return out;
  }

  std::unordered_map<std::string, int> vocab_;
  std::vector<std::string> words_;
};

namespace detail {

// The reversible byte-to-printable-codepoint table used by byte-level BPE
// vocabularies: printable latin bytes map to themselves, everything else is
// renumbered upward from 256 in byte order.
inline const std::vector<int>& byte_to_cp_table() {
  static const std::vector<int> table = [] {
    std::vector<int> t(256, -1);
    auto printable = [](int b) {
      return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
    };
    int next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable(b) ? b : next++;
    return t;
  }();
  return table;
}

inline std::string cp_to_utf8(int cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
  return out;
}

// Decodes UTF-8, recording the byte offset each codepoint starts at. Invalid
// sequences are taken one byte at a time as latin-1.
inline void utf8_decode(std::string_view text, std::vector<int>& cps,
                        std::vector<std::size_t>& offsets) {
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    int cp = c;
    std::size_t len = 1;
    if (c >= 0xf0 && i + 3 < text.size()) {
      cp = ((c & 0x07) << 18) | ((text[i + 1] & 0x3f) << 12) | ((text[i + 2] & 0x3f) << 6) |
           (text[i + 3] & 0x3f);
      len = 4;
    } else if (c >= 0xe0 && i + 2 < text.size()) {
      cp = ((c & 0x0f) << 12) | ((text[i + 1] & 0x3f) << 6) | (text[i + 2] & 0x3f);
      len = 3;
    } else if (c >= 0xc0 && i + 1 < text.size()) {
      cp = ((c & 0x1f) << 6) | (text[i + 1] & 0x3f);
      len = 2;
    }
    cps.push_back(cp);
    offsets.push_back(i);
    i += len;
  }
  offsets.push_back(text.size());
}

}  // namespace detail

// Byte-level BPE of the GPT-2 family: a hand rolled version of its
// pre-tokenizer (contractions, optionally space-prefixed letter, digit and
// punctuation runs, collapsed whitespace), then lowest-rank-first pair
// merging inside each pre-token. Non-ASCII codepoints are classed as letters,
// which is right for names and close enough for stray symbols.
class BpeTokenizer : public Tokenizer {
 public:
  BpeTokenizer(const std::string& vocab_json, const std::string& merges_txt) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(vocab_json);
    } catch (const nlohmann::json::exception& e) {
      fail(errc::validation, std::string("vocab file is not valid JSON: ") + e.what());
    }
    int max_id = -1;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const int id = it.value().get<int>();
      vocab_[it.key()] = id;
      max_id = std::max(max_id, id);
    }
    tokens_.resize(static_cast<std::size_t>(max_id) + 1);
    for (const auto& [tok, id] : vocab_) tokens_[static_cast<std::size_t>(id)] = tok;

    std::size_t pos = 0;
    int rank = 0;
    while (pos < merges_txt.size()) {
      std::size_t eol = merges_txt.find('\n', pos);
      if (eol == std::string::npos) eol = merges_txt.size();
      std::string line = merges_txt.substr(pos, eol - pos);
      pos = eol + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      if (line.find(' ') == std::string::npos)
        fail(errc::validation, "merge line without a separator: '" + line + "'");
      merge_rank_[line] = rank++;
    }

    for (int b = 0; b < 256; ++b) {
      const int cp = detail::byte_to_cp_table()[b];
      cp_to_byte_[cp] = static_cast<unsigned char>(b);
      byte_symbol_[b] = detail::cp_to_utf8(cp);
    }
  }

  static BpeTokenizer from_files(const std::string& vocab_path, const std::string& merges_path) {
    return BpeTokenizer(read_file(vocab_path), read_file(merges_path));
  }

  Encoding encode(std::string_view text) const override {
    Encoding enc;
    for (const auto& [begin, end] : pretokenize(text)) {
      encode_chunk(text, begin, end, enc);
    }
    return enc;
  }

  using Tokenizer::decode;
  std::string decode(int token) const override {
    if (token < 0 || static_cast<std::size_t>(token) >= tokens_.size() ||
        tokens_[static_cast<std::size_t>(token)].empty())
      fail(errc::validation, "token id " + std::to_string(token) + " is not in the vocabulary");
    return symbols_to_bytes(tokens_[static_cast<std::size_t>(token)]);
  }

  int vocab_size() const override { return static_cast<int>(vocab_.size()); }
  std::string name() const override { return "bpe"; }

 private:
  // Byte ranges of the pre-tokens. Mirrors the usual byte-level pattern:
  // 's 't 're 've 'm 'll 'd, then optionally space-led runs of letters,
  // digits or other symbols, then whitespace that is not followed by more
  // whitespace, then any whitespace.
  std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) const {
    std::vector<int> cps;
    std::vector<std::size_t> off;
    detail::utf8_decode(text, cps, off);
    const std::size_t n = cps.size();

    auto is_space = [](int cp) {
      return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f' ||
             cp == 0x85 || cp == 0xa0;
    };
    auto is_letter = [&](int cp) {
      return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') || (cp >= 0x80 && !is_space(cp));
    };
    auto is_digit = [](int cp) { return cp >= '0' && cp <= '9'; };

    auto contraction_len = [&](std::size_t i) -> std::size_t {
      if (cps[i] != '\'' || i + 1 >= n) return 0;
      const int a = cps[i + 1];
      if (a == 's' || a == 't' || a == 'm' || a == 'd') return 2;
      if (i + 2 < n) {
        const int b = cps[i + 2];
        if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) return 3;
      }
      return 0;
    };

    std::vector<std::pair<std::size_t, std::size_t>> chunks;
    std::size_t i = 0;
    while (i < n) {
      if (const std::size_t cl = contraction_len(i)) {
        chunks.emplace_back(off[i], off[i + cl]);
        i += cl;
        continue;
      }
      std::size_t j = i;
      std::size_t body = i;
      if (cps[i] == ' ' && i + 1 < n && !is_space(cps[i + 1])) body = i + 1;
      if (body < n && is_letter(cps[body])) {
        j = body;
        while (j < n && is_letter(cps[j])) ++j;
      } else if (body < n && is_digit(cps[body])) {
        j = body;
        while (j < n && is_digit(cps[j])) ++j;
      } else if (body < n && !is_space(cps[body])) {
        j = body;
        while (j < n && !is_space(cps[j]) && !is_letter(cps[j]) && !is_digit(cps[j])) ++j;
      } else {
        // whitespace run; keep the last char back when a token follows it
        j = i;
        while (j < n && is_space(cps[j])) ++j;
        if (j < n && j - i >= 2) --j;
        chunks.emplace_back(off[i], off[j]);
        i = j;
        continue;
      }
      chunks.emplace_back(off[i], off[j]);
      i = j;
    }
    return chunks;
  }

  void encode_chunk(std::string_view text, std::size_t begin, std::size_t end,
                    Encoding& enc) const {
    std::vector<std::string> syms;
    std::vector<TokenSpan> spans;
    for (std::size_t b = begin; b < end; ++b) {
      syms.push_back(byte_symbol_[static_cast<unsigned char>(text[b])]);
      spans.push_back({b, b + 1});
    }
    while (syms.size() > 1) {
      int best_rank = std::numeric_limits<int>::max();
      std::size_t best = 0;
      for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
        auto it = merge_rank_.find(syms[k] + " " + syms[k + 1]);
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best = k;
        }
      }
      if (best_rank == std::numeric_limits<int>::max()) break;
      const std::string merged_l = syms[best];
      const std::string merged_r = syms[best + 1];
      // merge every adjacent occurrence of this pair, left to right
      std::vector<std::string> nsyms;
      std::vector<TokenSpan> nspans;
      for (std::size_t k = 0; k < syms.size();) {
        if (k + 1 < syms.size() && syms[k] == merged_l && syms[k + 1] == merged_r) {
          nsyms.push_back(syms[k] + syms[k + 1]);
          nspans.push_back({spans[k].begin, spans[k + 1].end});
          k += 2;
        } else {
          nsyms.push_back(syms[k]);
          nspans.push_back(spans[k]);
          ++k;
        }
      }
      syms = std::move(nsyms);
      spans = std::move(nspans);
    }
    for (std::size_t k = 0; k < syms.size(); ++k) {
      auto it = vocab_.find(syms[k]);
      if (it == vocab_.end())
        fail(errc::validation, "merged piece '" + syms[k] + "' is not in the vocabulary");
      enc.ids.push_back(it->second);
      enc.spans.push_back(spans[k]);
    }
  }

  std::string symbols_to_bytes(const std::string& symbols) const {
    std::vector<int> cps;
    std::vector<std::size_t> off;
    detail::utf8_decode(symbols, cps, off);
    std::string out;
    for (int cp : cps) {
      auto it = cp_to_byte_.find(cp);
      if (it == cp_to_byte_.end())
        fail(errc::validation, "vocabulary entry holds a codepoint outside the byte table");
      out.push_back(static_cast<char>(it->second));
    }
    return out;
  }

  std::unordered_map<std::string, int> vocab_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> merge_rank_;
  std::unordered_map<int, unsigned char> cp_to_byte_;
  std::string byte_symbol_[256];
};

// merges_path empty selects the word-level tokenizer.
inline std::unique_ptr<Tokenizer> load_tokenizer(const std::string& vocab_path,
                                                 const std::string& merges_path) {
  if (merges_path.empty())
    return std::make_unique<WhitespaceTokenizer>(WhitespaceTokenizer::from_file(vocab_path));
  return std::make_unique<BpeTokenizer>(BpeTokenizer::from_files(vocab_path, merges_path));
}

}  // namespace rp
