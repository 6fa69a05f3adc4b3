#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "recallprobe/corpus.hpp"
#include "recallprobe/tokenizer.hpp"

namespace rp {

using StopwordSet = std::unordered_set<std::string>;

// One lowercase word per line; blank lines and leading '#' comments skipped.
inline StopwordSet load_stopwords(const std::string& path) {
  StopwordSet set;
  const std::string data = read_file(path);
  std::size_t pos = 0;
  while (pos < data.size()) {
    std::size_t eol = data.find('\n', pos);
    if (eol == std::string::npos) eol = data.size();
    std::string line = data.substr(pos, eol - pos);
    pos = eol + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    line = line.substr(start);
    for (auto& c : line) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    set.insert(line);
  }
  return set;
}

// Token ids a subject's retrieved paragraphs mention, serving as the
// plausible-attribute reference set. Empty when retrieval keeps nothing,
// which downstream rates treat as a missing value rather than zero.
struct CandidateAttributeSet {
  std::string subject;
  std::vector<int> tokens;  // ascending, unique
  int retained_paragraphs = 0;

  bool missing() const { return tokens.empty(); }
  bool contains(int token) const {
    return std::binary_search(tokens.begin(), tokens.end(), token);
  }
};

namespace detail {

// Codepoint count of a decoded token with every ASCII space removed.
inline std::size_t visible_codepoints(std::string_view token_text, std::string* stripped) {
  std::vector<int> cps;
  std::vector<std::size_t> off;
  utf8_decode(token_text, cps, off);
  std::size_t count = 0;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    if (cps[i] == ' ') continue;
    ++count;
    if (stripped) stripped->append(token_text.substr(off[i], off[i + 1] - off[i]));
  }
  return count;
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

// Retrieves the subject's top paragraphs, keeps those that actually mention
// the subject verbatim in their text, title or section title, and pools the
// model-token ids of the kept texts. Tokens shorter than three non-space
// codepoints and stopwords are dropped; the rest come back sorted and unique.
inline CandidateAttributeSet build_candidate_set(const std::string& subject,
                                                 const Corpus& corpus, const Tokenizer& tok,
                                                 const StopwordSet& stopwords,
                                                 std::size_t top_n = 100) {
  if (subject.empty()) fail(errc::validation, "empty subject");
  CandidateAttributeSet out;
  out.subject = subject;

  const auto terms = analyze_terms(subject);
  if (terms.empty()) fail(errc::validation, "subject '" + subject + "' has no retrieval terms");
  const auto ranked = bm25_rank(std::span<const std::string>(terms), corpus, top_n);

  std::set<int> pool;
  for (const auto& sd : ranked) {
    const CorpusDoc& doc = corpus.doc(sd.doc);
    const bool mentions = doc.text.find(subject) != std::string::npos ||
                          doc.title.find(subject) != std::string::npos ||
                          doc.section_title.find(subject) != std::string::npos;
    if (!mentions) continue;
    ++out.retained_paragraphs;
    for (int id : tok.encode_terms(doc.text)) pool.insert(id);
  }

  for (int id : pool) {
    std::string stripped;
    if (detail::visible_codepoints(tok.decode(id), &stripped) < 3) continue;
    if (stopwords.count(detail::ascii_lower(stripped))) continue;
    out.tokens.push_back(id);
  }
  return out;
}

}  // namespace rp
