#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "recallprobe/errors.hpp"
#include "recallprobe/io.hpp"

namespace rp {

struct CorpusDoc {
  std::string doc_id;
  std::string title;
  std::string section_title;
  std::string text;
};

// Lowercased alphanumeric runs; everything else separates. This is the
// retrieval-side analyzer only, the model tokenizer never sees it.
inline std::vector<std::string> analyze_terms(std::string_view text) {
  std::vector<std::string> terms;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      terms.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) terms.push_back(std::move(cur));
  return terms;
}

// Paragraph collection with an inverted index over the text field.
class Corpus {
 public:
  struct Posting {
    int doc = 0;
    int tf = 0;
  };

  void add(CorpusDoc doc) {
    docs_.push_back(std::move(doc));
    indexed_ = false;
  }

  // Builds (or rebuilds) the inverted index; calling it twice changes nothing.
  void build_index() {
    index_.clear();
    doc_len_.assign(docs_.size(), 0);
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      std::unordered_map<std::string, int> tf;
      const auto terms = analyze_terms(docs_[d].text);
      doc_len_[d] = static_cast<int>(terms.size());
      for (const auto& t : terms) ++tf[t];
      for (auto& [term, count] : tf) index_[term].push_back({static_cast<int>(d), count});
    }
    for (auto& [term, postings] : index_)
      std::sort(postings.begin(), postings.end(),
                [](const Posting& a, const Posting& b) { return a.doc < b.doc; });
    double total = 0;
    for (int len : doc_len_) total += len;
    avg_len_ = docs_.empty() ? 0.0 : total / static_cast<double>(docs_.size());
    indexed_ = true;
  }

  static Corpus from_jsonl(const std::string& path) {
    Corpus c;
    const std::string data = read_file(path);
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < data.size()) {
      std::size_t eol = data.find('\n', pos);
      if (eol == std::string::npos) eol = data.size();
      const std::string_view line(data.data() + pos, eol - pos);
      pos = eol + 1;
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(errc::validation,
             path + ":" + std::to_string(line_no) + ": bad corpus record: " + e.what());
      }
      CorpusDoc doc;
      if (!j.contains("doc_id") || !j.contains("text"))
        fail(errc::validation,
             path + ":" + std::to_string(line_no) + ": corpus record needs doc_id and text");
      doc.doc_id = j["doc_id"].is_string() ? j["doc_id"].get<std::string>()
                                           : j["doc_id"].dump();
      doc.text = j["text"].get<std::string>();
      if (j.contains("title")) doc.title = j["title"].get<std::string>();
      if (j.contains("section_title")) doc.section_title = j["section_title"].get<std::string>();
      c.add(std::move(doc));
    }
    c.build_index();
    return c;
  }

  const std::vector<CorpusDoc>& docs() const { return docs_; }
  const CorpusDoc& doc(int i) const { return docs_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(docs_.size()); }
  bool indexed() const { return indexed_; }
  int doc_len(int i) const { return doc_len_[static_cast<std::size_t>(i)]; }
  double avg_len() const { return avg_len_; }

  const std::vector<Posting>* postings(const std::string& term) const {
    auto it = index_.find(term);
    return it == index_.end() ? nullptr : &it->second;
  }

 private:
  std::vector<CorpusDoc> docs_;
  std::unordered_map<std::string, std::vector<Posting>> index_;
  std::vector<int> doc_len_;
  double avg_len_ = 0;
  bool indexed_ = false;
};

struct ScoredDoc {
  int doc = 0;
  double score = 0;
};

inline constexpr double bm25_default_k1 = 1.5;
inline constexpr double bm25_default_b = 0.75;

// Okapi scoring over the text index:
//
//   idf(t)  = ln(1 + (N - df + 0.5) / (df + 0.5))
//   s(d)    = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len/avg))
//
// Documents sharing no term with the query never appear in the result, and
// equal scores order by doc_id.
inline std::vector<ScoredDoc> bm25_rank(std::span<const std::string> query_terms,
                                        const Corpus& corpus, std::size_t top_n,
                                        double k1 = bm25_default_k1,
                                        double b = bm25_default_b) {
  if (query_terms.empty()) fail(errc::validation, "empty retrieval query");
  if (!corpus.indexed()) fail(errc::validation, "corpus index has not been built");
  const int n_docs = corpus.size();
  std::vector<double> scores(static_cast<std::size_t>(n_docs), 0.0);
  std::vector<char> touched(static_cast<std::size_t>(n_docs), 0);

  // duplicate query terms score multiply, matching a bag-of-words query
  for (const auto& term : query_terms) {
    const auto* postings = corpus.postings(term);
    if (!postings) continue;
    const double df = static_cast<double>(postings->size());
    const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
    for (const auto& p : *postings) {
      const double tf = p.tf;
      const double norm =
          tf + k1 * (1.0 - b + b * corpus.doc_len(p.doc) / corpus.avg_len());
      scores[static_cast<std::size_t>(p.doc)] += idf * tf * (k1 + 1.0) / norm;
      touched[static_cast<std::size_t>(p.doc)] = 1;
    }
  }

  std::vector<ScoredDoc> out;
  for (int d = 0; d < n_docs; ++d)
    if (touched[static_cast<std::size_t>(d)]) out.push_back({d, scores[static_cast<std::size_t>(d)]});
  std::sort(out.begin(), out.end(), [&](const ScoredDoc& a, const ScoredDoc& b2) {
    if (a.score != b2.score) return a.score > b2.score;
    return corpus.doc(a.doc).doc_id < corpus.doc(b2.doc).doc_id;
  });
  if (out.size() > top_n) out.resize(top_n);
  return out;
}

}  // namespace rp
