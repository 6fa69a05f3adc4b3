#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "recallprobe/forward.hpp"
#include "recallprobe/io.hpp"
#include "recallprobe/query.hpp"

namespace rp {

struct QueryRecord {
  std::string query;
  std::string subject;
  std::string attribute;
  std::string relation_id;  // optional grouping tag
};

struct DatasetLoadResult {
  std::vector<QueryRecord> records;
  std::vector<std::string> warnings;
};

// JSONL, one record per line with query/subject/attribute fields. The subject
// must occur verbatim in the query. Malformed lines are hard errors unless
// permissive is set, in which case they are skipped with a warning.
inline DatasetLoadResult load_dataset(const std::string& path, bool permissive = false) {
  DatasetLoadResult out;
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
    auto reject = [&](const std::string& why) {
      const std::string msg = path + ":" + std::to_string(line_no) + ": " + why;
      if (!permissive) fail(errc::validation, msg);
      out.warnings.push_back(msg + " (skipped)");
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      reject(std::string("bad JSON: ") + e.what());
      continue;
    }
    if (!j.contains("query") || !j.contains("subject") || !j.contains("attribute")) {
      reject("record needs query, subject and attribute");
      continue;
    }
    QueryRecord rec;
    rec.query = j["query"].get<std::string>();
    rec.subject = j["subject"].get<std::string>();
    rec.attribute = j["attribute"].get<std::string>();
    if (j.contains("relation_id"))
      rec.relation_id = j["relation_id"].is_string() ? j["relation_id"].get<std::string>()
                                                     : j["relation_id"].dump();
    if (rec.query.empty() || rec.subject.empty() || rec.attribute.empty()) {
      reject("record has an empty field");
      continue;
    }
    if (rec.query.find(rec.subject) == std::string::npos) {
      reject("subject '" + rec.subject + "' does not occur in the query");
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

struct FilteredQuery {
  QueryRecord record;
  TokenizedQuery query;  // attribute_token set to the model's prediction
  std::string predicted_text;
  double base_prob = 0;  // model's probability of its own prediction
};

namespace detail {

inline std::string strip_edges(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_ascii_space(s[b])) ++b;
  while (e > b && is_ascii_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

// Keeps the queries the model answers correctly: the decoded argmax token,
// whitespace trimmed, must be a non-empty prefix of the expected attribute.
// The surviving queries carry the predicted token as their attribute token.
// Queries that cannot be tokenized are skipped with a warning.
inline std::vector<FilteredQuery> filter_correct(std::span<const QueryRecord> records,
                                                 const ModelConfig& cfg,
                                                 const WeightStore<float>& w,
                                                 const Tokenizer& tok,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::vector<FilteredQuery> kept;
  TraceGauges light;
  light.head_weights = false;
  for (const auto& rec : records) {
    TokenizedQuery q;
    try {
      q = tokenize_query(rec.query, rec.subject, tok);
    } catch (const Error& e) {
      if (warnings) warnings->push_back("skipping '" + rec.query + "': " + e.what());
      continue;
    }
    if (q.widened_subject_span && warnings)
      warnings->push_back("subject tokens of '" + rec.query +
                          "' cover more text than the subject itself");
    const ForwardTrace<float> trace =
        forward(cfg, w, std::span<const int>(q.token_ids), {}, light);
    const int pred = argmax_index(std::span<const float>(trace.final_probs));
    const std::string pred_text = detail::strip_edges(tok.decode(pred));
    const std::string attr = detail::strip_edges(rec.attribute);
    if (pred_text.empty() || attr.find(pred_text) != 0) continue;
    FilteredQuery fq;
    fq.record = rec;
    fq.query = std::move(q);
    fq.query.attribute_token = pred;
    fq.predicted_text = pred_text;
    fq.base_prob = static_cast<double>(trace.final_probs[static_cast<std::size_t>(pred)]);
    kept.push_back(std::move(fq));
  }
  return kept;
}

}  // namespace rp
