#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "recallprobe/errors.hpp"
#include "recallprobe/tokenizer.hpp"

namespace rp {

// A prompt split into token ids with its subject and relation positions
// marked. Positions are 0-based; the final position is the one whose
// next-token prediction gets read out, so it belongs to neither set.
struct TokenizedQuery {
  std::vector<int> token_ids;
  std::vector<int> subject_positions;   // contiguous, ascending
  std::vector<int> relation_positions;  // ascending, excludes the last position
  int attribute_token = -1;             // filled in once the prediction is known
  std::string text;
  std::string subject;
  bool widened_subject_span = false;

  int length() const { return static_cast<int>(token_ids.size()); }
  int last_position() const { return length() - 1; }
  int first_subject_position() const { return subject_positions.front(); }
  int last_subject_position() const { return subject_positions.back(); }

  void validate() const {
    const int n = length();
    if (n < 2) fail(errc::validation, "query '" + text + "' has fewer than two tokens");
    if (subject_positions.empty())
      fail(errc::validation, "query '" + text + "' has no subject positions");
    for (std::size_t i = 0; i + 1 < subject_positions.size(); ++i)
      if (subject_positions[i + 1] != subject_positions[i] + 1)
        fail(errc::validation, "subject positions of '" + text + "' are not contiguous");
    if (subject_positions.front() < 0 || subject_positions.back() >= n - 1)
      fail(errc::validation,
           "subject of '" + text + "' reaches the final position; nothing follows it");
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int p : subject_positions) seen[static_cast<std::size_t>(p)] = 1;
    for (int p : relation_positions) {
      if (p < 0 || p >= n - 1 || seen[static_cast<std::size_t>(p)])
        fail(errc::validation, "relation positions of '" + text + "' overlap or run out of range");
      seen[static_cast<std::size_t>(p)] = 1;
    }
    if (static_cast<int>(subject_positions.size() + relation_positions.size()) != n - 1)
      fail(errc::validation,
           "subject and relation positions of '" + text + "' do not cover the prompt");
  }
};

// Encodes the prompt and marks as subject every token whose span overlaps the
// first occurrence of the subject string. A token may cover more characters
// than the subject itself (BPE pieces straddle word boundaries); that widens
// the marked span and is flagged so callers can warn. A leading space glued
// onto the first subject token does not count as widening.
inline TokenizedQuery tokenize_query(std::string_view text, std::string_view subject,
                                     const Tokenizer& tok) {
  if (subject.empty()) fail(errc::validation, "empty subject");
  const std::size_t s0 = std::string_view(text).find(subject);
  if (s0 == std::string_view::npos)
    fail(errc::validation,
         "subject '" + std::string(subject) + "' does not occur in '" + std::string(text) + "'");
  const std::size_t s1 = s0 + subject.size();

  TokenizedQuery q;
  q.text = std::string(text);
  q.subject = std::string(subject);
  Encoding enc = tok.encode(text);
  q.token_ids = enc.ids;
  const int n = q.length();
  if (n < 2) fail(errc::validation, "query '" + q.text + "' has fewer than two tokens");

  for (int i = 0; i < n; ++i) {
    const auto& sp = enc.spans[static_cast<std::size_t>(i)];
    if (sp.begin < s1 && sp.end > s0) q.subject_positions.push_back(i);
  }
  if (q.subject_positions.empty())
    fail(errc::validation, "no token overlaps the subject in '" + q.text + "'");
  if (q.subject_positions.back() == n - 1)
    fail(errc::validation,
         "subject of '" + q.text + "' reaches the final position; nothing follows it");

  auto nonspace_outside = [&](std::size_t from, std::size_t to) {
    for (std::size_t b = from; b < to; ++b)
      if (!detail::is_ascii_space(text[b])) return true;
    return false;
  };
  const auto& first = enc.spans[static_cast<std::size_t>(q.subject_positions.front())];
  const auto& last = enc.spans[static_cast<std::size_t>(q.subject_positions.back())];
  if (first.begin < s0 && nonspace_outside(first.begin, s0)) q.widened_subject_span = true;
  if (last.end > s1 && nonspace_outside(s1, last.end)) q.widened_subject_span = true;

  for (int i = 0; i < n - 1; ++i)
    if (i < q.subject_positions.front() || i > q.subject_positions.back())
      q.relation_positions.push_back(i);

  q.validate();
  return q;
}

}  // namespace rp
