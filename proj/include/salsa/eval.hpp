#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/common.hpp"
#include "salsa/utf8.hpp"

namespace salsa {

struct EditCounts {
  long distance = 0;
  long subs = 0;
  long ins = 0;
  long dels = 0;
  long ref_len = 0;
};

/// Levenshtein distance with an operation breakdown (substitutions,
/// insertions into hyp, deletions from ref), via full DP plus backtrack.
template <typename T>
EditCounts edit_counts(const std::vector<T>& ref, const std::vector<T>& hyp) {
  const size_t n = ref.size(), m = hyp.size();
  std::vector<long> dp((n + 1) * (m + 1));
  auto at = [&](size_t i, size_t j) -> long& { return dp[i * (m + 1) + j]; };
  for (size_t i = 0; i <= n; ++i) at(i, 0) = long(i);
  for (size_t j = 0; j <= m; ++j) at(0, j) = long(j);
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j) {
      const long sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  EditCounts out;
  out.distance = at(n, m);
  out.ref_len = long(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (!(ref[i - 1] == hyp[j - 1])) ++out.subs;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++out.dels;
      --i;
    } else {
      ++out.ins;
      --j;
    }
  }
  return out;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

struct WerResult {
  double rate = 0;
  long subs = 0;
  long ins = 0;
  long dels = 0;
  long ref_words = 0;
  long distance = 0;
};

/// Word error rate over whitespace-split words. Empty ref scores 0 against an
/// empty hyp; against a non-empty hyp the rate is the insertion count over a
/// denominator of 1.
inline WerResult wer(const std::string& ref, const std::string& hyp) {
  auto rw = split_words(ref);
  auto hw = split_words(hyp);
  auto c = edit_counts(rw, hw);
  WerResult r;
  r.subs = c.subs;
  r.ins = c.ins;
  r.dels = c.dels;
  r.ref_words = long(rw.size());
  r.distance = c.distance;
  if (rw.empty())
    r.rate = hw.empty() ? 0.0 : double(c.ins);
  else
    r.rate = double(c.subs + c.ins + c.dels) / double(rw.size());
  return r;
}

inline EditCounts cer_counts(const std::string& ref, const std::string& hyp) {
  return edit_counts(utf8::decode_code_points(ref), utf8::decode_code_points(hyp));
}

/// Character error rate over Unicode code points (not bytes).
inline double cer(const std::string& ref, const std::string& hyp) {
  auto c = cer_counts(ref, hyp);
  if (c.ref_len == 0) return c.distance == 0 ? 0.0 : double(c.distance);
  return double(c.distance) / double(c.ref_len);
}

// ---------------------------------------------------------------------------
// Corpus-level scoring
// ---------------------------------------------------------------------------

struct UttScore {
  std::string utt_id;
  long ref_words = 0, word_dist = 0;
  long ref_chars = 0, char_dist = 0;
  double wer = 0, cer = 0;
};

struct MetricReport {
  std::vector<UttScore> per_utt;
  long total_word_dist = 0, total_ref_words = 0;
  long total_subs = 0, total_ins = 0, total_dels = 0;
  long total_char_dist = 0, total_ref_chars = 0;

  // Corpus rates are ratio-of-sums, never a mean of per-utterance rates.
  double corpus_wer() const { return total_ref_words > 0 ? double(total_word_dist) / double(total_ref_words) : 0.0; }
  double corpus_cer() const { return total_ref_chars > 0 ? double(total_char_dist) / double(total_ref_chars) : 0.0; }

  static MetricReport score(const std::vector<std::string>& refs, const std::vector<std::string>& hyps,
                            const std::vector<std::string>& utt_ids) {
    require(refs.size() == hyps.size() && refs.size() == utt_ids.size(), "score: refs/hyps/ids length mismatch");
    MetricReport rep;
    for (size_t i = 0; i < refs.size(); ++i) {
      UttScore s;
      s.utt_id = utt_ids[i];
      auto w = wer(refs[i], hyps[i]);
      s.ref_words = w.ref_words;
      s.word_dist = w.distance;
      s.wer = w.rate;
      auto c = cer_counts(refs[i], hyps[i]);
      s.ref_chars = c.ref_len;
      s.char_dist = c.distance;
      s.cer = c.ref_len > 0 ? double(c.distance) / double(c.ref_len) : (c.distance == 0 ? 0.0 : double(c.distance));
      rep.total_word_dist += w.distance;
      rep.total_ref_words += w.ref_words;
      rep.total_subs += w.subs;
      rep.total_ins += w.ins;
      rep.total_dels += w.dels;
      rep.total_char_dist += c.distance;
      rep.total_ref_chars += c.ref_len;
      rep.per_utt.push_back(std::move(s));
    }
    return rep;
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "utt_id,ref_len,edit_dist,wer,cer\n";
    for (const auto& s : per_utt)
      os << s.utt_id << "," << s.ref_words << "," << s.word_dist << "," << s.wer << "," << s.cer << "\n";
    if (!os) throw IoError("write failed: " + path);
  }

  nlohmann::json summary_json() const {
    return {{"n_utts", per_utt.size()},
            {"wer", corpus_wer()},
            {"cer", corpus_cer()},
            {"substitutions", total_subs},
            {"insertions", total_ins},
            {"deletions", total_dels},
            {"ref_words", total_ref_words},
            {"ref_chars", total_ref_chars}};
  }
};

// ---------------------------------------------------------------------------
// Next-character prediction accuracy
// ---------------------------------------------------------------------------

/// Fraction of exact next-character matches over every character position of
/// every text. The predictor maps a prefix (complete UTF-8) to a predicted
/// next code point, or nullopt when it cannot produce a character.
template <typename Predictor>
double ncp_acc_with(Predictor&& predict, const std::vector<std::string>& texts) {
  long positions = 0, matches = 0;
  for (const auto& text : texts) {
    auto cps = utf8::decode_code_points(text);
    std::string prefix;
    for (uint32_t truth : cps) {
      auto guess = predict(prefix);
      ++positions;
      if (guess.has_value() && *guess == truth) ++matches;
      prefix += utf8::encode_code_point(truth);
    }
  }
  require(positions > 0, "ncp_acc: no character positions to score");
  return double(matches) / double(positions);
}

// ---------------------------------------------------------------------------
// Language-selection quadrant report
// ---------------------------------------------------------------------------

struct QuadrantEntry {
  std::string lang;
  double wer = 0;
  double ncp_acc = 0;
};

/// CSV classifying languages by (ASR WER, LM NCP accuracy). Languages whose
/// baseline ASR is already strong are skipped; among the rest, a strong LM
/// marks the language as a fusion candidate.
inline std::string quadrant_report(std::vector<QuadrantEntry> entries, double wer_threshold = 0.3,
                                   double ncp_threshold = 0.5) {
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.lang < b.lang; });
  std::ostringstream os;
  os << "lang,wer,ncp_acc,quadrant\n";
  for (const auto& e : entries) {
    const char* label;
    if (e.wer < wer_threshold)
      label = "skip (ASR already strong)";
    else if (e.ncp_acc >= ncp_threshold)
      label = "select";
    else
      label = "skip (LM weak)";
    os << e.lang << "," << e.wer << "," << e.ncp_acc << "," << label << "\n";
  }
  return os.str();
}

}  // namespace salsa
