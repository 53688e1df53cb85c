#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/align.hpp"
#include "salsa/common.hpp"
#include "salsa/coupling.hpp"
#include "salsa/eval.hpp"
#include "salsa/models.hpp"
#include "salsa/synth_data.hpp"
#include "salsa/tensor.hpp"
#include "salsa/tokenizer.hpp"
#include "salsa/utf8.hpp"

namespace salsa {

struct DecodeConfig {
  double top_p = 0.9;
  int top_k = 10;
  int max_tokens = 256;
  double truncation_factor = 1.5;
  uint64_t seed = 0;

  void validate() const {
    require(top_p > 0 && top_p <= 1.0, "decode: top_p must be in (0, 1]");
    require(top_k >= 1, "decode: top_k must be positive");
    require(max_tokens >= 1, "decode: max_tokens must be positive");
    require(truncation_factor > 1.0, "decode: truncation_factor must exceed 1");
  }

  nlohmann::json to_json() const {
    return {{"top_p", top_p},
            {"top_k", top_k},
            {"max_tokens", max_tokens},
            {"truncation_factor", truncation_factor},
            {"seed", seed}};
  }
  static DecodeConfig from_json(const nlohmann::json& j) {
    DecodeConfig c;
    c.top_p = j.at("top_p").get<double>();
    c.top_k = j.at("top_k").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    c.truncation_factor = j.at("truncation_factor").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
  }
};

/// Restrict to the top_k most probable tokens, then to the smallest prefix
/// (by descending probability) whose mass reaches top_p; renormalize and
/// sample. Ties break toward the lower token id.
template <typename S>
int nucleus_sample(const std::vector<S>& logits, double top_p, double top_k_in, std::mt19937_64& rng) {
  const int top_k = int(top_k_in);
  require(!logits.empty(), "nucleus_sample: empty logits");
  const int v = int(logits.size());
  std::vector<double> probs(static_cast<size_t>(v));
  double mx = double(logits[0]);
  for (int i = 1; i < v; ++i) mx = std::max(mx, double(logits[size_t(i)]));
  double z = 0;
  for (int i = 0; i < v; ++i) {
    require(std::isfinite(double(logits[size_t(i)])), "nucleus_sample: non-finite logit");
    probs[size_t(i)] = std::exp(double(logits[size_t(i)]) - mx);
    z += probs[size_t(i)];
  }
  for (auto& p : probs) p /= z;

  std::vector<int> order(static_cast<size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[size_t(a)] != probs[size_t(b)]) return probs[size_t(a)] > probs[size_t(b)];
    return a < b;
  });

  const int k = std::min(std::max(1, top_k), v);
  double mass = 0;
  int n_keep = 0;
  for (int i = 0; i < k; ++i) {
    mass += probs[size_t(order[size_t(i)])];
    ++n_keep;
    if (mass >= top_p) break;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng) * mass;
  double acc = 0;
  for (int i = 0; i < n_keep; ++i) {
    acc += probs[size_t(order[size_t(i)])];
    if (u < acc) return order[size_t(i)];
  }
  return order[size_t(n_keep - 1)];
}

// ---------------------------------------------------------------------------
// Duration-to-length regressor
// ---------------------------------------------------------------------------

struct LengthRegressor {
  double slope = 0;
  double intercept = 0;

  double predict(double duration_s) const { return slope * duration_s + intercept; }

  nlohmann::json to_json() const { return {{"slope", slope}, {"intercept", intercept}}; }
  static LengthRegressor from_json(const nlohmann::json& j) {
    LengthRegressor r;
    r.slope = j.at("slope").get<double>();
    r.intercept = j.at("intercept").get<double>();
    return r;
  }
};

/// Ordinary least squares of LM token count on audio duration.
inline LengthRegressor fit_length_regressor(const std::vector<Utterance>& utts, const Tokenizer& llm_tok) {
  require(utts.size() >= 2, "fit_length_regressor: need at least 2 utterances");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(utts.size());
  bool distinct = false;
  for (const auto& u : utts) {
    const double x = u.audio.duration_s;
    const double y = double(llm_tok.encode(u.transcript).size());
    if (u.audio.duration_s != utts.front().audio.duration_s) distinct = true;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  require(distinct, "fit_length_regressor: all durations are equal");
  LengthRegressor r;
  r.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  r.intercept = (sy - r.slope * sx) / n;
  return r;
}

// ---------------------------------------------------------------------------
// Synchronized dual-decoder inference
// ---------------------------------------------------------------------------

struct DecodeStep {
  int llm_token = 0;
  int buffered_bytes = 0;            // pending bytes after this step
  std::string chunk;                 // text released this step ("" if none)
  std::vector<int> asr_tokens_fed;   // cascaded ids the ASR consumed this step
  std::vector<int> injection_layers;  // LM layers injected before this step
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;
};

struct DecodeResult {
  std::string transcript;
  int n_llm_tokens = 0;  // generated tokens including EOS
  int n_asr_tokens = 0;  // cascaded tokens fed to the ASR (excluding BOS)
  bool truncated = false;
  bool aborted = false;
  std::string abort_reason;
  DecodeTrace trace;
};

/// One pass of the synchronized decode loop: at each step the coupled
/// projections read the ASR decoder's newest per-layer states and are added
/// into the LM's residual stream; the LM samples a token; once the decoded
/// byte stream ends on a complete UTF-8 boundary the new text is re-tokenized
/// with the ASR tokenizer and the ASR decoder advances. Stops on LM EOS,
/// max_tokens, or either decoder's positional capacity. If the sampled bytes
/// can never form valid UTF-8, the utterance is aborted (scored empty).
///
/// With `forced_tokens`, sampling is bypassed and the given ids are consumed
/// in order (stopping early at EOS or when they run out).
template <typename S>
DecodeResult salsa_decode(const AsrModel<S>& asr, const Tokenizer& asr_tok, const LmModel<S>& lm,
                          const Tokenizer& lm_tok, const CouplingParams<S>& theta, const AudioFeatures& audio,
                          const DecodeConfig& cfg, const LengthRegressor* regressor, uint64_t utt_seed,
                          const std::vector<int>* forced_tokens = nullptr) {
  cfg.validate();
  theta.spec().validate();
  require(theta.spec().out_dim == lm.cfg.model_dim && theta.spec().in_dim == asr.cfg.decoder.model_dim,
          "salsa_decode: coupling dims do not match the models");

  DecodeResult res;
  auto enc = asr.encode(audio);
  AsrSession<S> asr_sess(asr, enc);
  asr_sess.advance({asr_tok.bos_id()});
  LmSession<S> lm_sess(lm);
  std::mt19937_64 rng(utt_seed);
  utf8::ByteBuffer buf;
  std::string flushed;
  int prev = lm_tok.bos_id();
  bool saw_eos = false;

  try {
    for (int i = 1; i <= cfg.max_tokens; ++i) {
      if (lm_sess.consumed_count() >= lm.cfg.max_positions) break;  // LM capacity reached
      auto injections = theta.make_injections(asr_sess);
      auto logits = lm_sess.step(prev, injections);
      int y;
      if (forced_tokens) {
        if (size_t(i - 1) >= forced_tokens->size()) break;
        y = (*forced_tokens)[size_t(i - 1)];
      } else {
        y = nucleus_sample(logits, cfg.top_p, cfg.top_k, rng);
      }
      DecodeStep step;
      step.llm_token = y;
      for (const auto& [layer, vec] : injections) step.injection_layers.push_back(layer);
      ++res.n_llm_tokens;
      if (y == lm_tok.eos_id()) {
        saw_eos = true;
        step.buffered_bytes = int(buf.pending().size());
        res.trace.steps.push_back(std::move(step));
        break;
      }
      buf.append(lm_tok.token_bytes(y));
      if (auto chunk = buf.take_if_complete()) {
        auto new_tokens = asr_tok.encode(*chunk);
        if (asr_sess.consumed_count() + int(new_tokens.size()) > asr.cfg.decoder.max_positions) {
          // ASR capacity reached: keep what is already synchronized.
          res.trace.steps.push_back(std::move(step));
          break;
        }
        asr_sess.advance(new_tokens.ids);
        res.n_asr_tokens += int(new_tokens.size());
        flushed += *chunk;
        step.chunk = std::move(*chunk);
        step.asr_tokens_fed = new_tokens.ids;
      }
      step.buffered_bytes = int(buf.pending().size());
      res.trace.steps.push_back(std::move(step));
      prev = y;
    }
  } catch (const Utf8StreamError& e) {
    res.aborted = true;
    res.abort_reason = e.what();
    res.transcript.clear();
    return res;
  }

  res.transcript = flushed;  // trailing incomplete bytes in `buf` are dropped

  if (regressor && !forced_tokens) {
    const int content_tokens = res.n_llm_tokens - (saw_eos ? 1 : 0);
    const double est = regressor->predict(audio.duration_s);
    if (est > 0 && content_tokens > 0 && double(content_tokens) > cfg.truncation_factor * est) {
      auto cps = utf8::decode_code_points(res.transcript);
      const double chars_per_token = double(cps.size()) / double(content_tokens);
      const size_t keep = std::min(cps.size(), size_t(std::max(0.0, std::floor(est * chars_per_token))));
      std::string cut;
      for (size_t c = 0; c < keep; ++c) cut += utf8::encode_code_point(cps[c]);
      res.transcript = std::move(cut);
      res.truncated = true;
    }
  }
  return res;
}

/// Synchronization invariant over a trace: after every step, the text the ASR
/// has consumed equals the longest complete-UTF-8 prefix of the text the LM
/// has produced. Throws on the first violation.
inline void check_trace_synchronization(const DecodeResult& res, const Tokenizer& lm_tok, const Tokenizer& asr_tok) {
  std::string lm_bytes;
  std::string asr_bytes;
  for (const auto& step : res.trace.steps) {
    if (step.llm_token != lm_tok.eos_id()) lm_bytes += lm_tok.token_bytes(step.llm_token);
    asr_bytes += asr_tok.decode_bytes(step.asr_tokens_fed);
    auto split = utf8::complete_prefix(std::string_view(lm_bytes));
    require(split.complete == asr_bytes,
            "trace synchronization violated: ASR consumed text differs from the complete LM prefix");
  }
  // Trace completeness: flushed chunks concatenate to the (pre-truncation) transcript.
  std::string chunks;
  for (const auto& step : res.trace.steps) chunks += step.chunk;
  if (!res.truncated && !res.aborted)
    require(chunks == res.transcript, "trace completeness violated: chunks do not concatenate to the transcript");
}

/// Greedy decoding from the ASR's own softmax (the decoder-only baseline).
template <typename S>
std::string asr_greedy_decode(const AsrModel<S>& asr, const Tokenizer& asr_tok, const AudioFeatures& audio,
                              int max_tokens) {
  return detail::asr_greedy_transcript(asr, asr_tok, audio, max_tokens);
}

// ---------------------------------------------------------------------------
// LM next-character prediction (greedy, with decode-loop byte buffering)
// ---------------------------------------------------------------------------

/// Conditions the LM on the tokenized prefix and greedily generates tokens
/// until a complete character forms; returns that character.
template <typename S>
std::optional<uint32_t> lm_greedy_next_char(const LmModel<S>& lm, const Tokenizer& tok, const std::string& prefix,
                                            int max_gen_tokens = 8) {
  LmSession<S> sess(lm);
  std::vector<int> ids{tok.bos_id()};
  for (int id : tok.encode(prefix).ids) ids.push_back(id);
  // Keep room for generation within the positional budget.
  const int budget = lm.cfg.max_positions - max_gen_tokens - 1;
  if (int(ids.size()) > budget && budget > 0) {
    std::vector<int> tail(ids.end() - budget, ids.end());
    ids = std::move(tail);
  }
  std::vector<S> logits;
  for (int id : ids) logits = sess.step(id);
  utf8::ByteBuffer buf;
  for (int g = 0; g < max_gen_tokens; ++g) {
    int best = 0;
    for (int j = 1; j < int(logits.size()); ++j)
      if (logits[size_t(j)] > logits[size_t(best)]) best = j;
    if (best == tok.eos_id()) return std::nullopt;
    try {
      buf.append(tok.token_bytes(best));
      auto text = buf.flush_longest();
      if (!text.empty()) return utf8::decode_code_points(text)[0];
    } catch (const Utf8StreamError&) {
      return std::nullopt;
    }
    if (sess.consumed_count() >= lm.cfg.max_positions) return std::nullopt;
    logits = sess.step(best);
  }
  return std::nullopt;
}

/// Next-character-prediction accuracy of the LM over a text set.
template <typename S>
double ncp_acc(const LmModel<S>& lm, const Tokenizer& tok, const std::vector<std::string>& texts) {
  return ncp_acc_with([&](const std::string& prefix) { return lm_greedy_next_char(lm, tok, prefix); }, texts);
}

// ---------------------------------------------------------------------------
// Decode output files
// ---------------------------------------------------------------------------

struct HypRecord {
  std::string utt_id;
  std::string hyp;
  int n_llm_tokens = 0;
  int n_asr_tokens = 0;
  bool truncated = false;
  bool aborted = false;
};

inline void write_hyps_jsonl(const std::string& path, const std::vector<HypRecord>& hyps) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  for (const auto& h : hyps) {
    nlohmann::json j{{"utt_id", h.utt_id},       {"hyp", h.hyp},           {"n_llm_tokens", h.n_llm_tokens},
                     {"n_asr_tokens", h.n_asr_tokens}, {"truncated", h.truncated}, {"aborted", h.aborted}};
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<HypRecord> read_hyps_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<HypRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    HypRecord h;
    h.utt_id = j.at("utt_id").get<std::string>();
    h.hyp = j.at("hyp").get<std::string>();
    h.n_llm_tokens = j.at("n_llm_tokens").get<int>();
    h.n_asr_tokens = j.at("n_asr_tokens").get<int>();
    h.truncated = j.at("truncated").get<bool>();
    h.aborted = j.at("aborted").get<bool>();
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace salsa
