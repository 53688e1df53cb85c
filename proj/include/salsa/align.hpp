#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/common.hpp"
#include "salsa/tokenizer.hpp"
#include "salsa/utf8.hpp"

namespace salsa {

/// The monotone map from LM token positions to ASR decoder states, rebuilt
/// from the decode loop's bookkeeping with gold-forced tokens.
///
/// state_index[t] is the number of cascaded ASR tokens the ASR decoder has
/// consumed at the moment the LM predicts target t (t = 0 predicts the first
/// content token with only BOS consumed, so state_index[0] == 0). With BOS at
/// ASR position 0, the value is also the ASR decoder's newest position index.
struct AlignmentMap {
  TokenSeq llm_tokens;  // [BOS] + content + [EOS]
  TokenSeq asr_tokens;  // [BOS] + cascaded chunk encodings (never fed EOS)
  std::vector<int> state_index;           // one entry per LM prediction step
  std::vector<int> chunk_close_positions;  // 0-based index into the generated tokens where a chunk closed
  std::vector<std::string> chunks;         // the flushed text chunks, concatenating to the transcript

  int llm_target_count() const { return int(state_index.size()); }
  int cascaded_count() const { return int(asr_tokens.size()) - 1; }

  nlohmann::json debug_json() const {
    return {{"llm_tokens", llm_tokens.ids},
            {"asr_tokens", asr_tokens.ids},
            {"state_index", state_index},
            {"chunk_close_positions", chunk_close_positions},
            {"chunks", chunks}};
  }
};

/// Simulates the synchronized decode loop over gold tokens: walk the LM
/// tokenization left to right, buffer decoded bytes, and each time the
/// accumulated text ends on a complete UTF-8 boundary re-tokenize the new
/// chunk with the ASR tokenizer and advance the ASR token count.
inline AlignmentMap build_alignment(const std::string& transcript, const Tokenizer& llm_tok,
                                    const Tokenizer& asr_tok) {
  require(utf8::is_complete(transcript), "build_alignment: transcript is not complete valid UTF-8");

  AlignmentMap out;
  std::vector<int> generated = llm_tok.encode(transcript).ids;
  generated.push_back(llm_tok.eos_id());

  std::vector<int> llm_ids{llm_tok.bos_id()};
  llm_ids.insert(llm_ids.end(), generated.begin(), generated.end());
  out.llm_tokens = llm_tok.wrap(std::move(llm_ids));

  std::vector<int> cascaded;
  utf8::ByteBuffer buf;
  int asr_count = 0;
  for (size_t i = 0; i < generated.size(); ++i) {
    out.state_index.push_back(asr_count);
    const int tok = generated[i];
    if (tok == llm_tok.eos_id()) break;  // the loop ends here; ASR is never advanced past the transcript
    buf.append(llm_tok.token_bytes(tok));
    if (auto chunk = buf.take_if_complete()) {
      auto ids = asr_tok.encode(*chunk);
      cascaded.insert(cascaded.end(), ids.ids.begin(), ids.ids.end());
      asr_count += int(ids.size());
      out.chunk_close_positions.push_back(int(i));
      out.chunks.push_back(std::move(*chunk));
    }
  }
  require(buf.empty(), "build_alignment: LM tokenization left an unfinished code point");

  std::vector<int> asr_ids{asr_tok.bos_id()};
  asr_ids.insert(asr_ids.end(), cascaded.begin(), cascaded.end());
  out.asr_tokens = asr_tok.wrap(std::move(asr_ids));
  return out;
}

/// The cascaded ASR tokenization: per-chunk encodings concatenated. This can
/// differ from encoding the whole transcript at once (merges cannot span a
/// chunk boundary), which is exactly what the decode loop produces.
inline TokenSeq cascaded_asr_tokens(const std::string& transcript, const Tokenizer& llm_tok,
                                    const Tokenizer& asr_tok) {
  auto align = build_alignment(transcript, llm_tok, asr_tok);
  std::vector<int> ids(align.asr_tokens.ids.begin() + 1, align.asr_tokens.ids.end());
  return asr_tok.wrap(std::move(ids));
}

/// True if any single character of `text` is split across two or more tokens
/// of this tokenizer's encoding — the condition that makes the synchronized
/// decode's byte buffering non-trivial.
inline bool has_multi_token_character(const Tokenizer& tok, std::string_view text) {
  auto ids = tok.encode(text);
  std::vector<size_t> token_bounds;  // cumulative byte offsets after each token
  size_t off = 0;
  for (int id : ids.ids) {
    off += tok.token_bytes(id).size();
    token_bounds.push_back(off);
  }
  size_t char_start = 0;
  for (uint32_t cp : utf8::decode_code_points(text)) {
    const size_t char_end = char_start + utf8::encode_code_point(cp).size();
    for (size_t b : token_bounds)
      if (b > char_start && b < char_end) return true;
    char_start = char_end;
  }
  return false;
}

}  // namespace salsa
