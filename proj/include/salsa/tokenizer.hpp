#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/common.hpp"

namespace salsa {

/// Token ids tagged with the identity of the tokenizer that produced them.
/// Mixing ids from two vocabularies is a silent corruption hazard, so every
/// consumer checks the tag at its boundary.
struct TokenSeq {
  std::vector<int> ids;
  uint64_t vocab_tag = 0;

  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  int operator[](size_t i) const { return ids[i]; }
  void push_back(int id) { ids.push_back(id); }
};

/// Byte-level BPE with byte fallback: ids 0..255 are the raw bytes, 256/257
/// are BOS/EOS, learned merges follow from 258. Every byte string is
/// encodable and decode(encode(b)) == b.
class Tokenizer {
 public:
  static constexpr int kBosId = 256;
  static constexpr int kEosId = 257;
  static constexpr int kFirstMergeId = 258;
  static constexpr int kNumSpecials = 2;

  struct Merge {
    int left = 0;
    int right = 0;
  };

  Tokenizer() = default;

  /// Greedy most-frequent-pair training. Stops when the vocab budget is
  /// reached or no adjacent pair occurs more than once. Ties break on the
  /// lexicographically smaller left token bytes, then smaller right.
  static Tokenizer train_bpe(const std::vector<std::string>& corpus, int vocab_size) {
    require(!corpus.empty(), "train_bpe: empty corpus");
    require(vocab_size >= 256 + kNumSpecials,
            "train_bpe: vocab_size must be at least " + std::to_string(256 + kNumSpecials));
    Tokenizer tok;
    tok.init_base_vocab();

    std::vector<std::vector<int>> seqs;
    seqs.reserve(corpus.size());
    for (const auto& text : corpus) {
      std::vector<int> s;
      s.reserve(text.size());
      for (unsigned char c : text) s.push_back(int(c));
      seqs.push_back(std::move(s));
    }

    const int n_merges = vocab_size - 256 - kNumSpecials;
    std::unordered_map<uint64_t, long> counts;
    for (int m = 0; m < n_merges; ++m) {
      counts.clear();
      for (const auto& s : seqs)
        for (size_t i = 0; i + 1 < s.size(); ++i) ++counts[pack_pair(s[i], s[i + 1])];
      // Selection order is total — (count desc, left bytes, right bytes,
      // left id, right id) — so the hash map's iteration order is irrelevant.
      std::pair<int, int> best{-1, -1};
      long best_count = 2;  // a pair must repeat to be merged
      for (const auto& [key, count] : counts) {
        if (count < best_count) continue;
        std::pair<int, int> pair{int(key >> 32), int(key & 0xffffffffu)};
        if (count > best_count) {
          best = pair;
          best_count = count;
          continue;
        }
        if (best.first < 0) {
          best = pair;
          continue;
        }
        const auto& bl = tok.vocab_[size_t(best.first)];
        const auto& br = tok.vocab_[size_t(best.second)];
        const auto& cl = tok.vocab_[size_t(pair.first)];
        const auto& cr = tok.vocab_[size_t(pair.second)];
        auto cand = std::tie(cl, cr, pair.first, pair.second);
        auto cur = std::tie(bl, br, best.first, best.second);
        if (cand < cur) best = pair;
      }
      if (best.first < 0) break;

      const int new_id = int(tok.vocab_.size());
      tok.vocab_.push_back(tok.vocab_[size_t(best.first)] + tok.vocab_[size_t(best.second)]);
      tok.merges_.push_back({best.first, best.second});
      for (auto& s : seqs) merge_in_place(s, best.first, best.second, new_id);
    }
    tok.finish_init();
    return tok;
  }

  /// Applies learned merges to a byte string: repeatedly merges the
  /// earliest-trained pair present (all its non-overlapping occurrences,
  /// left to right) until no rule applies.
  TokenSeq encode(std::string_view text) const {
    std::vector<int> s;
    s.reserve(text.size());
    for (unsigned char c : text) s.push_back(int(c));
    while (s.size() >= 2) {
      int best_rank = INT32_MAX;
      for (size_t i = 0; i + 1 < s.size(); ++i) {
        auto it = merge_rank_.find(pack_pair(s[i], s[i + 1]));
        if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == INT32_MAX) break;
      const Merge mg = merges_[size_t(best_rank)];
      const int new_id = kFirstMergeId + best_rank;
      merge_in_place(s, mg.left, mg.right, new_id);
    }
    return TokenSeq{std::move(s), tag_};
  }

  /// Concatenates the byte strings of the given ids. BOS/EOS contribute
  /// nothing. The result may be invalid UTF-8 mid-stream.
  std::string decode_bytes(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      require(id >= 0 && id < int(vocab_.size()), "decode: unknown token id " + std::to_string(id));
      out += vocab_[size_t(id)];
    }
    return out;
  }

  std::string decode(const TokenSeq& seq) const {
    check_tag(seq);
    return decode_bytes(seq.ids);
  }

  const std::string& token_bytes(int id) const {
    require(id >= 0 && id < int(vocab_.size()), "token_bytes: unknown token id " + std::to_string(id));
    return vocab_[size_t(id)];
  }

  int vocab_size() const { return int(vocab_.size()); }
  int bos_id() const { return kBosId; }
  int eos_id() const { return kEosId; }
  uint64_t tag() const { return tag_; }
  const std::vector<Merge>& merges() const { return merges_; }

  void check_tag(const TokenSeq& seq) const {
    require(seq.vocab_tag == tag_, "token ids from a different tokenizer (tag mismatch)");
  }
  TokenSeq wrap(std::vector<int> ids) const { return TokenSeq{std::move(ids), tag_}; }

  // -- serialization ---------------------------------------------------------

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["vocab"] = nlohmann::json::array();
    for (const auto& bytes : vocab_) {
      nlohmann::json arr = nlohmann::json::array();
      for (unsigned char c : bytes) arr.push_back(int(c));
      j["vocab"].push_back(std::move(arr));
    }
    j["merges"] = nlohmann::json::array();
    for (const auto& m : merges_) j["merges"].push_back({m.left, m.right});
    j["bos_id"] = kBosId;
    j["eos_id"] = kEosId;
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    Tokenizer tok;
    tok.init_base_vocab();
    const auto& merges = j.at("merges");
    const auto& vocab = j.at("vocab");
    require(vocab.size() == 256 + size_t(kNumSpecials) + merges.size(), "tokenizer json: vocab/merges size mismatch");
    for (const auto& m : merges) {
      int left = m.at(0).get<int>();
      int right = m.at(1).get<int>();
      require(left >= 0 && left < int(tok.vocab_.size()) && right >= 0 && right < int(tok.vocab_.size()),
              "tokenizer json: merge refers to unknown id");
      tok.vocab_.push_back(tok.vocab_[size_t(left)] + tok.vocab_[size_t(right)]);
      tok.merges_.push_back({left, right});
    }
    // Cross-check the stored vocab bytes.
    for (size_t i = 0; i < tok.vocab_.size(); ++i) {
      std::string bytes;
      for (const auto& b : vocab[i]) bytes.push_back(char(uint8_t(b.get<int>())));
      require(bytes == tok.vocab_[i], "tokenizer json: vocab entry " + std::to_string(i) + " inconsistent with merges");
    }
    tok.finish_init();
    return tok;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("tokenizer: cannot open for write: " + path);
    os << to_json().dump(0) << "\n";
    if (!os) throw IoError("tokenizer: write failed: " + path);
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("tokenizer: cannot open: " + path);
    nlohmann::json j;
    is >> j;
    return from_json(j);
  }

 private:
  void init_base_vocab() {
    vocab_.clear();
    for (int b = 0; b < 256; ++b) vocab_.push_back(std::string(1, char(uint8_t(b))));
    vocab_.push_back("");  // BOS
    vocab_.push_back("");  // EOS
  }

  void finish_init() {
    merge_rank_.clear();
    for (size_t r = 0; r < merges_.size(); ++r) merge_rank_[pack_pair(merges_[r].left, merges_[r].right)] = int(r);
    // Identity derived from content: a reloaded tokenizer keeps its tag, two
    // differently trained ones never share it.
    uint64_t h = fnv1a64("bpe");
    for (const auto& m : merges_) {
      h = fnv1a64(&m.left, sizeof(m.left), h);
      h = fnv1a64(&m.right, sizeof(m.right), h);
    }
    size_t vs = vocab_.size();
    tag_ = splitmix64(fnv1a64(&vs, sizeof(vs), h));
  }

  static uint64_t pack_pair(int a, int b) { return (uint64_t(uint32_t(a)) << 32) | uint64_t(uint32_t(b)); }

  /// One left-to-right pass replacing non-overlapping (left,right) with new_id.
  static void merge_in_place(std::vector<int>& s, int left, int right, int new_id) {
    size_t w = 0;
    for (size_t r = 0; r < s.size();) {
      if (r + 1 < s.size() && s[r] == left && s[r + 1] == right) {
        s[w++] = new_id;
        r += 2;
      } else {
        s[w++] = s[r++];
      }
    }
    s.resize(w);
  }

  std::vector<std::string> vocab_;
  std::vector<Merge> merges_;
  std::unordered_map<uint64_t, int> merge_rank_;
  uint64_t tag_ = 0;
};

}  // namespace salsa
