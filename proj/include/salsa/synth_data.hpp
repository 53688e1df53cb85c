#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/common.hpp"
#include "salsa/utf8.hpp"

namespace salsa {

/// A synthetic "language": a bigram chain over a small alphabet plus the
/// parameters of its pseudo-audio rendering. Everything downstream is a pure
/// function of (spec, seed).
struct LanguageSpec {
  std::string name;
  std::vector<uint32_t> alphabet;    // letter code points; ' ' separates words
  std::vector<double> transition;    // A x A row-stochastic, letter -> next letter
  int wlen_min = 2, wlen_max = 5;    // word length (letters)
  int slen_min = 3, slen_max = 7;    // sentence length (words)
  int feat_dim = 16;
  double frame_period = 0.02;        // synthetic seconds per frame
  uint64_t seed = 0;

  int alphabet_size() const { return int(alphabet.size()); }

  void validate() const {
    require(!alphabet.empty(), "language: empty alphabet");
    const size_t a = alphabet.size();
    require(transition.size() == a * a, "language: transition matrix must be AxA");
    for (size_t i = 0; i < a; ++i) {
      double row = 0;
      for (size_t j = 0; j < a; ++j) {
        require(transition[i * a + j] >= 0, "language: negative transition probability");
        row += transition[i * a + j];
      }
      require(std::abs(row - 1.0) <= 1e-9, "language: transition row " + std::to_string(i) + " sums to " +
                                               std::to_string(row) + ", expected 1");
    }
    require(wlen_min >= 1 && wlen_max >= wlen_min, "language: bad word-length range");
    require(slen_min >= 1 && slen_max >= slen_min, "language: bad sentence-length range");
    require(feat_dim >= 2, "language: feat_dim too small");
    require(frame_period > 0, "language: frame_period must be positive");
  }

  int letter_index(uint32_t cp) const {
    for (size_t i = 0; i < alphabet.size(); ++i)
      if (alphabet[i] == cp) return int(i);
    return -1;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["alphabet"] = alphabet;
    j["transition"] = transition;
    j["wlen_min"] = wlen_min;
    j["wlen_max"] = wlen_max;
    j["slen_min"] = slen_min;
    j["slen_max"] = slen_max;
    j["feat_dim"] = feat_dim;
    j["frame_period"] = frame_period;
    j["seed"] = seed;
    return j;
  }

  static LanguageSpec from_json(const nlohmann::json& j) {
    LanguageSpec s;
    s.name = j.at("name").get<std::string>();
    s.alphabet = j.at("alphabet").get<std::vector<uint32_t>>();
    s.transition = j.at("transition").get<std::vector<double>>();
    s.wlen_min = j.at("wlen_min").get<int>();
    s.wlen_max = j.at("wlen_max").get<int>();
    s.slen_min = j.at("slen_min").get<int>();
    s.slen_max = j.at("slen_max").get<int>();
    s.feat_dim = j.at("feat_dim").get<int>();
    s.frame_period = j.at("frame_period").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    s.validate();
    return s;
  }

  /// Concentrated random bigram rows: three preferred successors carry most
  /// of the mass so the language is predictable enough for an LM to exploit.
  static LanguageSpec with_random_chain(std::string name, std::vector<uint32_t> alphabet, uint64_t seed) {
    LanguageSpec s;
    s.name = std::move(name);
    s.alphabet = std::move(alphabet);
    s.seed = seed;
    const int a = s.alphabet_size();
    require(a >= 4, "language: need at least 4 letters");
    s.transition.assign(size_t(a) * size_t(a), 0.0);
    auto rng = component_rng(seed, "language-chain:" + s.name);
    std::vector<int> order(static_cast<size_t>(a));
    for (int i = 0; i < a; ++i) order[size_t(i)] = i;
    for (int i = 0; i < a; ++i) {
      std::shuffle(order.begin(), order.end(), rng);
      double* row = s.transition.data() + size_t(i) * size_t(a);
      const double rest = 0.10 / double(a - 3);
      for (int j = 0; j < a; ++j) row[size_t(order[size_t(j)])] = j == 0 ? 0.52 : j == 1 ? 0.25 : j == 2 ? 0.13 : rest;
      double sum = 0;
      for (int j = 0; j < a; ++j) sum += row[j];
      for (int j = 0; j < a; ++j) row[j] /= sum;
    }
    s.validate();
    return s;
  }

  static LanguageSpec demo_latin(uint64_t seed) {
    return with_random_chain("latin", {'a', 'e', 'i', 'o', 'u', 'k', 'm', 'n', 'r', 's', 't', 'v', 'l'}, seed);
  }

  /// Devanagari-range letters (3 UTF-8 bytes each) to force multi-token
  /// characters under a byte-level vocabulary.
  static LanguageSpec demo_nagari(uint64_t seed) {
    return with_random_chain(
        "nagari", {0x0905, 0x0915, 0x0917, 0x091a, 0x091f, 0x0924, 0x0928, 0x092a, 0x092e, 0x0930, 0x0932, 0x0938},
        seed);
  }
};

/// Frame matrix standing in for speech. Stored as f32 to match the on-disk
/// dataset format; models upcast as needed.
struct AudioFeatures {
  int t = 0;
  int dim = 0;
  std::vector<float> frames;  // t x dim, row-major
  double duration_s = 0;
};

struct Utterance {
  AudioFeatures audio;
  std::string transcript;
  std::string lang;
};

/// Fixed per-language unit-norm codebook vector for one character.
inline std::vector<double> char_embedding(const LanguageSpec& spec, uint32_t cp) {
  auto rng = component_rng(spec.seed, "codebook:" + spec.name + ":" + std::to_string(cp));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> e(size_t(spec.feat_dim));
  double norm2 = 0;
  for (auto& x : e) {
    x = normal(rng);
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : e) x *= inv;
  return e;
}

/// Seeded bigram sampling; the letter chain runs across word boundaries so
/// adjacent-letter statistics match the transition matrix exactly.
inline std::vector<std::string> gen_corpus(const LanguageSpec& spec, int n_sentences, uint64_t salt = 0) {
  spec.validate();
  require(n_sentences > 0, "gen_corpus: n_sentences must be positive");
  auto rng = component_rng(spec.seed, "corpus:" + spec.name + ":" + std::to_string(salt));
  const int a = spec.alphabet_size();
  std::uniform_int_distribution<int> first_letter(0, a - 1);
  std::uniform_int_distribution<int> word_len(spec.wlen_min, spec.wlen_max);
  std::uniform_int_distribution<int> sent_len(spec.slen_min, spec.slen_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::string> out;
  out.reserve(size_t(n_sentences));
  for (int s = 0; s < n_sentences; ++s) {
    std::string sentence;
    int prev = -1;
    const int n_words = sent_len(rng);
    for (int w = 0; w < n_words; ++w) {
      if (w > 0) sentence += ' ';
      const int len = word_len(rng);
      for (int c = 0; c < len; ++c) {
        int letter;
        if (prev < 0) {
          letter = first_letter(rng);
        } else {
          const double u = unit(rng);
          const double* row = spec.transition.data() + size_t(prev) * size_t(a);
          double acc = 0;
          letter = a - 1;
          for (int j = 0; j < a; ++j) {
            acc += row[j];
            if (u < acc) {
              letter = j;
              break;
            }
          }
        }
        sentence += utf8::encode_code_point(spec.alphabet[size_t(letter)]);
        prev = letter;
      }
    }
    out.push_back(std::move(sentence));
  }
  return out;
}

/// Frame count of character position i: a fixed language-level pattern in
/// {2,3,4}, keyed by the position index. Keeping the pattern independent of
/// the utterance makes the audio <-> character alignment exact, so the
/// zero-noise regime is fully decodable and noise_sigma alone controls the
/// error rate.
inline int frames_at_position(const LanguageSpec& spec, int position) {
  const uint64_t base = derive_seed(spec.seed, "frame-counts:" + spec.name);
  return 2 + int(splitmix64(base + uint64_t(position)) % 3);
}

/// Each character emits 2..4 frames of its codebook vector plus isotropic
/// Gaussian noise. Spaces are rendered like letters (they carry their own
/// codebook entry).
inline AudioFeatures synthesize_audio(const std::string& transcript, const LanguageSpec& spec, double noise_sigma,
                                      std::mt19937_64& rng) {
  spec.validate();
  require(!transcript.empty(), "synthesize_audio: empty transcript");
  require(noise_sigma >= 0, "synthesize_audio: negative noise");
  const auto cps = utf8::decode_code_points(transcript);
  for (uint32_t cp : cps)
    require(cp == ' ' || spec.letter_index(cp) >= 0,
            "synthesize_audio: character U+" + std::to_string(cp) + " not in alphabet");

  std::normal_distribution<double> noise(0.0, 1.0);
  AudioFeatures out;
  out.dim = spec.feat_dim;
  int pos = 0;
  for (uint32_t cp : cps) {
    const auto e = char_embedding(spec, cp);
    const int k = frames_at_position(spec, pos++);
    for (int f = 0; f < k; ++f) {
      for (int j = 0; j < spec.feat_dim; ++j) out.frames.push_back(float(e[size_t(j)] + noise_sigma * noise(rng)));
      ++out.t;
    }
  }
  out.duration_s = out.t * spec.frame_period;
  return out;
}

struct SplitFractions {
  double train = 0.8, dev = 0.1, test = 0.1;
};

struct Dataset {
  std::vector<Utterance> train, dev, test;
  std::vector<std::string> lm_corpus;
};

inline long count_code_points(const std::vector<std::string>& texts) {
  long n = 0;
  for (const auto& t : texts) n += long(utf8::decode_code_points(t).size());
  return n;
}

/// Disjoint train/dev/test splits of unique transcripts plus an LM text
/// corpus lm_ratio times the character volume of the training transcripts.
inline Dataset make_dataset(const LanguageSpec& spec, int n_utts, double noise_sigma, SplitFractions fracs,
                            double lm_ratio = 50.0) {
  spec.validate();
  require(n_utts > 0, "make_dataset: n_utts must be positive");
  require(fracs.train >= 0 && fracs.dev >= 0 && fracs.test >= 0, "make_dataset: negative split fraction");
  require(std::abs(fracs.train + fracs.dev + fracs.test - 1.0) <= 1e-9, "make_dataset: split fractions must sum to 1");
  require(lm_ratio > 0, "make_dataset: lm_ratio must be positive");

  // Unique transcripts guarantee the exact-match disjointness of the splits.
  std::vector<std::string> transcripts;
  std::set<std::string> seen;
  uint64_t salt = 0;
  while (int(transcripts.size()) < n_utts) {
    require(salt < 200, "make_dataset: cannot generate enough unique transcripts");
    for (auto& s : gen_corpus(spec, n_utts, salt)) {
      if (int(transcripts.size()) >= n_utts) break;
      if (seen.insert(s).second) transcripts.push_back(std::move(s));
    }
    ++salt;
  }

  auto audio_rng = component_rng(spec.seed, "audio:" + spec.name);
  std::vector<Utterance> utts;
  utts.reserve(size_t(n_utts));
  for (const auto& text : transcripts) {
    Utterance u;
    u.transcript = text;
    u.lang = spec.name;
    u.audio = synthesize_audio(text, spec, noise_sigma, audio_rng);
    utts.push_back(std::move(u));
  }

  const int n_dev = int(std::floor(fracs.dev * n_utts));
  const int n_test = int(std::floor(fracs.test * n_utts));
  const int n_train = n_utts - n_dev - n_test;
  Dataset d;
  d.train.assign(utts.begin(), utts.begin() + n_train);
  d.dev.assign(utts.begin() + n_train, utts.begin() + n_train + n_dev);
  d.test.assign(utts.begin() + n_train + n_dev, utts.end());

  std::vector<std::string> train_texts;
  for (const auto& u : d.train) train_texts.push_back(u.transcript);
  const long target_chars = long(std::ceil(lm_ratio * double(count_code_points(train_texts))));
  long have = 0;
  uint64_t lm_salt = 1u << 20;
  while (have < target_chars) {
    for (auto& s : gen_corpus(spec, 256, lm_salt)) {
      if (have >= target_chars) break;
      have += long(utf8::decode_code_points(s).size());
      d.lm_corpus.push_back(std::move(s));
    }
    ++lm_salt;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Dataset files: JSON Lines, one utterance per line, frames as base64 f32 LE.
// ---------------------------------------------------------------------------

inline void write_utterances_jsonl(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  for (const auto& u : utts) {
    nlohmann::json j;
    j["text"] = u.transcript;
    j["lang"] = u.lang;
    static_assert(sizeof(float) == 4);
    j["frames"] = base64_encode(u.audio.frames.data(), u.audio.frames.size() * 4);
    j["t"] = u.audio.t;
    j["d"] = u.audio.dim;
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<Utterance> read_utterances_jsonl(const std::string& path, double frame_period) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Utterance u;
    u.transcript = j.at("text").get<std::string>();
    u.lang = j.at("lang").get<std::string>();
    u.audio.t = j.at("t").get<int>();
    u.audio.dim = j.at("d").get<int>();
    auto bytes = base64_decode(j.at("frames").get<std::string>());
    require(bytes.size() == size_t(u.audio.t) * size_t(u.audio.dim) * 4, "dataset: frame blob size mismatch in " + path);
    u.audio.frames.resize(bytes.size() / 4);
    std::memcpy(u.audio.frames.data(), bytes.data(), bytes.size());
    u.audio.duration_s = u.audio.t * frame_period;
    out.push_back(std::move(u));
  }
  return out;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  for (const auto& l : lines) os << l << "\n";
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace salsa
