#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/checkpoint.hpp"
#include "salsa/common.hpp"
#include "salsa/coupling.hpp"
#include "salsa/decode.hpp"
#include "salsa/eval.hpp"
#include "salsa/models.hpp"
#include "salsa/synth_data.hpp"
#include "salsa/tokenizer.hpp"
#include "salsa/train.hpp"

namespace salsa {

/// One flat, fully serializable view of every knob in a run. A saved config
/// plus the same seed reproduces every output file byte for byte.
struct RunConfig {
  uint64_t seed = 1;

  std::string lang_preset = "latin";  // latin | nagari
  int feat_dim = 16;

  int n_utts = 800;
  double frac_train = 0.65, frac_dev = 0.10, frac_test = 0.25;
  double noise_sigma = 0.85;
  double lm_ratio = 50.0;

  int asr_vocab = 258;  // byte-level ASR vocabulary
  int lm_vocab = 384;
  int tok_train_cap = 4000;  // corpus lines used for BPE training

  int asr_enc_layers = 4, asr_dec_layers = 4, asr_dim = 128, asr_heads = 4, asr_ffn = 256;
  int asr_enc_positions = 256, asr_dec_positions = 112;
  int lm_layers = 8, lm_dim = 256, lm_heads = 8, lm_ffn = 512, lm_positions = 112;

  int lm_pretrain_steps = 1200, lm_pretrain_batch = 16;
  double lm_pretrain_lr = 1e-3, lm_pretrain_wd = 0.01;
  int asr_pretrain_steps = 1500, asr_pretrain_batch = 16;
  double asr_pretrain_lr = 2e-3, asr_pretrain_wd = 0.01;

  int couple_k = 4;
  std::string couple_placement = "uniform";
  int couple_bottleneck = 0;  // 0 = asr_dim / 4

  TrainConfig train;    // coupling training (paper defaults)
  DecodeConfig decode;  // top_p 0.9, top_k 10

  double quadrant_wer = 0.3, quadrant_ncp = 0.5;

  using FieldRef = std::variant<int*, double*, uint64_t*, std::string*>;

  std::vector<std::pair<std::string, FieldRef>> fields() {
    return {
        {"seed", &seed},
        {"lang.preset", &lang_preset},
        {"lang.feat_dim", &feat_dim},
        {"data.n_utts", &n_utts},
        {"data.frac_train", &frac_train},
        {"data.frac_dev", &frac_dev},
        {"data.frac_test", &frac_test},
        {"data.noise_sigma", &noise_sigma},
        {"data.lm_ratio", &lm_ratio},
        {"tok.asr_vocab", &asr_vocab},
        {"tok.lm_vocab", &lm_vocab},
        {"tok.train_cap", &tok_train_cap},
        {"asr.enc_layers", &asr_enc_layers},
        {"asr.dec_layers", &asr_dec_layers},
        {"asr.model_dim", &asr_dim},
        {"asr.n_heads", &asr_heads},
        {"asr.ffn_dim", &asr_ffn},
        {"asr.enc_positions", &asr_enc_positions},
        {"asr.dec_positions", &asr_dec_positions},
        {"lm.n_layers", &lm_layers},
        {"lm.model_dim", &lm_dim},
        {"lm.n_heads", &lm_heads},
        {"lm.ffn_dim", &lm_ffn},
        {"lm.max_positions", &lm_positions},
        {"pretrain.lm_steps", &lm_pretrain_steps},
        {"pretrain.lm_batch", &lm_pretrain_batch},
        {"pretrain.lm_lr", &lm_pretrain_lr},
        {"pretrain.lm_wd", &lm_pretrain_wd},
        {"pretrain.asr_steps", &asr_pretrain_steps},
        {"pretrain.asr_batch", &asr_pretrain_batch},
        {"pretrain.asr_lr", &asr_pretrain_lr},
        {"pretrain.asr_wd", &asr_pretrain_wd},
        {"couple.k", &couple_k},
        {"couple.placement", &couple_placement},
        {"couple.bottleneck", &couple_bottleneck},
        {"train.epochs", &train.epochs},
        {"train.batch_size", &train.batch_size},
        {"train.learning_rate", &train.learning_rate},
        {"train.weight_decay", &train.weight_decay},
        {"train.max_steps", &train.max_steps},
        {"train.seed", &train.seed},
        {"train.grad_clip_norm", &train.grad_clip_norm},
        {"decode.top_p", &decode.top_p},
        {"decode.top_k", &decode.top_k},
        {"decode.max_tokens", &decode.max_tokens},
        {"decode.truncation_factor", &decode.truncation_factor},
        {"decode.seed", &decode.seed},
        {"eval.quadrant_wer", &quadrant_wer},
        {"eval.quadrant_ncp", &quadrant_ncp},
    };
  }

  nlohmann::json to_json() {
    nlohmann::json j;
    for (auto& [key, ref] : fields())
      std::visit([&](auto* p) { j[key] = *p; }, ref);
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    auto fs = c.fields();
    std::map<std::string, FieldRef> table(fs.begin(), fs.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
      auto f = table.find(it.key());
      require(f != table.end(), "config: unknown key '" + it.key() + "'");
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            *p = it.value().get<T>();
          },
          f->second);
    }
    return c;
  }

  void set_key(const std::string& key, const std::string& value) {
    auto fs = fields();
    for (auto& [k, ref] : fs) {
      if (k != key) continue;
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
              *p = value;
            } else if constexpr (std::is_same_v<T, int>) {
              *p = std::stoi(value);
            } else if constexpr (std::is_same_v<T, uint64_t>) {
              *p = std::stoull(value);
            } else {
              *p = std::stod(value);
            }
          },
          ref);
      return;
    }
    throw ValueError("config: unknown key '" + key + "'");
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open: " + path);
    nlohmann::json j;
    is >> j;
    return from_json(j);
  }

  void save(const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("config: cannot open for write: " + path);
    os << to_json().dump(2) << "\n";
  }

  LanguageSpec language() const {
    LanguageSpec spec;
    if (lang_preset == "latin")
      spec = LanguageSpec::demo_latin(derive_seed(seed, "lang:latin"));
    else if (lang_preset == "nagari")
      spec = LanguageSpec::demo_nagari(derive_seed(seed, "lang:nagari"));
    else
      throw ValueError("config: unknown lang.preset '" + lang_preset + "' (latin|nagari)");
    spec.feat_dim = feat_dim;
    return spec;
  }

  AsrConfig asr_config(int vocab_size) const {
    AsrConfig c;
    c.encoder.n_layers = asr_enc_layers;
    c.encoder.model_dim = asr_dim;
    c.encoder.n_heads = asr_heads;
    c.encoder.ffn_dim = asr_ffn;
    c.encoder.vocab_size = 1;
    c.encoder.max_positions = asr_enc_positions;
    c.decoder = c.encoder;
    c.decoder.vocab_size = vocab_size;
    c.decoder.max_positions = asr_dec_positions;
    c.feat_dim = feat_dim;
    c.validate();
    return c;
  }

  ModelConfig lm_config(int vocab_size) const {
    ModelConfig c;
    c.n_layers = lm_layers;
    c.model_dim = lm_dim;
    c.n_heads = lm_heads;
    c.ffn_dim = lm_ffn;
    c.vocab_size = vocab_size;
    c.max_positions = lm_positions;
    c.validate();
    return c;
  }
};

namespace pipeline {

namespace fs = std::filesystem;

inline std::string utt_id(size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "utt%05zu", index);
  return buf;
}

// ---------------------------------------------------------------------------
// Directory conventions
// ---------------------------------------------------------------------------

struct DataDir {
  std::string root;
  std::string train_path() const { return (fs::path(root) / "train.jsonl").string(); }
  std::string dev_path() const { return (fs::path(root) / "dev.jsonl").string(); }
  std::string test_path() const { return (fs::path(root) / "test.jsonl").string(); }
  std::string lm_corpus_path() const { return (fs::path(root) / "lm_corpus.txt").string(); }
  std::string language_path() const { return (fs::path(root) / "language.json").string(); }

  LanguageSpec language() const {
    std::ifstream is(language_path());
    if (!is) throw IoError("dataset: cannot open " + language_path());
    nlohmann::json j;
    is >> j;
    return LanguageSpec::from_json(j);
  }
  std::vector<Utterance> split(const std::string& which) const {
    auto spec = language();
    if (which == "train") return read_utterances_jsonl(train_path(), spec.frame_period);
    if (which == "dev") return read_utterances_jsonl(dev_path(), spec.frame_period);
    if (which == "test") return read_utterances_jsonl(test_path(), spec.frame_period);
    throw ValueError("dataset: unknown split '" + which + "'");
  }
};

struct ModelDir {
  std::string root;
  std::string lm_tok_path() const { return (fs::path(root) / "lm_tok.json").string(); }
  std::string lm_ckpt_path() const { return (fs::path(root) / "lm.ckpt").string(); }
  std::string lm_cfg_path() const { return (fs::path(root) / "lm.json").string(); }
  std::string asr_tok_path() const { return (fs::path(root) / "asr_tok.json").string(); }
  std::string asr_ckpt_path() const { return (fs::path(root) / "asr.ckpt").string(); }
  std::string asr_cfg_path() const { return (fs::path(root) / "asr.json").string(); }

  LmModel<float> load_lm() const {
    std::ifstream is(lm_cfg_path());
    if (!is) throw IoError("model: cannot open " + lm_cfg_path());
    nlohmann::json j;
    is >> j;
    auto cfg = ModelConfig::from_json(j);
    std::mt19937_64 rng(0);
    auto m = LmModel<float>::init(cfg, rng);
    load_checkpoint(lm_ckpt_path(), m.params());
    return m;
  }
  AsrModel<float> load_asr() const {
    std::ifstream is(asr_cfg_path());
    if (!is) throw IoError("model: cannot open " + asr_cfg_path());
    nlohmann::json j;
    is >> j;
    auto cfg = AsrConfig::from_json(j);
    std::mt19937_64 rng(0);
    auto m = AsrModel<float>::init(cfg, rng);
    load_checkpoint(asr_ckpt_path(), m.params());
    return m;
  }
};

struct CouplingDir {
  std::string root;
  std::string spec_path() const { return (fs::path(root) / "coupling.json").string(); }
  std::string theta_path() const { return (fs::path(root) / "theta.ckpt").string(); }
  std::string report_path() const { return (fs::path(root) / "train_report.json").string(); }
  std::string loss_path() const { return (fs::path(root) / "train_loss.csv").string(); }

  CouplingSpec load_spec() const {
    std::ifstream is(spec_path());
    if (!is) throw IoError("coupling: cannot open " + spec_path());
    nlohmann::json j;
    is >> j;
    return CouplingSpec::from_json(j);
  }
  CouplingParams<float> load_theta() const {
    auto spec = load_spec();
    std::mt19937_64 rng(0);
    auto theta = CouplingParams<float>::init(spec, rng);
    theta.load(theta_path());
    return theta;
  }
};

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Commands. Each is a pure function of (config, inputs, seed); logs go to
// `log`, outputs to files. Exceptions propagate to the caller.
// ---------------------------------------------------------------------------

inline void cmd_gen(RunConfig cfg, const std::string& out_dir, std::ostream& log) {
  fs::create_directories(out_dir);
  auto spec = cfg.language();
  auto data = make_dataset(spec, cfg.n_utts, cfg.noise_sigma, {cfg.frac_train, cfg.frac_dev, cfg.frac_test},
                           cfg.lm_ratio);
  DataDir dir{out_dir};
  write_utterances_jsonl(dir.train_path(), data.train);
  write_utterances_jsonl(dir.dev_path(), data.dev);
  write_utterances_jsonl(dir.test_path(), data.test);
  write_lines(dir.lm_corpus_path(), data.lm_corpus);
  write_json(dir.language_path(), spec.to_json());
  cfg.save((fs::path(out_dir) / "run_config.json").string());
  log << "gen: lang=" << spec.name << " train=" << data.train.size() << " dev=" << data.dev.size()
      << " test=" << data.test.size() << " lm_lines=" << data.lm_corpus.size() << "\n";
}

inline std::vector<Utterance> pooled_split(const std::vector<DataDir>& dirs, const std::string& which) {
  std::vector<Utterance> out;
  for (const auto& d : dirs) {
    auto part = d.split(which);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

inline void cmd_pretrain(const RunConfig& cfg, const std::vector<std::string>& data_dirs, const std::string& which,
                         const std::string& out_dir, std::ostream& log) {
  require(!data_dirs.empty(), "pretrain: no data directories");
  fs::create_directories(out_dir);
  std::vector<DataDir> dirs;
  for (const auto& d : data_dirs) dirs.push_back({d});
  ModelDir mdir{out_dir};

  if (which == "lm") {
    std::vector<std::string> corpus, dev_texts;
    for (const auto& d : dirs) {
      auto lines = read_lines(d.lm_corpus_path());
      corpus.insert(corpus.end(), lines.begin(), lines.end());
      for (const auto& u : d.split("dev")) dev_texts.push_back(u.transcript);
    }
    std::vector<std::string> tok_corpus(corpus.begin(),
                                        corpus.begin() + std::min<size_t>(corpus.size(), size_t(cfg.tok_train_cap)));
    auto tok = Tokenizer::train_bpe(tok_corpus, cfg.lm_vocab);
    tok.save(mdir.lm_tok_path());

    // The mismatch condition: with a multi-byte script, at least one
    // character of the data must split across >= 2 LM tokens.
    bool multibyte = false, any_split = false;
    for (const auto& d : dirs)
      for (const auto* split : {"train", "dev", "test"})
        for (const auto& u : d.split(split)) {
          for (unsigned char c : u.transcript) multibyte = multibyte || c >= 0x80;
          any_split = any_split || has_multi_token_character(tok, u.transcript);
        }
    if (multibyte)
      require(any_split, "pretrain lm: no character splits across tokens; raise the script's byte diversity or "
                         "lower tok.lm_vocab");

    auto model_cfg = cfg.lm_config(tok.vocab_size());
    auto rng = component_rng(cfg.seed, "init-lm");
    auto model = LmModel<float>::init(model_cfg, rng);
    PretrainOptions opt;
    opt.batch_size = cfg.lm_pretrain_batch;
    opt.lr = cfg.lm_pretrain_lr;
    opt.weight_decay = cfg.lm_pretrain_wd;
    opt.max_steps = cfg.lm_pretrain_steps;
    opt.seed = derive_seed(cfg.seed, "pretrain-lm");
    auto report = pretrain_lm(model, tok, corpus, dev_texts, opt);
    save_checkpoint(mdir.lm_ckpt_path(), model.params());
    write_json(mdir.lm_cfg_path(), model_cfg.to_json());
    write_json((fs::path(out_dir) / "lm_report.json").string(),
               {{"init_dev_loss", report.init_dev_loss},
                {"final_dev_loss", report.final_dev_loss},
                {"dev_ppl", report.dev_ppl}});
    std::ofstream csv((fs::path(out_dir) / "lm_loss.csv").string(), std::ios::trunc);
    csv << "step,loss\n";
    for (auto& [s, l] : report.loss_curve) csv << s << "," << l << "\n";
    log << "pretrain lm: vocab=" << tok.vocab_size() << " dev_ppl=" << report.dev_ppl
        << " dev_loss=" << report.final_dev_loss << " (" << report.wall_s << "s)\n";
  } else if (which == "asr") {
    std::vector<std::string> transcripts;
    auto train = pooled_split(dirs, "train");
    auto dev = pooled_split(dirs, "dev");
    for (const auto& u : train) transcripts.push_back(u.transcript);
    auto tok = Tokenizer::train_bpe(transcripts, cfg.asr_vocab);
    tok.save(mdir.asr_tok_path());

    auto model_cfg = cfg.asr_config(tok.vocab_size());
    auto rng = component_rng(cfg.seed, "init-asr");
    auto model = AsrModel<float>::init(model_cfg, rng);
    PretrainOptions opt;
    opt.batch_size = cfg.asr_pretrain_batch;
    opt.lr = cfg.asr_pretrain_lr;
    opt.weight_decay = cfg.asr_pretrain_wd;
    opt.max_steps = cfg.asr_pretrain_steps;
    opt.seed = derive_seed(cfg.seed, "pretrain-asr");
    opt.dev_cap = 64;
    auto report = pretrain_asr(model, tok, train, dev, opt);
    save_checkpoint(mdir.asr_ckpt_path(), model.params());
    write_json(mdir.asr_cfg_path(), model_cfg.to_json());
    write_json((fs::path(out_dir) / "asr_report.json").string(), {{"dev_cer", report.dev_cer}});
    std::ofstream csv((fs::path(out_dir) / "asr_loss.csv").string(), std::ios::trunc);
    csv << "step,loss\n";
    for (auto& [s, l] : report.loss_curve) csv << s << "," << l << "\n";
    log << "pretrain asr: vocab=" << tok.vocab_size() << " dev_cer=" << report.dev_cer << " (" << report.wall_s
        << "s)\n";
  } else {
    throw ValueError("pretrain: --which must be asr or lm");
  }
}

inline void cmd_train(const RunConfig& cfg, const std::vector<std::string>& data_dirs, const std::string& model_dir,
                      const std::string& out_dir, std::ostream& log) {
  require(!data_dirs.empty(), "train: no data directories");
  fs::create_directories(out_dir);
  std::vector<DataDir> dirs;
  for (const auto& d : data_dirs) dirs.push_back({d});
  ModelDir mdir{model_dir};

  auto asr_tok = Tokenizer::load(mdir.asr_tok_path());
  auto lm_tok = Tokenizer::load(mdir.lm_tok_path());
  auto asr = mdir.load_asr();
  auto lm = mdir.load_lm();

  auto spec = CouplingSpec::make(cfg.couple_k, asr.cfg.decoder.n_layers, lm.cfg.n_layers,
                                 placement_from_name(cfg.couple_placement), asr.cfg.decoder.model_dim,
                                 lm.cfg.model_dim, cfg.couple_bottleneck);
  auto rng = component_rng(cfg.seed, "init-coupling");
  auto theta = CouplingParams<float>::init(spec, rng);

  auto train_utts = pooled_split(dirs, "train");
  auto dev_utts = pooled_split(dirs, "dev");
  TrainConfig tcfg = cfg.train;
  if (tcfg.seed == 0) tcfg.seed = derive_seed(cfg.seed, "train-coupling");
  auto report = train_coupling(train_utts, dev_utts, asr, asr_tok, lm, lm_tok, theta, tcfg);
  require(report.frozen_unchanged(), "train: frozen backbone checksums changed");

  CouplingDir cdir{out_dir};
  write_json(cdir.spec_path(), spec.to_json());
  theta.save(cdir.theta_path());
  write_json(cdir.report_path(), report.to_json());
  report.write_loss_csv(cdir.loss_path());
  log << "train: pairs=" << spec.k() << " placement=" << placement_name(spec.placement)
      << " params=" << theta.param_count() << " steps=" << report.steps_run
      << " dev_loss " << report.init_dev_loss << " -> " << report.final_dev_loss
      << " frozen_unchanged=" << (report.frozen_unchanged() ? "yes" : "no")
      << " skipped=" << report.skipped_utterances << " (" << report.wall_s << "s)\n";
}

inline void cmd_decode(const RunConfig& cfg, const std::string& data_dir, const std::string& model_dir,
                       const std::string& coupling_dir, const std::string& mode, const std::string& split,
                       const std::string& out_path, bool write_trace, std::ostream& log) {
  DataDir ddir{data_dir};
  ModelDir mdir{model_dir};
  auto utts = ddir.split(split);
  std::vector<HypRecord> hyps;
  DecodeConfig dcfg = cfg.decode;
  if (dcfg.seed == 0) dcfg.seed = derive_seed(cfg.seed, "decode");

  if (mode == "asr_only") {
    auto asr_tok = Tokenizer::load(mdir.asr_tok_path());
    auto asr = mdir.load_asr();
    for (size_t i = 0; i < utts.size(); ++i) {
      HypRecord h;
      h.utt_id = utt_id(i);
      h.hyp = asr_greedy_decode(asr, asr_tok, utts[i].audio, asr.cfg.decoder.max_positions - 1);
      hyps.push_back(std::move(h));
    }
  } else if (mode == "salsa" || mode == "lm_check") {
    auto asr_tok = Tokenizer::load(mdir.asr_tok_path());
    auto lm_tok = Tokenizer::load(mdir.lm_tok_path());
    auto asr = mdir.load_asr();
    auto lm = mdir.load_lm();
    CouplingParams<float> theta = [&] {
      if (mode == "salsa") return CouplingDir{coupling_dir}.load_theta();
      // lm_check: zero-initialized coupling, output must equal plain LM sampling.
      auto spec = CouplingSpec::make(cfg.couple_k, asr.cfg.decoder.n_layers, lm.cfg.n_layers,
                                     placement_from_name(cfg.couple_placement), asr.cfg.decoder.model_dim,
                                     lm.cfg.model_dim, cfg.couple_bottleneck);
      auto zrng = component_rng(cfg.seed, "init-coupling");
      return CouplingParams<float>::init(spec, zrng);
    }();

    auto reg = fit_length_regressor(ddir.split("train"), lm_tok);
    nlohmann::json traces = nlohmann::json::array();
    long aborted = 0;
    for (size_t i = 0; i < utts.size(); ++i) {
      const uint64_t utt_seed = dcfg.seed ^ uint64_t(i);
      auto res = salsa_decode(asr, asr_tok, lm, lm_tok, theta, utts[i].audio, dcfg, &reg, utt_seed);
      if (mode == "lm_check") {
        // Verify zero-residual equivalence against a plain LM loop.
        LmSession<float> sess(lm);
        std::mt19937_64 rng(utt_seed);
        int prev = lm_tok.bos_id();
        for (const auto& step : res.trace.steps) {
          auto logits = sess.step(prev);
          int y = nucleus_sample(logits, dcfg.top_p, dcfg.top_k, rng);
          require(y == step.llm_token, "lm_check: zero-coupling decode diverged from plain LM sampling");
          prev = y;
        }
      }
      HypRecord h;
      h.utt_id = utt_id(i);
      h.hyp = res.transcript;
      h.n_llm_tokens = res.n_llm_tokens;
      h.n_asr_tokens = res.n_asr_tokens;
      h.truncated = res.truncated;
      h.aborted = res.aborted;
      if (res.aborted) ++aborted;
      if (write_trace) {
        long chunks = 0;
        for (const auto& s : res.trace.steps) chunks += s.chunk.empty() ? 0 : 1;
        traces.push_back({{"utt_id", h.utt_id},
                          {"steps", res.trace.steps.size()},
                          {"chunks", chunks},
                          {"n_asr_tokens", h.n_asr_tokens},
                          {"truncated", h.truncated},
                          {"aborted", h.aborted}});
      }
      hyps.push_back(std::move(h));
    }
    if (write_trace) {
      std::ofstream os(out_path + ".trace.jsonl", std::ios::trunc);
      for (const auto& t : traces) os << t.dump() << "\n";
    }
    if (aborted > 0) log << "decode: " << aborted << " utterances aborted (scored empty)\n";
  } else {
    throw ValueError("decode: --mode must be salsa, asr_only, or lm_check");
  }

  write_hyps_jsonl(out_path, hyps);
  log << "decode: mode=" << mode << " split=" << split << " utts=" << hyps.size() << " -> " << out_path << "\n";
}

inline MetricReport cmd_eval(const std::string& refs_path, const std::string& hyps_path,
                             const std::string& out_prefix, std::ostream& log) {
  // References are dataset JSONL; ids are line positions.
  auto refs_utts = read_utterances_jsonl(refs_path, 0.02);
  auto hyps = read_hyps_jsonl(hyps_path);
  std::map<std::string, std::string> hyp_by_id;
  for (const auto& h : hyps) hyp_by_id[h.utt_id] = h.hyp;

  std::vector<std::string> missing;
  std::vector<std::string> refs, matched, ids;
  for (size_t i = 0; i < refs_utts.size(); ++i) {
    auto id = utt_id(i);
    auto it = hyp_by_id.find(id);
    if (it == hyp_by_id.end()) {
      missing.push_back(id);
      continue;
    }
    refs.push_back(refs_utts[i].transcript);
    matched.push_back(it->second);
    ids.push_back(id);
    hyp_by_id.erase(it);
  }
  if (!missing.empty() || !hyp_by_id.empty()) {
    std::string msg = "eval: utt_id mismatch;";
    for (const auto& m : missing) msg += " missing hyp " + m;
    for (const auto& [id, h] : hyp_by_id) msg += " extra hyp " + id;
    throw ValueError(msg);
  }

  auto report = MetricReport::score(refs, matched, ids);
  report.write_csv(out_prefix + ".csv");
  write_json(out_prefix + ".json", report.summary_json());
  log << "eval: n=" << report.per_utt.size() << " WER=" << report.corpus_wer() << " CER=" << report.corpus_cer()
      << "\n";
  return report;
}

inline void cmd_report(const std::string& inputs_path, double wer_threshold, double ncp_threshold,
                       const std::string& out_path, std::ostream& log) {
  std::ifstream is(inputs_path);
  if (!is) throw IoError("report: cannot open " + inputs_path);
  nlohmann::json j;
  is >> j;
  std::vector<QuadrantEntry> entries;
  for (auto it = j.begin(); it != j.end(); ++it)
    entries.push_back({it.key(), it.value().at("wer").get<double>(), it.value().at("ncp_acc").get<double>()});
  auto csv = quadrant_report(entries, wer_threshold, ncp_threshold);
  std::ofstream os(out_path, std::ios::trunc);
  if (!os) throw IoError("report: cannot open for write " + out_path);
  os << csv;
  log << "report: " << entries.size() << " languages -> " << out_path << "\n";
}

}  // namespace pipeline
}  // namespace salsa
