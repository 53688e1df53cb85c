// salsa: desk-scale workbench coupling a frozen encoder-decoder speech
// recognizer to a frozen decoder-only language model through trained
// projection layers, with synchronized decoding across mismatched tokenizers.

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "salsa/pipeline.hpp"

namespace {

salsa::RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets,
                              uint64_t* seed_override) {
  salsa::RunConfig cfg;
  if (!config_path.empty()) cfg = salsa::RunConfig::load(config_path);
  for (const auto& kv : sets) {
    auto eq = kv.find('=');
    salsa::require(eq != std::string::npos, "--set expects key=value, got '" + kv + "'");
    cfg.set_key(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (seed_override) cfg.seed = *seed_override;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"salsa: train and run projection-coupled ASR+LM decoding on synthetic languages"};
  app.require_subcommand(1);

  std::string config_path, out, data_single, models_dir, coupling_dir, which, mode = "salsa", split = "test";
  std::string refs_path, hyps_path, inputs_path, texts_path;
  std::vector<std::string> data_dirs, sets;
  bool multilingual = false, trace = false;
  uint64_t seed_flag = 0;
  bool seed_given = false;
  double wer_threshold = 0.3, ncp_threshold = 0.5;
  int ncp_cap = 50;

  auto add_config_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "RunConfig JSON (flat dotted keys)");
    cmd->add_option("--set", sets, "override a config key, e.g. --set data.n_utts=400")->take_all();
    cmd->add_option("--seed", seed_flag, "override the global seed")->each([&](const std::string&) {
      seed_given = true;
    });
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (train/dev/test JSONL + LM corpus)");
  add_config_flags(gen);
  gen->add_option("--out", out, "output dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "train tokenizer + backbone (asr or lm)");
  add_config_flags(pre);
  pre->add_option("--which", which, "asr | lm")->required();
  pre->add_option("--data", data_dirs, "dataset directory (repeatable to pool languages)")->required();
  pre->add_option("--out", out, "model output directory")->required();

  auto* trn = app.add_subcommand("train", "train the coupling projections on frozen backbones");
  add_config_flags(trn);
  trn->add_option("--data", data_dirs, "dataset directory (repeat with --multilingual)")->required();
  trn->add_flag("--multilingual", multilingual, "pool several languages' data into one set of projections");
  trn->add_option("--models", models_dir, "directory with pretrained backbones")->required();
  trn->add_option("--out", out, "coupling output directory")->required();

  auto* dec = app.add_subcommand("decode", "decode a split (salsa | asr_only | lm_check)");
  add_config_flags(dec);
  dec->add_option("--data", data_single, "dataset directory")->required();
  dec->add_option("--models", models_dir, "directory with pretrained backbones")->required();
  dec->add_option("--coupling", coupling_dir, "trained coupling directory (salsa mode)");
  dec->add_option("--mode", mode, "salsa | asr_only | lm_check");
  dec->add_option("--split", split, "train | dev | test (default test)");
  dec->add_option("--out", out, "hypotheses JSONL path")->required();
  dec->add_flag("--trace", trace, "also write per-utterance trace summaries");

  auto* evl = app.add_subcommand("eval", "score hypotheses against references (WER/CER)");
  evl->add_option("--refs", refs_path, "reference dataset JSONL")->required();
  evl->add_option("--hyps", hyps_path, "hypotheses JSONL")->required();
  evl->add_option("--out", out, "output prefix (.csv and .json are appended)")->required();

  auto* rep = app.add_subcommand("report", "language-selection quadrant CSV from {lang: {wer, ncp_acc}} JSON");
  rep->add_option("--inputs", inputs_path, "JSON of per-language wer/ncp_acc")->required();
  rep->add_option("--wer-threshold", wer_threshold, "below this the ASR is already strong");
  rep->add_option("--ncp-threshold", ncp_threshold, "at or above this the LM is strong");
  rep->add_option("--out", out, "output CSV path")->required();

  auto* ncp = app.add_subcommand("ncp", "next-character-prediction accuracy of a pretrained LM");
  ncp->add_option("--models", models_dir, "directory with the pretrained LM")->required();
  ncp->add_option("--texts", texts_path, "text file, one sentence per line")->required();
  ncp->add_option("--cap", ncp_cap, "number of lines to score (default 50)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      auto cfg = build_config(config_path, sets, seed_given ? &seed_flag : nullptr);
      salsa::pipeline::cmd_gen(cfg, out, std::cout);
    } else if (*pre) {
      auto cfg = build_config(config_path, sets, seed_given ? &seed_flag : nullptr);
      salsa::pipeline::cmd_pretrain(cfg, data_dirs, which, out, std::cout);
    } else if (*trn) {
      auto cfg = build_config(config_path, sets, seed_given ? &seed_flag : nullptr);
      salsa::require(data_dirs.size() == 1 || multilingual,
                     "train: multiple --data directories require --multilingual");
      salsa::pipeline::cmd_train(cfg, data_dirs, models_dir, out, std::cout);
    } else if (*dec) {
      auto cfg = build_config(config_path, sets, seed_given ? &seed_flag : nullptr);
      if (mode == "salsa") salsa::require(!coupling_dir.empty(), "decode: salsa mode requires --coupling");
      salsa::pipeline::cmd_decode(cfg, data_single, models_dir, coupling_dir, mode, split, out, trace, std::cout);
    } else if (*evl) {
      salsa::pipeline::cmd_eval(refs_path, hyps_path, out, std::cout);
    } else if (*rep) {
      salsa::pipeline::cmd_report(inputs_path, wer_threshold, ncp_threshold, out, std::cout);
    } else if (*ncp) {
      salsa::pipeline::ModelDir mdir{models_dir};
      auto tok = salsa::Tokenizer::load(mdir.lm_tok_path());
      auto lm = mdir.load_lm();
      auto lines = salsa::read_lines(texts_path);
      if (int(lines.size()) > ncp_cap) lines.resize(size_t(ncp_cap));
      const double acc = salsa::ncp_acc(lm, tok, lines);
      std::cout << "ncp_acc=" << acc << " lines=" << lines.size() << "\n";
    }
  } catch (const salsa::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
