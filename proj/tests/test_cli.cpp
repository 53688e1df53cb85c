// Exercises the installed binary end to end: exit codes, flag handling, and
// byte-identical reruns. The binary path arrives as argv[1] from ctest.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sys/wait.h>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string g_binary;

int run(const std::string& args) {
  const std::string cmd = g_binary + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempTree {
  fs::path root;
  TempTree() {
    root = fs::temp_directory_path() / ("salsa_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
  std::string operator/(const std::string& p) const { return (root / p).string(); }
};

const std::string kTinyFlags =
    " --set data.n_utts=70 --set lang.feat_dim=8 --set data.noise_sigma=0.4 --set data.lm_ratio=2"
    " --set asr.enc_layers=2 --set asr.dec_layers=2 --set asr.model_dim=32 --set asr.ffn_dim=64"
    " --set lm.n_layers=2 --set lm.model_dim=32 --set lm.n_heads=4 --set lm.ffn_dim=64"
    " --set pretrain.lm_steps=40 --set pretrain.asr_steps=40 --set couple.k=2"
    " --set train.epochs=2 --set train.batch_size=8 --set train.max_steps=6 --set decode.max_tokens=80";

}  // namespace

int main(int argc, char** argv) {
  REQUIRE(argc >= 2);
  g_binary = argv[1];
  // Strip the binary path before Catch sees the args.
  for (int i = 1; i + 1 < argc; ++i) argv[i] = argv[i + 1];
  return Catch::Session().run(argc - 1, argv);
}

TEST_CASE("usage errors exit 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("gen") == 1);             // missing --out
  CHECK(run("--help") == 0);
}

TEST_CASE("gen validates config fields with a named message") {
  TempTree tmp;
  const int code = run("gen --out " + (tmp / "d") + " --set data.frac_train=0.5");
  CHECK(code == 2);  // data error: fractions no longer sum to 1
  // The message names the offending field.
  const std::string cmd = g_binary + " gen --out " + (tmp / "d2") + " --set data.frac_train=0.5 2>" + (tmp / "err");
  std::system(cmd.c_str());
  CHECK(slurp(tmp / "err").find("fractions") != std::string::npos);
}

TEST_CASE("pipeline through the binary with deterministic reruns") {
  TempTree tmp;
  REQUIRE(run("gen --out " + (tmp / "data") + kTinyFlags + " --seed 9") == 0);
  REQUIRE(run("gen --out " + (tmp / "data_b") + kTinyFlags + " --seed 9") == 0);
  CHECK(slurp(tmp / "data/train.jsonl") == slurp(tmp / "data_b/train.jsonl"));

  const std::string cfg = " --config " + (tmp / "data/run_config.json");
  REQUIRE(run("pretrain" + cfg + " --which lm --data " + (tmp / "data") + " --out " + (tmp / "models")) == 0);
  REQUIRE(run("pretrain" + cfg + " --which asr --data " + (tmp / "data") + " --out " + (tmp / "models")) == 0);
  CHECK(run("pretrain" + cfg + " --which nonsense --data " + (tmp / "data") + " --out " + (tmp / "m2")) == 2);
  CHECK(run("pretrain" + cfg + " --which lm --data " + (tmp / "missing") + " --out " + (tmp / "m2")) == 2);

  REQUIRE(run("train" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") + " --out " +
              (tmp / "coupling")) == 0);

  REQUIRE(run("decode" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") + " --coupling " +
              (tmp / "coupling") + " --mode salsa --out " + (tmp / "h.jsonl") + " --trace") == 0);
  REQUIRE(run("decode" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") +
              " --mode asr_only --out " + (tmp / "ha.jsonl")) == 0);
  REQUIRE(run("decode" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") +
              " --mode lm_check --out " + (tmp / "hl.jsonl")) == 0);
  // salsa mode without --coupling is a usage-level data error.
  CHECK(run("decode" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") +
            " --mode salsa --out " + (tmp / "hx.jsonl")) == 2);

  REQUIRE(run("decode" + cfg + " --data " + (tmp / "data") + " --models " + (tmp / "models") + " --coupling " +
              (tmp / "coupling") + " --mode salsa --out " + (tmp / "h2.jsonl")) == 0);
  CHECK(slurp(tmp / "h.jsonl") == slurp(tmp / "h2.jsonl"));

  REQUIRE(run("eval --refs " + (tmp / "data/test.jsonl") + " --hyps " + (tmp / "h.jsonl") + " --out " +
              (tmp / "ev")) == 0);
  CHECK(fs::exists(tmp / "ev.csv"));
  CHECK(fs::exists(tmp / "ev.json"));

  // Mismatched refs/hyps exit 2.
  REQUIRE(run("eval --refs " + (tmp / "data/dev.jsonl") + " --hyps " + (tmp / "h.jsonl") + " --out " +
              (tmp / "ev2")) == 2);

  std::ofstream(tmp / "quad_in.json") << R"({"x": {"wer": 0.5, "ncp_acc": 0.6}})";
  REQUIRE(run("report --inputs " + (tmp / "quad_in.json") + " --out " + (tmp / "quad.csv")) == 0);
  CHECK(slurp(tmp / "quad.csv").find("select") != std::string::npos);
}
