#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "helpers.hpp"
#include "posewarp/checkpoint.hpp"
#include "posewarp/data.hpp"
#include "posewarp/image_io.hpp"
#include "posewarp/metrics.hpp"

using namespace posewarp;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string output;
};

// Runs the CLI with stdout and stderr captured together.
Run cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "cli_output.txt";
  const std::string cmd = std::string("\"") + POSEWARP_CLI + "\" " + args + " > \"" + out.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, testutil::read_file(out)};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

std::string line_with(const std::string& text, const std::string& prefix) {
  const auto pos = text.find(prefix);
  if (pos == std::string::npos) return {};
  return text.substr(pos, text.find('\n', pos) - pos);
}

// A tiny dataset, PSI checkpoint and 3-iteration training run, built once.
struct Pipeline {
  testutil::TempDir dir{"cli"};
  fs::path data, psi, run;
  std::string pretrain_output;

  Pipeline() {
    data = dir / "data";
    psi = dir / "psi.pgw";
    run = dir / "run";
    REQUIRE(cli("datagen --out " + q(data) + " --n-train 40 --n-eval 6 --size 32 --seed 3", dir.path()).code == 0);
    const Run p = cli("pretrain-psi --data " + q(data) + " --out " + q(psi) + " --epochs 1 --seed 3", dir.path());
    REQUIRE(p.code == 0);
    pretrain_output = p.output;
    std::ofstream(dir / "cfg.json") << R"({"batch": 2, "eval_iterations": []})";
    const Run t = cli("train --data " + q(data) + " --psi " + q(psi) + " --out " + q(run) +
                          " --config " + q(dir / "cfg.json") + " --iterations 3 --seed 3",
                      dir.path());
    REQUIRE_MESSAGE(t.code == 0, t.output);
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

std::vector<nlohmann::json> log_lines(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2") {
    testutil::TempDir dir("cli_usage");
    CHECK(cli("", dir.path()).code == 2);
    CHECK(cli("frobnicate", dir.path()).code == 2);
    CHECK(cli("datagen --out x --bogus 1", dir.path()).code == 2);
    CHECK(cli("datagen --out x --n-train -3", dir.path()).code == 2);
    CHECK(cli("gradcheck --scope nowhere", dir.path()).code == 2);
    CHECK(cli("gradcheck --scope ops --inject-fault nosuchop", dir.path()).code == 2);
    CHECK(cli("train --data x", dir.path()).code == 2);
  }

  TEST_CASE("every command takes --seed and --config") {
    testutil::TempDir dir("cli_help");
    for (const char* cmd : {"datagen", "pretrain-psi", "train", "synth", "eval", "gradcheck"}) {
      CAPTURE(cmd);
      const Run r = cli(std::string(cmd) + " --help", dir.path());
      CHECK(r.code == 0);
      CHECK(contains(r.output, "--seed"));
      CHECK(contains(r.output, "--config"));
    }
  }

  TEST_CASE("datagen") {
    testutil::TempDir dir("cli_datagen");
    const Run a = cli("datagen --out " + q(dir / "a") + " --size 32 --seed 4", dir.path());
    REQUIRE(a.code == 0);
    const DatasetManifest m = load_manifest(dir / "a");
    CHECK(m.train.size() == 2000);
    CHECK(m.eval.size() == 200);
    CHECK(testutil::read_file(dir / "a" / m.train[0].image).rfind("P6\n32 32\n255\n", 0) == 0);
    const Run b = cli("datagen --out " + q(dir / "b") + " --size 32 --seed 4", dir.path());
    const std::string ha = line_with(a.output, "manifest"), hb = line_with(b.output, "manifest");
    CHECK_FALSE(ha.empty());
    CHECK(ha == hb);
    const Run c = cli("datagen --out " + q(dir / "c") + " --size 32 --seed 5 --n-train 10 --n-eval 2", dir.path());
    CHECK(line_with(c.output, "manifest") != ha);

    // Config file values apply; flags override them.
    std::ofstream(dir / "cfg.json") << R"({"n_train": 12, "n_eval": 3, "size": 32})";
    REQUIRE(cli("datagen --config " + q(dir / "cfg.json") + " --out " + q(dir / "d") + " --n-eval 1", dir.path()).code == 0);
    const DatasetManifest d = load_manifest(dir / "d");
    CHECK(d.train.size() == 12);
    CHECK(d.eval.size() == 1);
    std::ofstream(dir / "bad.json") << R"({"n_trian": 12})";
    CHECK(cli("datagen --config " + q(dir / "bad.json") + " --out " + q(dir / "e"), dir.path()).code == 2);
    std::ofstream(dir / "broken.json") << "{not json";
    CHECK(cli("datagen --config " + q(dir / "broken.json") + " --out " + q(dir / "e"), dir.path()).code == 3);
    CHECK(cli("datagen --config " + q(dir / "missing.json") + " --out " + q(dir / "e"), dir.path()).code == 3);
  }

  TEST_CASE("pretrain-psi") {
    Pipeline& p = pipeline();
    CHECK(contains(p.pretrain_output, "eval accuracy"));
    const NetworkParams psi = params_from(load_checkpoint(p.psi));
    CHECK_FALSE(psi.subset(kFeatureNet).empty());
    CHECK(psi.subset(kGenerator).empty());
    for (const auto& [name, t] : psi.tensors) CHECK_FALSE(t.requires_grad());
    const Run again = cli("pretrain-psi --data " + q(p.data) + " --out " + q(p.dir / "psi2.pgw") + " --epochs 1 --seed 3",
                          p.dir.path());
    CHECK(line_with(again.output, "eval accuracy") == line_with(p.pretrain_output, "eval accuracy"));
    CHECK(testutil::read_file(p.psi) == testutil::read_file(p.dir / "psi2.pgw"));
    CHECK(cli("pretrain-psi --data " + q(p.dir / "nowhere") + " --out " + q(p.dir / "x.pgw"), p.dir.path()).code == 3);
  }

  TEST_CASE("train") {
    Pipeline& p = pipeline();
    const auto log = log_lines(p.run / "train_log.jsonl");
    int losses = 0;
    for (const auto& j : log) losses += j.contains("event") ? 0 : 1;
    CHECK(losses == 3);
    const auto cfg = nlohmann::json::parse(testutil::read_file(p.run / "config.json"));
    CHECK(cfg.at("batch") == 2);
    CHECK(cfg.at("iterations") == 3);
    CHECK(cfg.at("seed") == 3);
    CHECK(fs::exists(p.run / "ckpt_final.pgw"));

    const fs::path l1 = p.dir / "l1";
    REQUIRE(cli("train --data " + q(p.data) + " --psi " + q(p.psi) + " --out " + q(l1) +
                    " --config " + q(p.dir / "cfg.json") + " --iterations 2 --ablation-l1 --seed 3",
                p.dir.path())
                .code == 0);
    for (const auto& j : log_lines(l1 / "train_log.jsonl")) {
      if (j.contains("event")) continue;
      CHECK(j.at("patch_style") == 0.0);
      CHECK(j.at("content") == 0.0);
    }
    std::ofstream(p.dir / "unknown.json") << R"({"lambda_q": 1})";
    CHECK(cli("train --data " + q(p.data) + " --psi " + q(p.psi) + " --out " + q(p.dir / "u") + " --config " +
                  q(p.dir / "unknown.json"),
              p.dir.path())
              .code == 2);
    CHECK(cli("train --data " + q(p.data) + " --psi " + q(p.dir / "none.pgw") + " --out " + q(p.dir / "u"), p.dir.path())
              .code == 3);
  }

  TEST_CASE("train resume matches the uninterrupted run") {
    Pipeline& p = pipeline();
    const std::string common = "train --data " + q(p.data) + " --psi " + q(p.psi) + " --seed 3 ";
    std::ofstream(p.dir / "every2.json") << R"({"batch": 2, "checkpoint_every": 2, "eval_iterations": []})";
    const std::string cfg = " --config " + q(p.dir / "every2.json");
    REQUIRE(cli(common + "--iterations 6 --out " + q(p.dir / "full") + cfg, p.dir.path()).code == 0);
    REQUIRE(cli(common + "--iterations 6 --out " + q(p.dir / "part") + cfg, p.dir.path()).code == 0);
    REQUIRE(cli(common + "--iterations 6 --out " + q(p.dir / "part") + cfg + " --resume " +
                    q(p.dir / "part" / "ckpt_000002.pgw"),
                p.dir.path())
                .code == 0);
    auto losses = [](const std::vector<nlohmann::json>& lines) {
      std::vector<std::string> out;
      for (const auto& j : lines)
        if (!j.contains("event")) out.push_back(j.dump());
      return out;
    };
    const auto full = losses(log_lines(p.dir / "full" / "train_log.jsonl"));
    const auto part = losses(log_lines(p.dir / "part" / "train_log.jsonl"));
    CHECK(full.size() == 6);
    CHECK(part == full);
  }

  TEST_CASE("synth") {
    Pipeline& p = pipeline();
    const DatasetManifest m = load_manifest(p.data);
    const fs::path img = p.data / m.train[0].image;
    std::ofstream(p.dir / "pose.json") << skeleton_to_json(m.train[1].skeleton).dump();
    nlohmann::json list = nlohmann::json::array();
    for (int i = 1; i <= 3; ++i) list.push_back(skeleton_to_json(m.train[i].skeleton));
    std::ofstream(p.dir / "poses.json") << list.dump();
    const std::string base = "synth --ckpt " + q(p.run / "ckpt_final.pgw") + " --image " + q(img) + " ";

    REQUIRE(cli(base + "--pose " + q(p.dir / "pose.json") + " --out " + q(p.dir / "one.ppm"), p.dir.path()).code == 0);
    const Rgb8Image one = read_ppm(p.dir / "one.ppm");
    CHECK(one.width == 32);
    CHECK(one.height == 32);
    REQUIRE(cli(base + "--pose " + q(p.dir / "pose.json") + " --out " + q(p.dir / "two.ppm"), p.dir.path()).code == 0);
    CHECK(testutil::read_file(p.dir / "one.ppm") == testutil::read_file(p.dir / "two.ppm"));

    REQUIRE(cli(base + "--pose " + q(p.dir / "poses.json") + " --out " + q(p.dir / "strip.ppm"), p.dir.path()).code == 0);
    const Rgb8Image strip = read_ppm(p.dir / "strip.ppm");
    CHECK(strip.width == 32 * 4);
    CHECK(strip.height == 32);

    std::ofstream(p.dir / "bad_pose.json") << R"([[1, 2], [3]])";
    const Run bad = cli(base + "--pose " + q(p.dir / "bad_pose.json") + " --out " + q(p.dir / "x.ppm"), p.dir.path());
    CHECK(bad.code == 3);
    CHECK(contains(bad.output, "skeleton"));
  }

  TEST_CASE("eval") {
    Pipeline& p = pipeline();
    const Run r = cli("eval --ckpt " + q(p.run / "ckpt_final.pgw") + " --data " + q(p.data) + " --out " +
                          q(p.dir / "metrics.json"),
                      p.dir.path());
    REQUIRE(r.code == 0);
    CHECK(contains(r.output, "copy"));
    const auto j = nlohmann::json::parse(testutil::read_file(p.dir / "metrics.json"));
    const MetricReport m = MetricReport::from_json(j);
    CHECK(m.n_pairs == 6);
    CHECK(m.to_json() == j);
    CHECK(j.contains("copy_ssim_mean"));
    CHECK(cli("eval --ckpt " + q(p.dir / "none.pgw") + " --data " + q(p.data), p.dir.path()).code == 3);
    testutil::TempDir empty("cli_noeval");
    REQUIRE(cli("datagen --out " + q(empty / "d") + " --n-train 4 --n-eval 0 --size 32", empty.path()).code == 0);
    CHECK(cli("eval --ckpt " + q(p.run / "ckpt_final.pgw") + " --data " + q(empty / "d"), empty.path()).code != 0);
  }

  TEST_CASE("gradcheck") {
    testutil::TempDir dir("cli_grad");
    const Run ok = cli("gradcheck --scope ops --configs 2 --seed 1", dir.path());
    CHECK(ok.code == 0);
    CHECK(contains(ok.output, "conv2d"));
    const Run bad = cli("gradcheck --scope ops --configs 2 --seed 1 --inject-fault conv2d", dir.path());
    CHECK(bad.code == 1);
    CHECK(contains(bad.output, "FAIL"));
    CHECK(contains(line_with(bad.output, "  conv2d "), "FAIL"));
    CHECK(contains(bad.output, "failed for ops:conv2d"));
  }
}
