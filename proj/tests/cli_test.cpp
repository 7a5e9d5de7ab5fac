// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "vidplug/experiments.hpp"

using namespace vidplug;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vidplug_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CliRun run(const std::string& args) {
  const fs::path dir = fs::temp_directory_path();
  const fs::path out = dir / "vidplug_cli_stdout", err = dir / "vidplug_cli_stderr";
  const std::string cmd = std::string(VIDPLUG_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Two short epochs on a small window-pattern split.
fs::path tiny_config(const fs::path& dir, const std::string& extra = "") {
  const fs::path p = dir / "tiny.ini";
  std::ofstream(p) << "preset = toy\n[data]\ntrain_size = 16\nval_size = 8\n[training]\nepochs = 2\nmax_steps = 0\n"
                   << "[output]\ndir = " << (dir / "run").string() << "\n" << extra;
  return p;
}

std::vector<nlohmann::json> records(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST(Cli, UnknownKeyExitsTwoNamingIt) {
  const fs::path dir = scratch("typo");
  const CliRun r = run("train " + tiny_config(dir, "[plugins]\nbottlneck = 4\n").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("plugins.bottlneck"), std::string::npos) << r.err;
  EXPECT_EQ(run("params toy --set plugins.bottlneck=4").code, 2);
  EXPECT_EQ(run("params no-such-preset").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST(Cli, TrainWritesArtifactsAndEvalReproducesFinalMetric) {
  const fs::path dir = scratch("train");
  const fs::path cfg = tiny_config(dir);
  const CliRun r = run("train --quiet " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = records(dir / "run" / "metrics.jsonl");
  ASSERT_EQ(recs.size(), 5u);  // epoch 0 val, then train and val per epoch
  EXPECT_EQ(recs[0]["epoch"], 0);
  for (std::size_t i = 1; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i]["epoch"], (i + 1) / 2);
    EXPECT_EQ(recs[i]["split"], i % 2 ? "train" : "val");
    for (const char* k : {"loss", "metric", "value", "trainable_param_count", "wall_seconds"}) {
      EXPECT_TRUE(recs[i].contains(k)) << k;
    }
  }
  const auto summary = nlohmann::json::parse(slurp(dir / "run" / "summary.json"));
  EXPECT_EQ(summary["record"], "summary");
  EXPECT_EQ(summary["final_val"]["value"], recs.back()["value"]);

  const CliRun e = run("eval " + cfg.string());
  ASSERT_EQ(e.code, 0) << e.err;
  const auto ev = nlohmann::json::parse(e.out);
  EXPECT_EQ(ev["value"].get<double>(), summary["final_val"]["value"].get<double>());
  EXPECT_EQ(ev["loss"].get<double>(), summary["final_val"]["loss"].get<double>());
  EXPECT_EQ(run("eval " + cfg.string()).out, e.out);
}

TEST(Cli, SameConfigTwiceGivesByteIdenticalMetrics) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(run("train --quiet " + tiny_config(a).string()).code, 0);
  ASSERT_EQ(run("train --quiet " + tiny_config(b).string()).code, 0);
  EXPECT_EQ(slurp(a / "run" / "metrics.jsonl"), slurp(b / "run" / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "run" / "model.ckpt"), slurp(b / "run" / "model.ckpt"));
}

TEST(Cli, DigestMismatchExitsFour) {
  const fs::path dir = scratch("digest");
  const fs::path cfg = tiny_config(dir);
  ASSERT_EQ(run("train --quiet " + cfg.string()).code, 0);
  const CliRun r = run("eval " + cfg.string() + " --set backbone.seed=99");
  EXPECT_EQ(r.code, 4) << r.err;
}

TEST(Cli, DivergenceExitsThree) {
  const fs::path dir = scratch("diverge");
  const CliRun r = run("train --quiet " + tiny_config(dir).string() + " --set training.lr=1e200");
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, GradcheckPassesAndCatchesCorruptedBackward) {
  const CliRun ok = run("gradcheck toy");
  EXPECT_EQ(ok.code, 0) << ok.out;
  for (const std::string& op : gradcheck_ops()) EXPECT_NE(ok.out.find(op), std::string::npos) << op;
  EXPECT_EQ(run("gradcheck toy").out, ok.out);
  const CliRun bad = run("gradcheck toy --corrupt mhva_forward");
  EXPECT_EQ(bad.code, 1);
  std::istringstream lines(bad.out);
  std::size_t fails = 0;
  for (std::string line; std::getline(lines, line);) {
    if (line.find("FAIL") != std::string::npos) {
      ++fails;
      EXPECT_EQ(line.rfind("mhva_forward", 0), 0u) << line;
    }
  }
  EXPECT_EQ(fails, 1u);
  EXPECT_EQ(run("gradcheck toy --corrupt nothing").code, 2);
}

TEST(Cli, ParamsPrintsBreakdownAndRecord) {
  const CliRun r = run("params swin-b-shape-account");
  ASSERT_EQ(r.code, 0);
  for (const char* s : {"backbone", "mhva", "prefix", "ratio", "MACs"}) EXPECT_NE(r.out.find(s), std::string::npos) << s;
  const CliRun j = run("params swin-b-shape-account --set plugins.caa=true --json");
  const auto rec = nlohmann::json::parse(j.out);
  EXPECT_TRUE(rec["groups"].contains("caa"));
  EXPECT_TRUE(rec["groups"].contains("fusion"));
}

TEST(Cli, AblateFusionHasBothRowsWithEqualBackbones) {
  const fs::path dir = scratch("ablate");
  const fs::path cfg = dir / "a.ini";
  std::ofstream(cfg) << "preset = ablation-a1\n[data]\ntrain_size = 8\nval_size = 4\n[training]\nepochs = 1\n"
                     << "[output]\ndir = " << dir.string() << "\n";
  const CliRun r = run("ablate " + cfg.string() + " --axis fusion");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = records(dir / "ablation-fusion.jsonl");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["variant"], "fusion on");
  EXPECT_EQ(rows[1]["variant"], "fusion off");
  EXPECT_EQ(rows[0]["backbone_param_count"], rows[1]["backbone_param_count"]);
  EXPECT_NE(rows[0]["trainable_param_count"], rows[1]["trainable_param_count"]);
  EXPECT_EQ(run("ablate " + cfg.string() + " --axis sideways").code, 2);
}
