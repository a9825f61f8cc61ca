#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sal3sd/checkpoint.hpp"
#include "sal3sd/data.hpp"
#include "sal3sd/imageio.hpp"

using namespace sal3sd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Runs the CLI binary with `args`; returns its exit status.
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + SAL3SD_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::size_t count_files(const fs::path& d) {
  if (!fs::exists(d)) return 0;
  return static_cast<std::size_t>(std::distance(fs::recursive_directory_iterator(d), fs::recursive_directory_iterator{}));
}

Arch small_arch() {
  Arch a;
  a.classes = 8;
  a.base_width = 4;
  a.token_dim = 16;
  a.heads = 2;
  a.blocks = 1;
  a.cls_width = 8;
  return a;
}

}  // namespace

TEST(Cli, UnknownSubcommandExitsTwoAndWritesNothing) {
  const fs::path d = fresh_dir("sal3sd_cli_unknown");
  const fs::path log = fs::temp_directory_path() / "sal3sd_cli_unknown.log";
  EXPECT_EQ(run_cli("frobnicate --out \"" + (d / "out").string() + "\"", log), 2);
  EXPECT_EQ(count_files(d), 0u);
  fs::remove_all(d);
}

TEST(Cli, UnknownOverrideKeyExitsTwo) {
  const fs::path d = fresh_dir("sal3sd_cli_badkey");
  write_synthetic(make_synthetic(SyntheticSpec{}), d / "data");
  EXPECT_EQ(run_cli("train --data \"" + (d / "data").string() + "\" --out \"" + (d / "out").string() + "\" --set no_such_key=1",
                    d / "log.txt"),
            2);
  std::ifstream is(d / "log.txt");
  std::string line;
  std::getline(is, line);
  EXPECT_NE(line.find("no_such_key"), std::string::npos) << line;
  fs::remove_all(d);
}

TEST(Cli, MissingInputIsRuntimeFailure) {
  const fs::path d = fresh_dir("sal3sd_cli_missing");
  save_model(d / "m.ckpt", init_model(small_arch(), 1));
  EXPECT_EQ(run_cli("infer --checkpoint \"" + (d / "m.ckpt").string() + "\" --input \"" + (d / "nope").string() + "\" --out \"" +
                        (d / "out").string() + "\"",
                    d / "log.txt"),
            1);
  fs::remove_all(d);
}

TEST(Cli, InferWritesOneMapPerImage) {
  const fs::path d = fresh_dir("sal3sd_cli_infer");
  write_rgb_png(d / "in" / "one.png", make_synthetic(SyntheticSpec{}).images[0]);
  save_model(d / "m.ckpt", init_model(small_arch(), 2));
  ASSERT_EQ(run_cli("infer --checkpoint \"" + (d / "m.ckpt").string() + "\" --input \"" + (d / "in").string() + "\" --out \"" +
                        (d / "out").string() + "\"",
                    d / "log.txt"),
            0);
  ASSERT_TRUE(fs::exists(d / "out" / "one_sal.png"));
  EXPECT_EQ(count_files(d / "out"), 1u);
  const SaliencyMap s = read_gray(d / "out" / "one_sal.png");
  EXPECT_EQ(s.height(), 64);
  EXPECT_EQ(s.width(), 64);
  fs::remove_all(d);
}

TEST(Cli, TrainPseudoGtEvalSmokeRun) {
  const fs::path d = fresh_dir("sal3sd_cli_smoke");
  write_synthetic(make_synthetic(SyntheticSpec{}), d / "data");
  const std::string sets =
      " --set classes=8 --set base_width=4 --set token_dim=16 --set heads=2 --set blocks=1 --set cls_width=8"
      " --set m_rho=2 --set epochs=2 --set warmup_epochs=1 -q";
  ASSERT_EQ(run_cli("train --data \"" + (d / "data").string() + "\" --out \"" + (d / "run").string() + "\"" + sets, d / "train.log"), 0);
  ASSERT_TRUE(fs::exists(d / "run" / "final.ckpt"));
  ASSERT_EQ(run_cli("pseudo-gt --checkpoint \"" + (d / "run" / "final.ckpt").string() + "\" --input \"" + (d / "data").string() +
                        "\" --out \"" + (d / "pgt").string() + "\"",
                    d / "pgt.log"),
            0);
  ASSERT_TRUE(fs::exists(d / "pgt" / "synth_000_pgt_bin.png"));
  ASSERT_EQ(run_cli("eval --pred \"" + (d / "pgt").string() + "\" --suffix _pgt_bin.png --masks \"" + (d / "data").string() +
                        "\" --out \"" + (d / "eval").string() + "\" -q",
                    d / "eval.log"),
            0);
  std::ifstream js(d / "eval" / "metrics.json");
  const nlohmann::json j = nlohmann::json::parse(js);
  EXPECT_EQ(j["images"].size(), 8u);
  for (const char* k : {"mae", "f_beta", "iou"}) EXPECT_TRUE(std::isfinite(j["mean"][k].get<double>())) << k;
  EXPECT_TRUE(fs::exists(d / "eval" / "pr_curve.csv"));
  fs::remove_all(d);
}
