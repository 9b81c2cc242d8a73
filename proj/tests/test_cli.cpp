/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "lmc/lmc.hpp"
#include "support.hpp"

using namespace lmc;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const fs::path &dir, const std::string &args) {
  const fs::path log = dir / "cli_output.txt";
  const std::string cmd = std::string("\"") + LMC_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = ckpt::read_file(log);
  return r;
}

std::string q(const fs::path &p) { return "\"" + p.string() + "\""; }

} // namespace

TEST(Cli, HelpListsAlphaRangeDefaults) {
  const auto dir = test::scratch_dir("cli_help");
  const RunResult r = run(dir, "augment --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("--range-min FLOAT [0.5]"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("--range-max FLOAT [2]"), std::string::npos) << r.output;
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto dir = test::scratch_dir("cli_flag");
  EXPECT_EQ(run(dir, "synth " + q(dir / "out") + " --no-such-flag").code, 2);
  EXPECT_EQ(run(dir, "no-such-command").code, 2);
}

TEST(Cli, FullPipelineAndByteIdenticalRerun) {
  const auto dir = test::scratch_dir("cli_pipeline");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 12 --patch-size 32 --seed 1").code, 0);
  ASSERT_EQ(run(dir, "augment " + q(dir / "a") + " " + q(dir / "b") + " --alpha-h 1.6 --alpha-e 0.7 --patch-size 32").code,
            0);
  for (const char *tag : {"1", "2"}) {
    const fs::path ck = dir / (std::string("ck") + tag + ".bin");
    const RunResult t = run(dir, "train " + q(dir / "a") + " " + q(ck) + " --steps 4 --batch-size 4 --seed 3");
    ASSERT_EQ(t.code, 0) << t.output;
    EXPECT_NE(t.output.find("seed = 3"), std::string::npos);
    ASSERT_EQ(run(dir, "embed " + q(ck) + " " + q(dir / "a") + " " + q(dir / (std::string("ea") + tag + ".csv"))).code, 0);
    ASSERT_EQ(run(dir, "embed " + q(ck) + " " + q(dir / "b") + " " +
                           q(dir / (std::string("eb") + tag + ".csv")) + " --batch-id B")
                  .code,
              0);
  }
  EXPECT_EQ(ckpt::read_file(dir / "ck1.bin"), ckpt::read_file(dir / "ck2.bin"));
  EXPECT_EQ(ckpt::read_file(dir / "ck1.bin.loss.csv"), ckpt::read_file(dir / "ck2.bin.loss.csv"));
  EXPECT_EQ(ckpt::read_file(dir / "ea1.csv"), ckpt::read_file(dir / "ea2.csv"));
  EXPECT_EQ(csv::read(dir / "ck1.bin.loss.csv").rows.size(), 4u);

  ASSERT_EQ(run(dir, "eval-separation " + q(dir / "ea1.csv") + " " + q(dir / "eb1.csv") + " -o " + q(dir / "sep.csv"))
                .code,
            0);
  EXPECT_NE(ckpt::read_file(dir / "sep.csv").find("overall,"), std::string::npos);
  const RunResult p = run(dir, "probe " + q(dir / "ea1.csv") + " " + q(dir / "eb1.csv") + " " + q(dir / "probe.csv"));
  EXPECT_EQ(p.code, 0) << p.output;
  EXPECT_TRUE(fs::exists(dir / "probe.csv"));
}

TEST(Cli, UnknownConfigKeyNamed) {
  const auto dir = test::scratch_dir("cli_key");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 8 --patch-size 32").code, 0);
  const RunResult r = run(dir, "train " + q(dir / "a") + " " + q(dir / "c.bin") + " --set bogus_key=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("bogus_key"), std::string::npos) << r.output;
  ckpt::write_file(dir / "bad.cfg", "batch_size = 4\nlearning_rat = 0.1\n");
  const RunResult f = run(dir, "train " + q(dir / "a") + " " + q(dir / "c.bin") + " --config " + q(dir / "bad.cfg"));
  EXPECT_EQ(f.code, 2);
  EXPECT_NE(f.output.find("learning_rat"), std::string::npos) << f.output;
}

TEST(Cli, WrongPatchSizeIsDataError) {
  const auto dir = test::scratch_dir("cli_size");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 8 --patch-size 32").code, 0);
  ASSERT_EQ(run(dir, "synth " + q(dir / "big") + " --n 2 --patch-size 48").code, 0);
  ASSERT_EQ(run(dir, "train " + q(dir / "a") + " " + q(dir / "c.bin") + " --steps 1 --batch-size 4").code, 0);
  const RunResult r = run(dir, "embed " + q(dir / "c.bin") + " " + q(dir / "big") + " " + q(dir / "e.csv"));
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST(Cli, DivergentTrainingExitsNonFinite) {
  const auto dir = test::scratch_dir("cli_nonfinite");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 8 --patch-size 32").code, 0);
  const RunResult r =
      run(dir, "train " + q(dir / "a") + " " + q(dir / "c.bin") + " --steps 5 --batch-size 4 --set base_lr=1e300");
  EXPECT_EQ(r.code, 4) << r.output;
}

TEST(Cli, IdentityAugmentationPreservesPixels) {
  const auto dir = test::scratch_dir("cli_identity");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 4 --patch-size 32 --seed 5").code, 0);
  ASSERT_EQ(run(dir, "augment " + q(dir / "a") + " " + q(dir / "b") + " --alpha-h 1 --alpha-e 1 --patch-size 32").code, 0);
  const PatchDataset a = load_patch_dataset(dir / "a", 32);
  const PatchDataset b = load_patch_dataset(dir / "b", 32);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.items[i].id, b.items[i].id);
    EXPECT_LE(mean_abs_error(a.items[i].patch, b.items[i].patch), 2.0) << a.items[i].id;
  }
}

TEST(Cli, RandomAugmentationReproducible) {
  const auto dir = test::scratch_dir("cli_random");
  ASSERT_EQ(run(dir, "synth " + q(dir / "a") + " --n 6 --patch-size 32").code, 0);
  for (const char *out : {"r1", "r2"})
    ASSERT_EQ(run(dir, "augment " + q(dir / "a") + " " + q(dir / out) + " --random --pair --seed 7 --patch-size 32").code,
              0);
  const std::string m1 = ckpt::read_file(dir / "r1" / "manifest.csv");
  EXPECT_EQ(m1, ckpt::read_file(dir / "r2" / "manifest.csv"));
  const csv::Table t = csv::read(dir / "r1" / "manifest.csv");
  ASSERT_EQ(t.rows.size(), 6u);
  for (const auto &row : t.rows)
    for (std::size_t c = 1; c < row.size(); ++c) {
      const double alpha = csv::parse_double(row[c], "alpha");
      EXPECT_GE(alpha, 0.5);
      EXPECT_LE(alpha, 2.0);
    }
}
