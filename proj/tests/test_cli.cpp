#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace {

struct Result {
  int status = -1;
  std::string out;
};

// Runs the CLI with stderr discarded and returns the exit code and stdout.
Result run(const std::string& args) {
  const std::string cmd = std::string(PIALM_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::filesystem::path scratch() {
  const auto dir = std::filesystem::temp_directory_path() / "pialm_test_cli";
  std::filesystem::create_directories(dir);
  return dir;
}

TEST(Cli, CtxwinPrintsTheFraction) {
  const Result r = run("ctxwin --len 1024 --k 64");
  EXPECT_EQ(r.status, 0);
  EXPECT_EQ(r.out.substr(0, r.out.find(' ')), "959/1024");
  EXPECT_EQ(run("ctxwin --len 1024 --k 64 --brute").out, r.out);
}

TEST(Cli, DimsOfPresets) {
  const Result r = run("dims shortformer cached");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("cached,512x1024,"), std::string::npos) << r.out;
  EXPECT_NE(run("dims baevski-auli nonoverlapping").out.find("3072x3072"), std::string::npos);
  EXPECT_EQ(run("dims shortformer sideways").status, 2);
}

TEST(Cli, BadInvocationsFail) {
  EXPECT_EQ(run("recipe table9").status, 2);
  EXPECT_NE(run("").status, 0);
  EXPECT_NE(run("ctxwin --len 0 --k 1").status, 0);
  EXPECT_EQ(run("train /nonexistent.cfg").status, 2);
}

TEST(Cli, TrainEvalGenerateRoundTrip) {
  const auto dir = scratch();
  const auto cfg = dir / "tiny.cfg";
  const auto ckpt = dir / "tiny.ckpt";
  std::filesystem::remove(ckpt);
  {
    std::ofstream f(cfg);
    f << "variant = pia\nuse_cache = true\nn_layers = 1\nd_model = 16\nn_heads = 2\nd_ff = 32\n"
      << "L = 16\nL_cache = 16\nepochs = 1\ntokens_per_batch = 256\nlr = 3e-3\n"
      << "train_file = " PIALM_DATA_DIR "/sotu/train.txt\n"
      << "dev_file = " PIALM_DATA_DIR "/sotu/dev.txt\n"
      << "train_limit_tokens = 3000\ndev_limit_tokens = 500\n"
      << "checkpoint = " << ckpt.string() << '\n';
  }
  const Result t = run("train " + cfg.string());
  ASSERT_EQ(t.status, 0) << t.out;
  ASSERT_TRUE(std::filesystem::exists(ckpt));

  const Result e = run("eval " + ckpt.string() + " cached --limit 400");
  ASSERT_EQ(e.status, 0);
  EXPECT_EQ(e.out.rfind("mode,stride,L,L_cache,tokens", 0), 0u);
  EXPECT_NE(e.out.find("\ncached,16,16,16,399,"), std::string::npos) << e.out;

  EXPECT_EQ(run("eval " + ckpt.string() + " cached --stride 4").status, 2);
  EXPECT_EQ(run("eval " + ckpt.string() + " sliding --stride 4 --limit 200").status, 0);

  const Result g = run("generate " + ckpt.string() + " --n 20 --teacher-forced");
  ASSERT_EQ(g.status, 0);
  EXPECT_NE(g.out.find("\n20,"), std::string::npos) << g.out;
  EXPECT_EQ(run("generate " + ckpt.string() + " --n 10 --prompt The").status, 0);
}

}  // namespace
