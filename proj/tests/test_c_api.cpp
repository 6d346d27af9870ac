#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "genie/genie.h"

namespace fs = std::filesystem;

namespace {

struct Text {
  char* p = nullptr;
  ~Text() { genie_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("genie_capi_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

genie_config* tiny_config() {
  genie_config* c = nullptr;
  EXPECT_EQ(genie_config_create(&c), GENIE_OK);
  for (auto [k, v] : std::vector<std::pair<const char*, const char*>>{{"latent_channels", "2"},
                                                                      {"base_width", "8"},
                                                                      {"head_count", "2"},
                                                                      {"adapter_tokens", "2"},
                                                                      {"timesteps", "4"},
                                                                      {"image_size", "16"},
                                                                      {"batch_size", "2"},
                                                                      {"steps", "2"},
                                                                      {"train_samples", "4"},
                                                                      {"eval_samples", "2"},
                                                                      {"seed", "3"}})
    EXPECT_EQ(genie_config_set(c, k, v), GENIE_OK) << k;
  return c;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(GENIE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::string text;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) text += buf;
  const int status = ::pclose(pipe);
  if (output) *output = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(CApi, StatusStringsAndVersion) {
  EXPECT_STREQ(genie_status_string(GENIE_OK), "ok");
  EXPECT_NE(std::string(genie_status_string(GENIE_ERR_SHAPE)).find("shape"), std::string::npos);
  EXPECT_NE(std::string(genie_version()), "");
}

TEST(CApi, NullArgumentsAreRejected) {
  EXPECT_EQ(genie_config_create(nullptr), GENIE_ERR_INVALID_ARGUMENT);
  EXPECT_NE(std::string(genie_last_error()), "");
  genie_model* m = nullptr;
  EXPECT_EQ(genie_model_create(nullptr, &m), GENIE_ERR_INVALID_ARGUMENT);
  EXPECT_EQ(m, nullptr);
  double out = 0;
  EXPECT_EQ(genie_psnr(nullptr, nullptr, 4, 1.0, &out), GENIE_ERR_INVALID_ARGUMENT);
  genie_config_destroy(nullptr);
  genie_model_destroy(nullptr);
  genie_string_free(nullptr);
}

TEST(CApi, ConfigErrors) {
  genie_config* c = nullptr;
  ASSERT_EQ(genie_config_create(&c), GENIE_OK);
  EXPECT_EQ(genie_config_set(c, "no_such_key", "1"), GENIE_ERR_CONFIG);
  EXPECT_NE(std::string(genie_last_error()).find("no_such_key"), std::string::npos);
  EXPECT_EQ(genie_config_set(c, "seed", "x"), GENIE_ERR_CONFIG);
  EXPECT_EQ(genie_config_set(c, "head_count", "3"), GENIE_OK);
  EXPECT_EQ(genie_config_validate(c), GENIE_ERR_CONFIG);
  EXPECT_EQ(genie_config_set(c, "head_count", "4"), GENIE_OK);
  EXPECT_EQ(genie_config_validate(c), GENIE_OK);
  Text text;
  ASSERT_EQ(genie_config_to_text(c, &text.p), GENIE_OK);
  EXPECT_NE(text.str().find("head_count = 4"), std::string::npos);
  genie_config* missing = nullptr;
  EXPECT_EQ(genie_config_load("/nonexistent/genie.cfg", &missing), GENIE_ERR_IO);
  genie_config_destroy(c);
}

TEST(CApi, ModelSaveLoad) {
  const fs::path dir = scratch("model");
  genie_config* c = tiny_config();
  genie_model* m = nullptr;
  ASSERT_EQ(genie_model_create(c, &m), GENIE_OK);
  size_t count = 0;
  ASSERT_EQ(genie_model_param_count(m, &count), GENIE_OK);
  EXPECT_GT(count, 0u);
  ASSERT_EQ(genie_model_save(m, (dir / "ck").c_str(), 5), GENIE_OK);
  genie_model* back = nullptr;
  ASSERT_EQ(genie_model_load((dir / "ck").c_str(), &back), GENIE_OK);
  size_t count2 = 0;
  uint64_t seed = 0;
  genie_model_param_count(back, &count2);
  genie_model_seed(back, &seed);
  EXPECT_EQ(count, count2);
  EXPECT_EQ(seed, 3u);
  genie_model* none = nullptr;
  EXPECT_EQ(genie_model_load((dir / "nothing").c_str(), &none), GENIE_ERR_IO);
  genie_model_destroy(back);
  genie_model_destroy(m);
  genie_config_destroy(c);
  fs::remove_all(dir);
}

TEST(CApi, TrainSampleEvaluate) {
  const fs::path dir = scratch("train");
  genie_config* c = tiny_config();
  Text summary;
  ASSERT_EQ(genie_train(c, (dir / "run").c_str(), 0, &summary.p), GENIE_OK) << genie_last_error();
  EXPECT_NE(summary.str().find("masked_psnr"), std::string::npos);
  genie_model* m = nullptr;
  ASSERT_EQ(genie_model_load((dir / "run" / "checkpoint").c_str(), &m), GENIE_OK);
  Text sample;
  ASSERT_EQ(genie_sample(m, nullptr, 1, (dir / "s").c_str(), &sample.p), GENIE_OK) << genie_last_error();
  Text eval;
  ASSERT_EQ(genie_eval_dirs((dir / "s" / "samples").c_str(), (dir / "s" / "truth").c_str(),
                            (dir / "s" / "masks").c_str(), (dir / "eval.json").c_str(), &eval.p),
            GENIE_OK)
      << genie_last_error();
  EXPECT_TRUE(fs::exists(dir / "eval.json"));
  genie_model_destroy(m);
  genie_config_destroy(c);
  fs::remove_all(dir);
}

TEST(CApi, Metrics) {
  std::vector<double> a(3 * 16 * 16), b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = (i % 7) / 10.0;
    b[i] = a[i] + 0.1;
  }
  double p = 0;
  ASSERT_EQ(genie_psnr(a.data(), b.data(), a.size(), 1.0, &p), GENIE_OK);
  EXPECT_NEAR(p, 20.0, 1e-9);
  ASSERT_EQ(genie_psnr(a.data(), b.data(), a.size(), 255.0, &p), GENIE_OK);
  EXPECT_NEAR(p, 20 * std::log10(255.0 / 0.1), 1e-9);
  double s = 0;
  ASSERT_EQ(genie_ssim(a.data(), a.data(), 3, 16, 16, &s), GENIE_OK);
  EXPECT_NEAR(s, 1.0, 1e-9);
  EXPECT_EQ(genie_ssim(a.data(), b.data(), 3, 4, 4, &s), GENIE_ERR_INVALID_ARGUMENT);
}

TEST(Cli, HelpAndUsageErrors) {
  std::string out;
  EXPECT_EQ(run_cli("--help", &out), 0);
  for (const char* cmd : {"gradcheck", "gen-data", "train", "eval", "sample", "ablate"})
    EXPECT_NE(out.find(cmd), std::string::npos) << cmd;
  EXPECT_NE(run_cli("train", &out), 0);
  EXPECT_NE(run_cli("frobnicate", &out), 0);
}

TEST(Cli, GenerateTrainAblate) {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "tiny.cfg") << "latent_channels = 2\nbase_width = 8\nhead_count = 2\nadapter_tokens = 2\n"
                                     "timesteps = 4\nimage_size = 16\nbatch_size = 2\ntrain_samples = 4\n"
                                     "eval_samples = 2\n";
  std::string out;
  ASSERT_EQ(run_cli("gen-data --task translate --count 3 --size 16 --out " + (dir / "data").string() + " --images",
                    &out),
            0)
      << out;
  EXPECT_TRUE(fs::exists(dir / "data" / "2_gt.ppm"));
  ASSERT_EQ(run_cli("train --config " + (dir / "tiny.cfg").string() + " --steps 2 --seed 4 --out " +
                        (dir / "run").string(),
                    &out),
            0)
      << out;
  EXPECT_TRUE(fs::exists(dir / "run" / "summary.json"));
  ASSERT_EQ(run_cli("sample --checkpoint " + (dir / "run" / "checkpoint").string() + " --data " +
                        (dir / "data" / "dataset.gtd").string() + " --out " + (dir / "s").string(),
                    &out),
            0)
      << out;
  ASSERT_EQ(run_cli("ablate --config " + (dir / "tiny.cfg").string() + " --steps 1 --lattice components --out " +
                        (dir / "abl").string(),
                    &out),
            0)
      << out;
  EXPECT_NE(out.find("B+S+F+A"), std::string::npos) << out;
  EXPECT_NE(run_cli("train --config " + (dir / "tiny.cfg").string() + " --set colour=red --out " +
                        (dir / "bad").string(),
                    &out),
            0);
  fs::remove_all(dir);
}
