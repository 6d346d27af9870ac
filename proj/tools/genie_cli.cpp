// genie command-line front end. Talks to the library only through genie.h.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "genie/genie.h"

namespace {

struct Failure {
  genie_status status;
};

void check(genie_status s) {
  if (s != GENIE_OK) throw Failure{s};
}

// Owns a string handed out by the library.
struct Text {
  char* p = nullptr;
  ~Text() { genie_string_free(p); }
  char** slot() { return &p; }
  void print(std::FILE* f = stdout) const {
    if (p) std::fputs(p, f);
  }
};

struct ConfigHandle {
  genie_config* p = nullptr;
  ~ConfigHandle() { genie_config_destroy(p); }
};

struct ModelHandle {
  genie_model* p = nullptr;
  ~ModelHandle() { genie_model_destroy(p); }
};

struct ConfigFlags {
  std::string path;
  std::vector<std::string> assignments;
  long long seed = -1;
  long long steps = -1;

  void attach(CLI::App* cmd, bool with_steps) {
    cmd->add_option("--config", path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", assignments, "override one key, as key=value (repeatable)");
    cmd->add_option("--seed", seed, "random seed")->check(CLI::NonNegativeNumber);
    if (with_steps) cmd->add_option("--steps", steps, "training steps")->check(CLI::NonNegativeNumber);
  }

  // Builds and validates the config before anything touches the filesystem.
  void build(ConfigHandle& cfg) const {
    if (path.empty()) {
      check(genie_config_create(&cfg.p));
    } else {
      check(genie_config_load(path.c_str(), &cfg.p));
    }
    for (const auto& a : assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + a + "'");
      check(genie_config_set(cfg.p, a.substr(0, eq).c_str(), a.substr(eq + 1).c_str()));
    }
    if (seed >= 0) check(genie_config_set(cfg.p, "seed", std::to_string(seed).c_str()));
    if (steps >= 0) check(genie_config_set(cfg.p, "steps", std::to_string(steps).c_str()));
    check(genie_config_validate(cfg.p));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"genie: reference-guided latent diffusion editing at desk scale"};
  app.require_subcommand(1);
  app.set_version_flag("--version", genie_version());

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  unsigned long long gc_seed = 0;
  std::string gc_out;
  bool gc_json = false;
  gradcheck->add_option("--seed", gc_seed, "seed for inputs and probes");
  gradcheck->add_option("--out", gc_out, "directory for gradcheck.json");
  gradcheck->add_flag("--json", gc_json, "print JSON instead of the table");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic editing dataset");
  std::string gen_task = "copy-patch", gen_out;
  std::size_t gen_count = 16, gen_size = 32;
  unsigned long long gen_seed = 0;
  bool gen_images = false;
  gen->add_option("--task", gen_task, "copy-patch, recolor or translate");
  gen->add_option("--count", gen_count, "number of items")->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_size, "image side in pixels (multiple of 4)");
  gen->add_option("--seed", gen_seed, "random seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--images", gen_images, "also write PPM/PGM files per item");

  // train
  auto* train = app.add_subcommand("train", "train one model and checkpoint it");
  ConfigFlags train_cfg;
  std::string train_out;
  bool train_debug = false;
  train_cfg.attach(train, true);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_flag("--debug-attention", train_debug, "dump attention summaries after training");

  // eval
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM between two image directories");
  std::string eval_pred, eval_truth, eval_mask, eval_out;
  eval->add_option("--pred", eval_pred, "predicted images")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--truth", eval_truth, "ground-truth images")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--mask", eval_mask, "masks for masked PSNR")->check(CLI::ExistingDirectory);
  eval->add_option("--out", eval_out, "also write the JSON here");

  // sample
  auto* samp = app.add_subcommand("sample", "run the sampler from a checkpoint");
  std::string samp_ckpt, samp_data, samp_out;
  long long samp_seed = -1;
  samp->add_option("--checkpoint", samp_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  samp->add_option("--data", samp_data, "dataset.gtd (default: the config's eval split)")->check(CLI::ExistingFile);
  samp->add_option("--seed", samp_seed, "sampler seed (default: config seed)")->check(CLI::NonNegativeNumber);
  samp->add_option("--out", samp_out, "output directory")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and compare a lattice of configurations");
  ConfigFlags ablate_cfg;
  std::string ablate_lattice = "components", ablate_out;
  std::size_t ablate_threads = 0;
  bool ablate_debug = false;
  ablate_cfg.attach(ablate, true);
  ablate->add_option("--lattice", ablate_lattice, "components or training")
      ->check(CLI::IsMember({"components", "training"}));
  ablate->add_option("--out", ablate_out, "output directory")->required();
  ablate->add_option("--threads", ablate_threads, "parallel rows (default: GENIE_THREADS)");
  ablate->add_flag("--debug-attention", ablate_debug, "dump attention summaries per row");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gradcheck) {
      int passed = 0;
      Text text, json;
      check(genie_gradcheck(gc_seed, gc_out.empty() ? nullptr : gc_out.c_str(), &passed, text.slot(), json.slot()));
      (gc_json ? json : text).print();
      return passed ? 0 : 1;
    }
    if (*gen) {
      check(genie_generate_data(gen_task.c_str(), gen_count, gen_size, gen_seed, gen_out.c_str(), gen_images));
      std::printf("wrote %zu %s items to %s\n", gen_count, gen_task.c_str(), gen_out.c_str());
      return 0;
    }
    if (*train) {
      ConfigHandle cfg;
      train_cfg.build(cfg);
      Text summary;
      check(genie_train(cfg.p, train_out.c_str(), train_debug, summary.slot()));
      summary.print();
      return 0;
    }
    if (*eval) {
      Text json;
      check(genie_eval_dirs(eval_pred.c_str(), eval_truth.c_str(), eval_mask.empty() ? nullptr : eval_mask.c_str(),
                            eval_out.empty() ? nullptr : eval_out.c_str(), json.slot()));
      json.print();
      return 0;
    }
    if (*samp) {
      ModelHandle model;
      check(genie_model_load(samp_ckpt.c_str(), &model.p));
      uint64_t seed = 0;
      if (samp_seed >= 0) {
        seed = static_cast<uint64_t>(samp_seed);
      } else {
        check(genie_model_seed(model.p, &seed));
      }
      Text json;
      check(genie_sample(model.p, samp_data.empty() ? nullptr : samp_data.c_str(), seed, samp_out.c_str(),
                         json.slot()));
      json.print();
      return 0;
    }
    if (*ablate) {
      ConfigHandle cfg;
      ablate_cfg.build(cfg);
      Text text, json;
      check(genie_ablate(cfg.p, ablate_lattice.c_str(), ablate_out.c_str(), ablate_threads, ablate_debug, text.slot(),
                         json.slot()));
      text.print();
      return 0;
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error (%s): %s\n", genie_status_string(f.status), genie_last_error());
    return 2;
  } catch (const CLI::Error& e) {
    return app.exit(e);
  }
  return 0;
}
