#include "genie/genie.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "genie/config.hpp"
#include "genie/experiment.hpp"
#include "genie/gradcheck.hpp"
#include "genie/metrics.hpp"
#include "genie/serialize.hpp"
#include "genie/synthetic.hpp"

struct genie_config {
  genie::ModelConfig value;
};

struct genie_model {
  std::unique_ptr<genie::GenieModel> value;
};

namespace {

thread_local std::string t_last_error;

genie_status fail(genie_status s, const std::string& what) {
  t_last_error = what;
  return s;
}

template <typename F>
genie_status guarded(F&& body) {
  try {
    t_last_error.clear();
    body();
    return GENIE_OK;
  } catch (const genie::Error& e) {
    return fail(static_cast<genie_status>(e.code()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(GENIE_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(GENIE_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(GENIE_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(GENIE_ERR_INTERNAL, "unknown failure");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void hand_out(char** slot, const std::string& s) {
  if (slot) *slot = dup_string(s);
}

void require(const void* p, const char* what) {
  if (!p) genie::throw_invalid(std::string(what) + " must not be null");
}

}  // namespace

extern "C" {

const char* genie_version(void) { return "0.1.0"; }

const char* genie_status_string(genie_status status) {
  switch (status) {
    case GENIE_OK: return "ok";
    case GENIE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case GENIE_ERR_SHAPE: return "shape mismatch";
    case GENIE_ERR_CONFIG: return "configuration error";
    case GENIE_ERR_IO: return "i/o error";
    case GENIE_ERR_NUMERIC: return "numeric error";
    case GENIE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* genie_last_error(void) { return t_last_error.c_str(); }

void genie_string_free(char* text) { std::free(text); }

genie_status genie_config_create(genie_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new genie_config{};
  });
}

genie_status genie_config_load(const char* path, genie_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new genie_config{genie::ModelConfig::load(path)};
  });
}

genie_status genie_config_set(genie_config* config, const char* key, const char* value) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(value, "value");
    config->value.set(key, value);
  });
}

genie_status genie_config_validate(const genie_config* config) {
  return guarded([&] {
    require(config, "config");
    config->value.validate();
  });
}

genie_status genie_config_to_text(const genie_config* config, char** text) {
  return guarded([&] {
    require(config, "config");
    require(text, "text");
    hand_out(text, config->value.to_text());
  });
}

void genie_config_destroy(genie_config* config) { delete config; }

genie_status genie_model_create(const genie_config* config, genie_model** out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = new genie_model{std::make_unique<genie::GenieModel>(config->value)};
  });
}

genie_status genie_model_load(const char* checkpoint_dir, genie_model** out) {
  return guarded([&] {
    require(checkpoint_dir, "checkpoint_dir");
    require(out, "out");
    *out = new genie_model{genie::load_checkpoint(checkpoint_dir).model};
  });
}

genie_status genie_model_save(const genie_model* model, const char* checkpoint_dir, uint64_t step) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_dir, "checkpoint_dir");
    genie::save_checkpoint(checkpoint_dir, *model->value, step);
  });
}

genie_status genie_model_param_count(const genie_model* model, size_t* count) {
  return guarded([&] {
    require(model, "model");
    require(count, "count");
    *count = model->value->params().scalar_count();
  });
}

genie_status genie_model_seed(const genie_model* model, uint64_t* seed) {
  return guarded([&] {
    require(model, "model");
    require(seed, "seed");
    *seed = model->value->config().seed;
  });
}

void genie_model_destroy(genie_model* model) { delete model; }

genie_status genie_gradcheck(uint64_t seed, const char* out_dir, int* passed, char** report_text,
                             char** report_json) {
  return guarded([&] {
    require(passed, "passed");
    const genie::GradcheckReport report = genie::run_gradcheck_suite(seed);
    const std::string json = report.to_json();
    if (out_dir) {
      std::filesystem::create_directories(out_dir);
      genie::write_text_atomic(std::filesystem::path(out_dir) / "gradcheck.json", json);
    }
    *passed = report.all_passed() ? 1 : 0;
    hand_out(report_text, report.to_text());
    hand_out(report_json, json);
  });
}

genie_status genie_generate_data(const char* task, size_t count, size_t image_size, uint64_t seed,
                                 const char* out_dir, int write_images) {
  return guarded([&] {
    require(task, "task");
    require(out_dir, "out_dir");
    const genie::SyntheticDataset data = genie::generate_synthetic(task, count, image_size, seed);
    genie::save_dataset(out_dir, data, write_images != 0);
  });
}

genie_status genie_train(const genie_config* config, const char* out_dir, int debug_attention, char** summary_json) {
  return guarded([&] {
    require(config, "config");
    require(out_dir, "out_dir");
    hand_out(summary_json, genie::run_training(config->value, out_dir, debug_attention != 0));
  });
}

genie_status genie_sample(const genie_model* model, const char* dataset_path, uint64_t seed, const char* out_dir,
                          char** report_json) {
  return guarded([&] {
    require(model, "model");
    require(out_dir, "out_dir");
    const genie::SyntheticDataset data = dataset_path ? genie::load_dataset(dataset_path)
                                                      : genie::make_run_data(model->value->config()).eval;
    hand_out(report_json, genie::run_sampling(*model->value, data, seed, out_dir));
  });
}

genie_status genie_eval_dirs(const char* predicted_dir, const char* truth_dir, const char* mask_dir,
                             const char* out_path, char** report_json) {
  return guarded([&] {
    require(predicted_dir, "predicted_dir");
    require(truth_dir, "truth_dir");
    std::optional<std::filesystem::path> masks;
    if (mask_dir) masks = mask_dir;
    const std::string json = genie::evaluate_directories(predicted_dir, truth_dir, masks);
    if (out_path) genie::write_text_atomic(out_path, json);
    hand_out(report_json, json);
  });
}

genie_status genie_ablate(const genie_config* config, const char* lattice, const char* out_dir, size_t threads,
                          int debug_attention, char** report_text, char** report_json) {
  return guarded([&] {
    require(config, "config");
    require(lattice, "lattice");
    const genie::Lattice which = genie::parse_lattice(lattice);
    genie::AblationOptions opts;
    opts.threads = threads;
    if (out_dir) opts.out = out_dir;
    opts.debug_attention = debug_attention != 0;
    const genie::AblationReport report = genie::run_ablation(config->value, which, opts);
    hand_out(report_text, report.to_text());
    hand_out(report_json, report.to_json());
  });
}

genie_status genie_psnr(const double* a, const double* b, size_t count, double max_val, double* out) {
  return guarded([&] {
    require(a, "a");
    require(b, "b");
    require(out, "out");
    if (count == 0) genie::throw_invalid("psnr needs at least one value");
    const genie::Tensor ta = genie::Tensor::from({count}, std::vector<double>(a, a + count));
    const genie::Tensor tb = genie::Tensor::from({count}, std::vector<double>(b, b + count));
    *out = genie::psnr(ta, tb, max_val);
  });
}

genie_status genie_ssim(const double* a, const double* b, size_t channels, size_t height, size_t width, double* out) {
  return guarded([&] {
    require(a, "a");
    require(b, "b");
    require(out, "out");
    const std::size_t n = channels * height * width;
    if (n == 0) genie::throw_invalid("ssim needs a non-empty image");
    const genie::Tensor ta = genie::Tensor::from({channels, height, width}, std::vector<double>(a, a + n));
    const genie::Tensor tb = genie::Tensor::from({channels, height, width}, std::vector<double>(b, b + n));
    *out = genie::ssim(ta, tb);
  });
}

}  // extern "C"
