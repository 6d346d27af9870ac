#ifndef GENIE_GENIE_H
#define GENIE_GENIE_H

/* C interface to the genie library. All functions return a genie_status;
 * on failure genie_last_error() describes the problem (per thread, valid
 * until the next call on that thread). Strings handed out through char**
 * are heap allocated and must be released with genie_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(GENIE_BUILDING_LIBRARY)
#define GENIE_API __declspec(dllexport)
#else
#define GENIE_API __declspec(dllimport)
#endif
#else
#define GENIE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum genie_status {
  GENIE_OK = 0,
  GENIE_ERR_INVALID_ARGUMENT = 1,
  GENIE_ERR_SHAPE = 2,
  GENIE_ERR_CONFIG = 3,
  GENIE_ERR_IO = 4,
  GENIE_ERR_NUMERIC = 5,
  GENIE_ERR_INTERNAL = 6
} genie_status;

typedef struct genie_config genie_config;
typedef struct genie_model genie_model;

GENIE_API const char* genie_version(void);
GENIE_API const char* genie_status_string(genie_status status);
GENIE_API const char* genie_last_error(void);
GENIE_API void genie_string_free(char* text);

/* Configuration: flat "key = value" settings. */
GENIE_API genie_status genie_config_create(genie_config** out);
GENIE_API genie_status genie_config_load(const char* path, genie_config** out);
GENIE_API genie_status genie_config_set(genie_config* config, const char* key, const char* value);
GENIE_API genie_status genie_config_validate(const genie_config* config);
GENIE_API genie_status genie_config_to_text(const genie_config* config, char** text);
GENIE_API void genie_config_destroy(genie_config* config);

/* Models. */
GENIE_API genie_status genie_model_create(const genie_config* config, genie_model** out);
/* Reads <dir>/manifest.json and <dir>/params.gtd. */
GENIE_API genie_status genie_model_load(const char* checkpoint_dir, genie_model** out);
GENIE_API genie_status genie_model_save(const genie_model* model, const char* checkpoint_dir, uint64_t step);
GENIE_API genie_status genie_model_param_count(const genie_model* model, size_t* count);
GENIE_API genie_status genie_model_seed(const genie_model* model, uint64_t* seed);
GENIE_API void genie_model_destroy(genie_model* model);

/* Commands. Each writes its artefacts under out_dir and returns a JSON
 * (or, for gradcheck and ablate, also a text) report. */

/* passed is set to 1 when every check is within tolerance. out_dir may be
 * NULL; otherwise gradcheck.json is written there. */
GENIE_API genie_status genie_gradcheck(uint64_t seed, const char* out_dir, int* passed, char** report_text,
                                       char** report_json);

GENIE_API genie_status genie_generate_data(const char* task, size_t count, size_t image_size, uint64_t seed,
                                           const char* out_dir, int write_images);

GENIE_API genie_status genie_train(const genie_config* config, const char* out_dir, int debug_attention,
                                   char** summary_json);

/* dataset_path may be NULL: the eval split of the model's config is used. */
GENIE_API genie_status genie_sample(const genie_model* model, const char* dataset_path, uint64_t seed,
                                    const char* out_dir, char** report_json);

/* mask_dir may be NULL. out_path may be NULL; otherwise the JSON is also written there. */
GENIE_API genie_status genie_eval_dirs(const char* predicted_dir, const char* truth_dir, const char* mask_dir,
                                       const char* out_path, char** report_json);

/* lattice: "components" or "training". threads 0 defers to GENIE_THREADS. */
GENIE_API genie_status genie_ablate(const genie_config* config, const char* lattice, const char* out_dir,
                                    size_t threads, int debug_attention, char** report_text, char** report_json);

/* Metrics on raw arrays of values in [0, max_val]. Images are laid out
 * [channels, height, width]. */
GENIE_API genie_status genie_psnr(const double* a, const double* b, size_t count, double max_val, double* out);
GENIE_API genie_status genie_ssim(const double* a, const double* b, size_t channels, size_t height, size_t width,
                                  double* out);

#ifdef __cplusplus
}
#endif

#endif
