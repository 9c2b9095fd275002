/* C API for the diffdti library: DTI map synthesis from few diffusion-weighted
 * images with a conditional score-based diffusion model, plus the supporting
 * tensor-fitting, phantom, training and evaluation pipeline.
 *
 * All functions are thread-compatible; the last-error message is thread-local.
 */
#ifndef DIFFDTI_H
#define DIFFDTI_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DIFFDTI_API __declspec(dllexport)
#else
#define DIFFDTI_API __attribute__((visibility("default")))
#endif

typedef enum dd_status {
    DD_OK = 0,
    DD_ERR_RUNTIME = 1, /* data, I/O, numeric or evaluation failure */
    DD_ERR_CONFIG = 2   /* usage or configuration error */
} dd_status;

/* Opaque run configuration (flat key=value store with a fixed schema). */
typedef struct dd_config dd_config;

DIFFDTI_API dd_config* dd_config_create(void);
DIFFDTI_API void dd_config_free(dd_config* cfg);

/* Loads key=value lines; unknown keys are rejected. */
DIFFDTI_API dd_status dd_config_load_file(dd_config* cfg, const char* path);
DIFFDTI_API dd_status dd_config_set(dd_config* cfg, const char* key, const char* value);

/* Effective value (defaults included). Returns NULL for unknown keys; the
 * pointer stays valid until the next call on the same thread. */
DIFFDTI_API const char* dd_config_get(const dd_config* cfg, const char* key);

/* Pipeline commands. Artifacts are written under the configured out_dir. */
DIFFDTI_API dd_status dd_run_phantom(const dd_config* cfg);
DIFFDTI_API dd_status dd_run_fit(const dd_config* cfg);
DIFFDTI_API dd_status dd_run_train(const dd_config* cfg);
DIFFDTI_API dd_status dd_run_sample(const dd_config* cfg);
DIFFDTI_API dd_status dd_run_eval(const dd_config* cfg);
DIFFDTI_API dd_status dd_run_ablate(const dd_config* cfg);

/* Dispatch by subcommand name (phantom, fit, train, sample, eval, ablate). */
DIFFDTI_API dd_status dd_run(const char* command, const dd_config* cfg);

/* Message for the most recent failure on this thread; empty string if none. */
DIFFDTI_API const char* dd_last_error(void);

DIFFDTI_API const char* dd_version(void);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* DIFFDTI_H */
