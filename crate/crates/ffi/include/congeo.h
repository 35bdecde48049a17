#ifndef CONGEO_H
#define CONGEO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CongeoStatus {
  CONGEO_STATUS_OK = 0,
  CONGEO_STATUS_NULL_POINTER = 1,
  CONGEO_STATUS_INVALID_ARGUMENT = 2,
  CONGEO_STATUS_CONFIG = 3,
  CONGEO_STATUS_IO = 4,
  CONGEO_STATUS_DATA = 5,
  CONGEO_STATUS_CHECKPOINT = 6,
  CONGEO_STATUS_RUNTIME = 7,
  CONGEO_STATUS_PANIC = 8,
} CongeoStatus;

/**
 * A parsed, validated experiment configuration.
 */
typedef struct CongeoConfig CongeoConfig;

/**
 * Encoder weights plus the training state they came from.
 */
typedef struct CongeoModel CongeoModel;

/**
 * Retrieval metrics for each evaluation setting.
 */
typedef struct CongeoReport CongeoReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failing call on this thread, or NULL.
 */
const char *congeo_last_error(void);

/**
 * Static description of a status code; unknown codes get "unknown status".
 */
const char *congeo_status_str(int status);

const char *congeo_version(void);

/**
 * Loads a TOML or JSON config file (chosen by extension).
 */
enum CongeoStatus congeo_config_load(const char *path, struct CongeoConfig **out);

/**
 * Parses config text; `json` selects JSON over TOML.
 */
enum CongeoStatus congeo_config_parse(const char *text, bool json, struct CongeoConfig **out);

enum CongeoStatus congeo_config_set_seed(struct CongeoConfig *config, uint64_t seed);

enum CongeoStatus congeo_config_set_epochs(struct CongeoConfig *config, size_t epochs);

void congeo_config_free(struct CongeoConfig *config);

/**
 * Freshly initialised, untrained model for `config`.
 */
enum CongeoStatus congeo_model_init(const struct CongeoConfig *config, struct CongeoModel **out);

/**
 * Trains on the config's dataset with its training settings.
 */
enum CongeoStatus congeo_model_train(const struct CongeoConfig *config, struct CongeoModel **out);

enum CongeoStatus congeo_model_load(const char *path, struct CongeoModel **out);

enum CongeoStatus congeo_model_save(const struct CongeoModel *model, const char *path);

enum CongeoStatus congeo_model_embed_dim(const struct CongeoModel *model, size_t *out);

/**
 * Embeds one panorama given as row-major interleaved `height x width x channels`
 * floats; writes `embed_dim` values to `out`.
 */
enum CongeoStatus congeo_model_embed_ground(const struct CongeoModel *model,
                                            const float *pixels,
                                            size_t height,
                                            size_t width,
                                            size_t channels,
                                            double *out,
                                            size_t out_len);

/**
 * Embeds one square aerial image; layout as for the ground view.
 */
enum CongeoStatus congeo_model_embed_aerial(const struct CongeoModel *model,
                                            const float *pixels,
                                            size_t size,
                                            size_t channels,
                                            double *out,
                                            size_t out_len);

void congeo_model_free(struct CongeoModel *model);

/**
 * Runs every evaluation setting of `config` against the config's test split.
 */
enum CongeoStatus congeo_evaluate(const struct CongeoModel *model,
                                  const struct CongeoConfig *config,
                                  struct CongeoReport **out);

size_t congeo_report_len(const struct CongeoReport *report);

/**
 * Setting label (e.g. `fov_90`) of entry `index`, or NULL when out of range.
 */
const char *congeo_report_name(const struct CongeoReport *report, size_t index);

/**
 * Recall@k of entry `index`; `k` must be 1, 5 or 10.
 */
enum CongeoStatus congeo_report_recall(const struct CongeoReport *report,
                                       size_t index,
                                       size_t k,
                                       double *out);

enum CongeoStatus congeo_report_average_precision(const struct CongeoReport *report,
                                                  size_t index,
                                                  double *out);

/**
 * The whole report as a JSON object keyed by setting label.
 */
const char *congeo_report_json(const struct CongeoReport *report);

void congeo_report_free(struct CongeoReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONGEO_H */
