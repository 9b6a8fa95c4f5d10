#ifndef FLORA_H
#define FLORA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FloraStatus {
  FLORA_STATUS_OK = 0,
  FLORA_STATUS_NULL_POINTER = 1,
  FLORA_STATUS_INVALID_UTF8 = 2,
  FLORA_STATUS_INVALID_ARGUMENT = 3,
  FLORA_STATUS_BACKEND = 4,
  FLORA_STATUS_IO = 5,
  FLORA_STATUS_NO_ANSWER = 6,
  FLORA_STATUS_PANIC = 7,
} FloraStatus;

typedef enum FloraSigma {
  FLORA_SIGMA_LINEAR = 0,
  FLORA_SIGMA_SQUARED = 1,
  FLORA_SIGMA_CUBIC = 2,
  FLORA_SIGMA_EXPONENTIAL = 3,
} FloraSigma;

typedef enum FloraField {
  FLORA_FIELD_TYPE = 0,
  FLORA_FIELD_LOCATION = 1,
  FLORA_FIELD_VISUAL = 2,
  FLORA_FIELD_RELATION = 3,
} FloraField;

/**
 * Spatial term dictionary.
 */
typedef struct FloraDict FloraDict;

/**
 * Engine plus the backends named by its config.
 */
typedef struct FloraEngine FloraEngine;

/**
 * Factor values for one candidate. Pass 1.0 for a factor that does not apply.
 */
typedef struct FloraFactors {
  uint32_t candidate_id;
  double p_type;
  double p_location;
  double p_visual;
  double p_relation;
} FloraFactors;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last non-OK status on this thread, or NULL. Valid until the
 * next flora call on the same thread; do not free.
 */
const char *flora_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void flora_string_free(char *s);

/**
 * The built-in dictionary of canonical spatial terms and synonyms.
 */
struct FloraDict *flora_dict_default(void);

/**
 * # Safety
 * `path` must be a valid C string and `out` writable.
 */
enum FloraStatus flora_dict_load(const char *path, struct FloraDict **out);

/**
 * # Safety
 * `dict` must come from this library and not have been freed.
 */
void flora_dict_free(struct FloraDict *dict);

/**
 * Parses four raw LLM responses into JSON
 * `{"type", "location", "visual", "relation"}` with null for absent fields.
 * `dict` may be NULL for the built-in dictionary; `word_cap` 0 means the default.
 *
 * # Safety
 * String arguments must be valid C strings, `dict` NULL or live, `out_json` writable.
 */
enum FloraStatus flora_parse(const struct FloraDict *dict,
                             const char *type_response,
                             const char *location_response,
                             const char *visual_response,
                             const char *relation_response,
                             size_t word_cap,
                             char **out_json);

/**
 * # Safety
 * `out` must be writable.
 */
enum FloraStatus flora_sigma(double v, enum FloraSigma kind, double *out);

/**
 * Location relevance of `bbox` (x_min, y_min, x_max, y_max, normalized) for
 * space-separated canonical `terms`. `dict` may be NULL.
 *
 * # Safety
 * `bbox` must point to four doubles, `terms` be a valid C string, `out` writable.
 */
enum FloraStatus flora_location_relevance(const struct FloraDict *dict,
                                          const char *terms,
                                          const double *bbox,
                                          enum FloraSigma kind,
                                          double epsilon,
                                          double *out);

/**
 * # Safety
 * `a` and `b` must each point to four doubles; `out` writable.
 */
enum FloraStatus flora_iou(const double *a, const double *b, double *out);

/**
 * Ranks `n` candidates. Writes candidate ids best-first to `out_ids` and the
 * matching log scores to `out_log_scores` (may be NULL); both hold `n` entries.
 *
 * # Safety
 * `factors` must point to `n` structs and `out_ids` to room for `n` ids.
 */
enum FloraStatus flora_fuse(const struct FloraFactors *factors,
                            size_t n,
                            double epsilon,
                            uint32_t *out_ids,
                            double *out_log_scores);

/**
 * The fixed system prompt. Free with [`flora_string_free`].
 */
char *flora_prompt_system(void);

/**
 * # Safety
 * `phrase` must be a valid C string and `out` writable.
 */
enum FloraStatus flora_prompt_instance(enum FloraField field, const char *phrase, char **out);

/**
 * Builds an engine from a config file, or from `$FLORA_CONFIG` when `config_path` is NULL.
 *
 * # Safety
 * `config_path` must be NULL or a valid C string; `out` writable.
 */
enum FloraStatus flora_engine_new(const char *config_path, struct FloraEngine **out);

/**
 * # Safety
 * `engine` must come from [`flora_engine_new`] and not have been freed.
 */
void flora_engine_free(struct FloraEngine *engine);

/**
 * Runs one query given as JSON
 * `{"image": {"uri", "width_px", "height_px"}, "phrase", "candidates"?}` and
 * writes the ranked answer as JSON. Returns `NoAnswer`, still writing the
 * JSON, when nothing was detected.
 *
 * # Safety
 * `engine` must be live, `query_json` a valid C string, `out_json` writable.
 */
enum FloraStatus flora_engine_infer(const struct FloraEngine *engine,
                                    const char *query_json,
                                    char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLORA_H */
