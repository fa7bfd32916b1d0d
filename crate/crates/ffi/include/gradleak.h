#ifndef GRADLEAK_H
#define GRADLEAK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlScheme {
  GL_SCHEME_GAUSSIAN = 0,
  GL_SCHEME_XAVIER_NORMAL = 1,
  GL_SCHEME_XAVIER_UNIFORM = 2,
} GlScheme;

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_DIMENSION = 2,
  GL_STATUS_INPUT = 3,
  GL_STATUS_STATE = 4,
  GL_STATUS_CONFIG = 5,
  GL_STATUS_FORMAT = 6,
  GL_STATUS_IO = 7,
  GL_STATUS_JSON = 8,
  GL_STATUS_CSV = 9,
  GL_STATUS_UTF8 = 10,
  GL_STATUS_PANIC = 11,
} GlStatus;

/**
 * Opaque extraction handle.
 */
typedef struct GlExtraction GlExtraction;

/**
 * Opaque gradient handle.
 */
typedef struct GlGradients GlGradients;

/**
 * Opaque model handle.
 */
typedef struct GlModel GlModel;

/**
 * Extraction metrics.
 */
typedef struct GlMetrics {
  double a;
  double p;
  double r;
  size_t n;
  size_t b;
  size_t active;
  size_t g0;
  size_t b0;
} GlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library from the same thread.
 */
const char *gl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gl_version(void);

/**
 * `inputs → hidden → ReLU → classes` multiclass model, all weights zero.
 */
enum GlStatus gl_model_mlp(size_t inputs, size_t hidden, size_t classes, struct GlModel **out);

/**
 * Model from its JSON serialization.
 */
enum GlStatus gl_model_from_json(const char *json, struct GlModel **out);

void gl_model_free(struct GlModel *model);

size_t gl_model_input_len(const struct GlModel *model);

size_t gl_model_output_dim(const struct GlModel *model);

/**
 * `sigma` is used by the Gaussian scheme only.
 */
enum GlStatus gl_model_init_random(struct GlModel *model,
                                   enum GlScheme scheme,
                                   double sigma,
                                   uint64_t seed);

/**
 * Trap weights on dense layer `layer` with scale `s`.
 */
enum GlStatus gl_model_init_trap(struct GlModel *model, size_t layer, double s, uint64_t seed);

/**
 * Batch gradient for `batch` row-major examples and their labels.
 */
enum GlStatus gl_gradients_compute(const struct GlModel *model,
                                   const double *x,
                                   size_t batch,
                                   const double *labels,
                                   struct GlGradients **out);

void gl_gradients_free(struct GlGradients *grads);

double gl_gradients_norm(const struct GlGradients *grads);

/**
 * Scales the update to global L2 norm at most `c`.
 */
enum GlStatus gl_gradients_clip(struct GlGradients *grads, double c);

/**
 * Candidates from dense layer `layer` (no input forwarding).
 */
enum GlStatus gl_extract(const struct GlModel *model,
                         const struct GlGradients *grads,
                         size_t layer,
                         double eps_active,
                         struct GlExtraction **out);

void gl_extraction_free(struct GlExtraction *ex);

size_t gl_extraction_count(const struct GlExtraction *ex);

/**
 * Copies candidate `index` into `out` (`len` values) and its row to `row`.
 */
enum GlStatus gl_extraction_candidate(const struct GlExtraction *ex,
                                      size_t index,
                                      double *out,
                                      size_t len,
                                      size_t *row);

/**
 * Scores candidates against `batch` row-major examples of `width` values.
 */
enum GlStatus gl_score(const struct GlExtraction *ex,
                       const double *truth,
                       size_t batch,
                       size_t width,
                       double tol_rel,
                       struct GlMetrics *out);

/**
 * Runs an experiment subcommand (`"active"`, `"sweep_s"`, ...) with a JSON
 * config (may be `"{}"`); outputs go to the config's `out` directory.
 */
enum GlStatus gl_run_experiment(const char *command, const char *config_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADLEAK_H */
