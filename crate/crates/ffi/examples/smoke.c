/* Single-example extraction through the C API. */
#include <math.h>
#include <stdio.h>

#include "gradleak.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    GlStatus st_ = (call);                                                 \
    if (st_ != GL_STATUS_OK) {                                             \
      fprintf(stderr, "%s failed (%d): %s\n", #call, st_, gl_last_error()); \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(void) {
  GlModel *model = NULL;
  GlGradients *grads = NULL;
  GlExtraction *ex = NULL;
  double x[8] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  double label = 1.0;
  double buf[8];
  GlMetrics m;
  size_t i, j, row;

  CHECK(gl_model_mlp(8, 16, 3, &model));
  CHECK(gl_model_init_random(model, GL_SCHEME_XAVIER_UNIFORM, 0.0, 7));
  CHECK(gl_gradients_compute(model, x, 1, &label, &grads));
  CHECK(gl_extract(model, grads, 0, 1e-12, &ex));
  for (i = 0; i < gl_extraction_count(ex); i++) {
    CHECK(gl_extraction_candidate(ex, i, buf, 8, &row));
    for (j = 0; j < 8; j++) {
      if (fabs(buf[j] - x[j]) > 1e-12) {
        fprintf(stderr, "row %zu differs at %zu\n", row, j);
        return 1;
      }
    }
  }
  CHECK(gl_score(ex, x, 1, 8, 1e-6, &m));
  printf("active=%zu R=%.3f\n", m.active, m.r);
  gl_extraction_free(ex);
  gl_gradients_free(grads);
  gl_model_free(model);
  return m.r == 1.0 ? 0 : 1;
}
