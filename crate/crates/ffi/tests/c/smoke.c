#include <math.h>
#include <stdio.h>

#include "lfseg.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    LfsegStatus s_ = (call);                                                   \
    if (s_ != LFSEG_STATUS_OK) {                                               \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,                  \
              lfseg_last_error());                                             \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  double pos[3] = {0.0, 0.0, 0.0};
  double pts[3 * 4] = {0.0, 0.0, 5.0, 1.0, 1.0, 0.5, 8.0, 1.0, -1.0, -0.5, 4.0, 1.0};
  LfsegCamera *cam = NULL;
  LfsegCloud *cloud = NULL;
  LfsegGrid *grid = NULL;
  CHECK(lfseg_camera_pinhole(60, 60, 32, 24, 48, 64, 12, 16, pos, &cam));
  CHECK(lfseg_cloud_new(pts, 3, &cloud));
  CHECK(lfseg_sparse_depth(cam, cloud, LFSEG_PLANE_FEATURE, &grid));
  if (lfseg_grid_valid_count(grid) != 3) {
    fprintf(stderr, "expected 3 cells\n");
    return 1;
  }

  double logits[2 * 2] = {0.0, 0.0, 0.0, 0.0};
  uint8_t labels[2] = {0, 1};
  double ce = 0.0;
  CHECK(lfseg_cross_entropy(logits, 2, 2, labels, &ce));
  if (fabs(ce - log(2.0)) > 1e-12) {
    fprintf(stderr, "cross entropy %f\n", ce);
    return 1;
  }
  if (lfseg_cross_entropy(NULL, 2, 2, labels, &ce) != LFSEG_STATUS_NULL_POINTER) {
    return 1;
  }

  lfseg_grid_free(grid);
  lfseg_cloud_free(cloud);
  lfseg_camera_free(cam);
  printf("ok %s\n", lfseg_version());
  return 0;
}
