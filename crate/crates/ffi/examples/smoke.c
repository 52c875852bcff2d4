/* Builds a model, lifts one pose and scores it against itself. */
#include <stdio.h>
#include <stdlib.h>

#include "iganet.h"

#define J 17

static int check(IganetStatus s, const char *what) {
    if (s != IGANET_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, iganet_last_error_message());
        return 1;
    }
    return 0;
}

int main(void) {
    IganetModel *model = NULL;
    double in2d[J * 2], out3d[J * 3], err = -1.0;
    for (int i = 0; i < J * 2; i++) {
        in2d[i] = 0.05 * (i % 7) - 0.15;
    }
    printf("iganet %s\n", iganet_version());
    if (check(iganet_model_new(NULL, NULL, 0, &model), "model_new")) return EXIT_FAILURE;
    printf("joints %zu params %zu\n", iganet_model_num_joints(model), iganet_model_param_count(model));
    if (check(iganet_model_predict(model, in2d, 1, J, true, out3d), "predict")) return EXIT_FAILURE;
    if (check(iganet_mpjpe(out3d, out3d, 1, J, &err), "mpjpe")) return EXIT_FAILURE;
    printf("self mpjpe %.1f\n", err);
    if (iganet_model_predict(model, in2d, 1, J - 1, true, out3d) != IGANET_STATUS_SHAPE_MISMATCH) return EXIT_FAILURE;
    printf("expected error: %s\n", iganet_last_error_message());
    iganet_model_free(model);
    return EXIT_SUCCESS;
}
