#include <stdio.h>
#include <string.h>

#include "atlascrf.h"

#define CHECK(expr)                                                        \
    do {                                                                   \
        if (!(expr)) {                                                     \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #expr, \
                    ac_last_error());                                      \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke <target.vol1> <atlas.json>\n");
        return 2;
    }
    CHECK(strlen(ac_version()) > 0);

    AcScalar *target = NULL;
    AcAtlas *atlas = NULL;
    CHECK(ac_scalar_read(argv[1], &target) == AC_STATUS_OK);
    CHECK(ac_atlas_read(argv[2], &atlas) == AC_STATUS_OK);

    AcProb *missing = NULL;
    CHECK(ac_prob_read("/nonexistent/unary.vol1", &missing) == AC_STATUS_IO);
    CHECK(missing == NULL);
    CHECK(strstr(ac_last_error(), "nonexistent") != NULL);

    AcInferOptions opts = ac_infer_options_default();
    CHECK(opts.iters > 0 && opts.enable_prior && opts.enable_smooth);

    AcProb *q = NULL;
    CHECK(ac_infer_unary(target, NULL, atlas, &opts, &q) == AC_STATUS_NULL_ARGUMENT);

    size_t k = 0, d = 0, h = 0, w = 0;
    CHECK(ac_prob_shape(NULL, &k, &d, &h, &w) == AC_STATUS_NULL_ARGUMENT);

    double tiny[8] = {0, 1, 2, 3, 4, 5, 6, 7};
    AcScalar *cube = NULL;
    CHECK(ac_scalar_new(2, 2, 2, tiny, &cube) == AC_STATUS_OK);
    ac_scalar_free(cube);

    ac_atlas_free(atlas);
    ac_scalar_free(target);
    printf("ok\n");
    return 0;
}
