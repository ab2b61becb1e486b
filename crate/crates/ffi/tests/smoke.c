#include <stdio.h>
#include "tractfuse.h"

int main(void) {
    double a[3] = {1.0, 0.0, 0.0};
    double peaks[3] = {1.0, 0.0, 0.0};
    double r = 0.0;
    if (tf_reward(a, NULL, peaks, 1, &r) != TF_STATUS_OK) return 1;
    if (r < 0.999 || r > 1.001) return 2;

    TfPhantom *p = NULL;
    if (tf_phantom_generate("crossing", 1, &p) != TF_STATUS_OK) return 3;
    size_t bundles = 0, dims[3];
    if (tf_phantom_info(p, &bundles, dims) != TF_STATUS_OK || bundles != 2) return 4;
    tf_phantom_free(p);

    if (tf_phantom_generate("nope", 1, &p) != TF_STATUS_INVALID_ARGUMENT) return 5;
    char msg[128];
    tf_last_error(msg, sizeof msg);
    printf("ok %s\n", msg);
    return 0;
}
