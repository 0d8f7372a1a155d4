/* Loads a checkpoint, scores two points and draws one SGLD sample. */
#include <stdio.h>
#include <stdlib.h>

#include "jemlab.h"

static int fail(JemStatus s) {
    const char *msg = jem_last_error();
    fprintf(stderr, "status %d: %s\n", (int)s, msg ? msg : "(none)");
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s CHECKPOINT\n", argv[0]);
        return 2;
    }
    JemModel *m = NULL;
    JemStatus s = jem_model_load(argv[1], &m);
    if (s != JEM_STATUS_OK) return fail(s);

    size_t d = jem_model_input_len(m), k = jem_model_classes(m);
    double *x = calloc(2 * d, sizeof(double));
    double *logits = calloc(2 * k, sizeof(double));
    double energy[2];
    for (size_t i = 0; i < 2 * d; i++) x[i] = (double)i - 1.0;
    if ((s = jem_model_logits(m, x, 2, logits)) != JEM_STATUS_OK) return fail(s);
    if ((s = jem_model_energy(m, x, 2, energy)) != JEM_STATUS_OK) return fail(s);
    if ((s = jem_model_sample(m, 1, 5, 1.0, 0.0, -1, 7, x)) != JEM_STATUS_OK) return fail(s);

    double in[3] = {0.9, 0.8, 0.7}, out[2] = {0.1, 0.75}, auc = 0.0;
    if ((s = jem_auroc(in, 3, out, 2, &auc)) != JEM_STATUS_OK) return fail(s);
    s = jem_model_sample(m, 1, 5, 1.0, 0.0, (int64_t)k, 7, x);

    printf("version %s\n", jem_version());
    printf("input_len %zu classes %zu\n", d, k);
    printf("energy %.17g %.17g\n", energy[0], energy[1]);
    printf("auroc %.17g\n", auc);
    printf("bad_class_status %d\n", (int)s);
    jem_model_free(m);
    free(x);
    free(logits);
    return 0;
}
