#include <stdio.h>
#include "genex.h"

int main(void) {
    char *out = NULL;
    GenexStatus st = genex_preprocess("Birds usually can fly.", &out);
    if (st != GENEX_STATUS_OK) {
        char *msg = genex_last_error();
        fprintf(stderr, "%s\n", msg ? msg : "unknown error");
        genex_string_free(msg);
        return 1;
    }
    puts(out);
    genex_string_free(out);
    return 0;
}
