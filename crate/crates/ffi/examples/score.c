/* Loads a model and scores one (query, title) pair.
 *
 *   cc examples/score.c -Iinclude -L../../target/release -lrelnn_ffi -o score
 *   ./score model.bin "red shoe" "red running shoe"
 */
#include <stdio.h>

#include "relnn.h"

int main(int argc, char **argv) {
    if (argc != 4) {
        fprintf(stderr, "usage: %s MODEL QUERY TITLE\n", argv[0]);
        return 2;
    }
    RelnnModel *model = NULL;
    if (relnn_model_load(argv[1], &model) != RELNN_STATUS_OK) {
        fprintf(stderr, "load failed: %s\n", relnn_last_error_message());
        return 1;
    }
    float score = 0.0f;
    RelnnStatus status = relnn_model_score(model, argv[2], argv[3], &score);
    if (status == RELNN_STATUS_OK) {
        printf("%.6f\n", score);
    } else {
        fprintf(stderr, "score failed: %s\n", relnn_last_error_message());
    }
    relnn_model_free(model);
    return status == RELNN_STATUS_OK ? 0 : 1;
}
