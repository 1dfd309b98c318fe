#include <stdio.h>
#include <string.h>
#include "mret.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    MretModel *model = NULL;
    if (mret_model_load(argv[1], &model) != MRET_STATUS_OK) {
        fprintf(stderr, "%s\n", mret_last_error_message());
        return 1;
    }
    uint8_t pixels[4 * 16 * 20 * 3];
    for (size_t i = 0; i < sizeof pixels; i++) pixels[i] = (uint8_t)(i * 7 % 251);
    MretVideo *video = NULL;
    if (mret_video_from_rgb8(pixels, 4, 16, 20, &video) != MRET_STATUS_OK) return 2;
    MretScoreOptions opts;
    memset(&opts, 0, sizeof opts);
    double score = 0.0;
    if (mret_model_score(model, video, &opts, &score) != MRET_STATUS_OK) return 3;
    if (mret_model_score(model, NULL, &opts, &score) != MRET_STATUS_NULL_POINTER) return 4;
    double a[3] = {1.0, 2.0, 3.0}, b[3] = {10.0, 30.0, 20.0}, r = 0.0;
    if (mret_srcc(a, b, 3, &r) != MRET_STATUS_OK) return 5;
    printf("%.17g %.17g %s\n", score, r, mret_version());
    mret_video_free(video);
    mret_model_free(model);
    return 0;
}
