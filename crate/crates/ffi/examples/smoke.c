#include <stdio.h>
#include <string.h>
#include "tooltip.h"

int main(int argc, char **argv) {
    if (argc < 2) return 64;
    TtMask *mask = NULL;
    if (tt_mask_read(argv[1], &mask) != TT_STATUS_OK) {
        fprintf(stderr, "%s\n", tt_last_error());
        return 1;
    }
    TtTips tips;
    int degenerate = -1;
    if (tt_baseline_detect(mask, &tips, &degenerate) != TT_STATUS_OK) return 2;
    printf("%zu %zu %.2f %.2f %.2f %.2f %d\n", tt_mask_width(mask), tt_mask_height(mask),
           tips.left_x, tips.left_y, tips.right_x, tips.right_y, degenerate);
    tt_mask_free(mask);
    if (tt_mask_read("/nonexistent/mask.pgm", &mask) != TT_STATUS_IO) return 3;
    if (strlen(tt_last_error()) == 0) return 4;
    return 0;
}
