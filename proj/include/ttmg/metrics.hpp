#pragma once

#include <cstdint>
#include <vector>

#include "ttmg/common.hpp"

namespace ttmg {

struct Confusion {
    int64_t tp = 0;
    int64_t fp = 0;
    int64_t fn = 0;
    int64_t tn = 0;
};

// Pixel counts for binary masks (nonzero = foreground). Equal sizes required.
Confusion confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

// Dice similarity 2TP/(2TP+FP+FN). Both masks empty scores 1.
double dsc(const Confusion& c);

// Intersection over union TP/(TP+FP+FN). Both masks empty scores 1.
double miou(const Confusion& c);

} // namespace ttmg
