#include "ttmg/metrics.hpp"

namespace ttmg {

Confusion confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
    if (pred.size() != gt.size()) throw ShapeError("confusion: mask sizes differ");
    Confusion c;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] != 0, g = gt[i] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double dsc(const Confusion& c) {
    if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

double miou(const Confusion& c) {
    if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
}

} // namespace ttmg
