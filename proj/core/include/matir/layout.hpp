#pragma once

#include "matir/tensor.hpp"

namespace matir {

/// [C x H x W] map -> [H*W x C] pixel rows (row-major pixel order).
inline Tensor map_to_rows(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("map_to_rows expects [C x H x W]");
    const int64_t c = x.dim(0), l = x.dim(1) * x.dim(2);
    return ops::transpose(ops::reshape(x, {c, l}));
}

/// [H*W x C] pixel rows -> [C x H x W] map.
inline Tensor rows_to_map(const Tensor& r, int64_t c, int64_t h, int64_t w) {
    if (r.rank() != 2 || r.dim(0) != h * w || r.dim(1) != c) {
        throw DimensionError("rows_to_map: rows " + shape_str(r.shape()) + " do not match " +
                             std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w));
    }
    return ops::reshape(ops::transpose(r), {c, h, w});
}

}  // namespace matir
