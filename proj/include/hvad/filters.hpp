#pragma once

// Renders the first encoder convolution as a PGM mosaic: one tile per output
// filter, each tile showing its three temporal 3x3 slices side by side.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "hvad/errors.hpp"
#include "hvad/image.hpp"
#include "hvad/tensor.hpp"

namespace hvad {

struct FilterGridOptions {
    std::size_t columns = 8;  // tiles per row
    std::size_t scale = 8;    // nearest-neighbour magnification per weight
    std::size_t gap = 1;      // separator, in weights, between slices and tiles
};

struct GrayCanvas {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels;
};

/// Maps weights [k,k,T,F] to gray levels 0.5 + 0.5 * w / max|w| (0.5 when all
/// weights are zero). Separators are black.
template <class T>
GrayCanvas filter_grid(const Tensor<T>& filters, const FilterGridOptions& opt = {}) {
    if (filters.rank() != 4 || filters.dim(0) != filters.dim(1)) {
        throw ConfigError("filter_grid expects [k,k,depth,count], got " + shape_string(filters.shape()));
    }
    if (opt.columns == 0 || opt.scale == 0) throw ConfigError("filter_grid: columns and scale must be positive");
    const std::size_t k = filters.dim(0), depth = filters.dim(2), count = filters.dim(3);
    double peak = 0.0;
    for (std::size_t i = 0; i < filters.size(); ++i) peak = std::max(peak, std::abs(static_cast<double>(filters[i])));

    const std::size_t tile_w = depth * k + (depth - 1) * opt.gap, tile_h = k;
    const std::size_t cols = std::min(opt.columns, count), rows = (count + cols - 1) / cols;
    const std::size_t cells_w = cols * tile_w + (cols + 1) * opt.gap;
    const std::size_t cells_h = rows * tile_h + (rows + 1) * opt.gap;
    GrayCanvas g{cells_w * opt.scale, cells_h * opt.scale, {}};
    g.pixels.assign(g.width * g.height, 0.0);

    for (std::size_t f = 0; f < count; ++f) {
        const std::size_t ox = opt.gap + (f % cols) * (tile_w + opt.gap);
        const std::size_t oy = opt.gap + (f / cols) * (tile_h + opt.gap);
        for (std::size_t t = 0; t < depth; ++t)
            for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = 0; b < k; ++b) {
                    const double w = static_cast<double>(filters.at(a, b, t, f));
                    const double level = peak > 0.0 ? 0.5 + 0.5 * w / peak : 0.5;
                    const std::size_t cx = ox + t * (k + opt.gap) + b, cy = oy + a;
                    for (std::size_t sy = 0; sy < opt.scale; ++sy)
                        for (std::size_t sx = 0; sx < opt.scale; ++sx)
                            g.pixels[(cy * opt.scale + sy) * g.width + cx * opt.scale + sx] = level;
                }
    }
    return g;
}

template <class T>
void export_filter_grid(const std::filesystem::path& path, const Tensor<T>& filters, const FilterGridOptions& opt = {}) {
    const GrayCanvas g = filter_grid(filters, opt);
    write_pgm(path, g.width, g.height, g.pixels);
}

/// Elementwise after - before, for rendering what training changed.
template <class T>
Tensor<T> filter_difference(const Tensor<T>& after, const Tensor<T>& before) {
    if (after.shape() != before.shape()) throw ConfigError("filter_difference: shape mismatch");
    Tensor<T> d(after.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = after[i] - before[i];
    return d;
}

}  // namespace hvad
