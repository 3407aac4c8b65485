#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "eraselora/types.hpp"

namespace eraselora {

inline constexpr double kDiceEpsilon = 1e-6;

/// Target wins on overlap; everything not covered by either mask is background.
inline LabelMap build_label_map(const BinaryMask& target, const BinaryMask& non_target)
{
    require(target.same_shape(non_target), "target and non-target masks differ in shape");
    LabelMap map(target.height(), target.width());
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i])
            map[i] = Label::target;
        else if (non_target[i])
            map[i] = Label::non_target;
    }
    return map;
}

/// Cell (i, j) of an out_h x out_w grid covers rows [i*H/out_h, (i+1)*H/out_h) of an H-row input.
struct BlockRange {
    int begin;
    int end;
};

inline BlockRange block_range(int index, int cells, int extent)
{
    return {static_cast<int>(static_cast<long long>(index) * extent / cells),
            static_cast<int>(static_cast<long long>(index + 1) * extent / cells)};
}

/// Majority vote per block with ties resolved 0 > 1 > 2. If the target region exists at the
/// source resolution but the vote erased it, the cell holding the most target pixels
/// (first in raster order on ties) is forced back to target.
inline LabelMap downsample_label_map(const LabelMap& map, int latent_h, int latent_w)
{
    require(latent_h > 0 && latent_w > 0, "latent dimensions must be positive");
    require(latent_h <= map.height() && latent_w <= map.width(),
            "latent dimensions exceed the label map dimensions");

    LabelMap out(latent_h, latent_w);
    std::vector<std::size_t> target_counts(static_cast<std::size_t>(latent_h) * latent_w, 0);
    bool any_target_out = false;

    for (int i = 0; i < latent_h; ++i) {
        const BlockRange rows = block_range(i, latent_h, map.height());
        for (int j = 0; j < latent_w; ++j) {
            const BlockRange cols = block_range(j, latent_w, map.width());
            std::array<std::size_t, 3> votes{};
            for (int y = rows.begin; y < rows.end; ++y)
                for (int x = cols.begin; x < cols.end; ++x)
                    ++votes[static_cast<std::size_t>(map.at(y, x))];
            std::size_t best = 0;
            for (std::size_t l = 1; l < 3; ++l)
                if (votes[l] > votes[best])
                    best = l;
            out.set(i, j, static_cast<Label>(best));
            target_counts[static_cast<std::size_t>(i) * latent_w + j] = votes[0];
            any_target_out = any_target_out || best == 0;
        }
    }

    if (!any_target_out) {
        std::size_t best_cell = 0;
        for (std::size_t k = 1; k < target_counts.size(); ++k)
            if (target_counts[k] > target_counts[best_cell])
                best_cell = k;
        if (target_counts[best_cell] > 0)
            out[best_cell] = Label::target;
    }
    return out;
}

/// Soft Dice: 2 sum(xy) / (sum(x) + sum(y) + eps). Inputs must lie in [0,1].
inline double dice(std::span<const double> x, std::span<const double> y, double eps = kDiceEpsilon)
{
    require(x.size() == y.size(), "dice inputs differ in size");
    double sxy = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        require(x[i] >= 0.0 && x[i] <= 1.0 && y[i] >= 0.0 && y[i] <= 1.0, "dice inputs must lie in [0,1]");
        sxy += x[i] * y[i];
        sx += x[i];
        sy += y[i];
    }
    return 2.0 * sxy / (sx + sy + eps);
}

/// d dice / d x, holding y fixed.
inline std::vector<double> dice_grad_x(std::span<const double> x, std::span<const double> y,
                                       double eps = kDiceEpsilon)
{
    double sxy = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += x[i] * y[i];
        sx += x[i];
        sy += y[i];
    }
    const double denom = sx + sy + eps;
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        g[i] = (2.0 * y[i] * denom - 2.0 * sxy) / (denom * denom);
    return g;
}

} // namespace eraselora
