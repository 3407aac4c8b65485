#pragma once

// Synthetic removal scene: two textured background subtypes split by a vertical seam,
// one solid target square straddling the seam and one solid non-target square.

#include <cstdint>
#include <random>
#include <string>

#include "eraselora/label_map.hpp"
#include "eraselora/types.hpp"

namespace eraselora {

struct Rect {
    int x0, y0, width, height;
    bool contains(int x, int y) const { return x >= x0 && x < x0 + width && y >= y0 && y < y0 + height; }
    int area() const { return width * height; }
    bool intersects(const Rect& o) const
    {
        return x0 < o.x0 + o.width && o.x0 < x0 + width && y0 < o.y0 + o.height && o.y0 < y0 + height;
    }
};

struct SyntheticScene {
    std::uint64_t seed = 0;
    int size = 64;
    int seam_x = 32;
    Rect target{};
    Rect non_target{};
    ImageTensor image;
    ImageTensor ground_truth; // the same scene without the target
    BinaryMask target_mask;
    BinaryMask non_target_mask;
    LabelMap labels;
    TagReport tags;
};

namespace scene_palette {
inline constexpr double stripe_a[3] = {0.22, 0.55, 0.18};
inline constexpr double stripe_b[3] = {0.36, 0.72, 0.30};
inline constexpr double checker_a[3] = {0.55, 0.72, 0.92};
inline constexpr double checker_b[3] = {0.42, 0.60, 0.85};
inline constexpr double target[3] = {0.88, 0.14, 0.10};
inline constexpr double non_target[3] = {0.96, 0.84, 0.22};
} // namespace scene_palette

inline SyntheticScene generate_scene(std::uint64_t seed, int size = 64)
{
    require(size >= 32 && size % 8 == 0, "scene size must be a multiple of 8 and at least 32");
    std::mt19937_64 rng(seed);
    auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    SyntheticScene s;
    s.seed = seed;
    s.size = size;
    s.seam_x = size / 2 + uniform(-size / 16, size / 16);
    const int side = size / 4;
    s.target = {uniform(s.seam_x - side + side / 4, s.seam_x - side / 4), uniform(size / 8, size - side - size / 8),
                side, side};
    const int small = size / 8;
    do {
        s.non_target = {uniform(0, size - small), uniform(0, size - small), small, small};
    } while (s.non_target.intersects(Rect{s.target.x0 - 2, s.target.y0 - 2, side + 4, side + 4}));

    s.image = ImageTensor(size, size, 3);
    s.ground_truth = ImageTensor(size, size, 3);
    s.target_mask = BinaryMask(size, size);
    s.non_target_mask = BinaryMask(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double* color = nullptr;
            if (x < s.seam_x)
                color = (y / 2) % 2 == 0 ? scene_palette::stripe_a : scene_palette::stripe_b;
            else
                color = ((y / 4) + (x / 4)) % 2 == 0 ? scene_palette::checker_a : scene_palette::checker_b;
            if (s.non_target.contains(x, y)) {
                color = scene_palette::non_target;
                s.non_target_mask.set(y, x, true);
            }
            for (int c = 0; c < 3; ++c)
                s.ground_truth.at(y, x, c) = color[c];
            if (s.target.contains(x, y)) {
                color = scene_palette::target;
                s.target_mask.set(y, x, true);
            }
            for (int c = 0; c < 3; ++c)
                s.image.at(y, x, c) = color[c];
        }
    }
    s.labels = build_label_map(s.target_mask, s.non_target_mask);
    s.tags.target_tag = "red box";
    s.tags.non_target_tags = {"lamp"};
    s.tags.background_tags = {"grass", "sky"};
    return s;
}

} // namespace eraselora
