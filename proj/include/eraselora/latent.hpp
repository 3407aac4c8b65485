#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "eraselora/error.hpp"

namespace eraselora {

/// Latent feature map stored as (h*w) x c, row index p = y*w + x.
struct LatentTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    Eigen::MatrixXd values;

    LatentTensor() = default;
    LatentTensor(int h, int w, int c)
        : height(h), width(w), channels(c), values(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, c))
    {
        require(h > 0 && w > 0 && c > 0, "latent dimensions must be positive");
    }

    Eigen::Index indices() const noexcept { return static_cast<Eigen::Index>(height) * width; }

    bool same_shape(const LatentTensor& other) const noexcept
    {
        return height == other.height && width == other.width && channels == other.channels;
    }

    bool finite() const { return values.allFinite(); }
};

struct LatentShape {
    int height;
    int width;
    int channels;
    bool operator==(const LatentShape&) const = default;
};

} // namespace eraselora
