#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "eraselora/backbone.hpp"

namespace eraselora {

/// Integer timesteps from t_start down to 0 in `steps` roughly even strides, duplicates removed.
inline std::vector<int> sampling_timesteps(int t_start, int steps)
{
    std::vector<int> ts;
    for (int k = 0; k <= steps; ++k) {
        const int t = static_cast<int>(std::lround(t_start * (1.0 - static_cast<double>(k) / steps)));
        if (ts.empty() || ts.back() != t)
            ts.push_back(t);
    }
    return ts;
}

/// Noises the source latent to strength*T and runs deterministic DDIM updates back to t = 0
/// with whatever adapters are currently attached to (or merged into) the backbone.
inline ImageTensor sample_removal(DiffusionBackbone& backbone, const LatentTensor& source, std::span<const int> cond,
                                  double strength, int steps, std::uint64_t seed)
{
    require(strength > 0.0 && strength <= 1.0, "strength must lie in (0,1]");
    require(steps >= 1, "sampling needs at least one step");
    const NoiseSchedule& schedule = backbone.schedule();
    const int t_start = static_cast<int>(std::lround(strength * schedule.steps()));
    require(t_start >= 1, "strength * T must be at least one step");

    std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dull);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd noise(source.values.rows(), source.values.cols());
    for (Eigen::Index r = 0; r < noise.rows(); ++r)
        for (Eigen::Index c = 0; c < noise.cols(); ++c)
            noise(r, c) = normal(rng);

    LatentTensor z = schedule.add_noise(source, noise, t_start);
    const auto ts = sampling_timesteps(t_start, steps);
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        const int t = ts[k];
        const int next = ts[k + 1];
        const LatentTensor z0 = backbone.denoise_step(z, t, cond).z0_hat;
        if (next == 0) {
            z = z0;
            break;
        }
        const Eigen::MatrixXd eps = (z.values - schedule.alpha(t) * z0.values) / schedule.sigma(t);
        z.values = schedule.alpha(next) * z0.values + schedule.sigma(next) * eps;
    }
    return backbone.decode(z);
}

} // namespace eraselora
