#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eraselora/latent.hpp"
#include "eraselora/lora_state.hpp"
#include "eraselora/types.hpp"

namespace eraselora {

/// Variance-preserving cosine schedule: alpha_t = cos(pi t / 2T), sigma_t = sin(pi t / 2T), t in [0, T].
class NoiseSchedule {
public:
    explicit NoiseSchedule(int steps = 50) : steps_(steps) { require(steps >= 1, "schedule needs at least one step"); }

    int steps() const noexcept { return steps_; }
    double alpha(int t) const { return std::cos(angle(t)); }
    double sigma(int t) const { return std::sin(angle(t)); }

    LatentTensor add_noise(const LatentTensor& z, const Eigen::MatrixXd& noise, int t) const
    {
        LatentTensor out = z;
        out.values = alpha(t) * z.values + sigma(t) * noise;
        return out;
    }

private:
    double angle(int t) const
    {
        require(t >= 0 && t <= steps_, "timestep outside [0, T]");
        return 0.5 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(steps_);
    }

    int steps_;
};

struct ProjectionInfo {
    std::string name;
    int rows;
    int cols;
};

struct DenoiseOutput {
    LatentTensor z0_hat;
    /// (latent indices) x (condition tokens); each row sums to one.
    Eigen::MatrixXd raw_attention;
};

/// A latent text-conditioned diffusion model that can be adapted with LoRA.
class DiffusionBackbone {
public:
    virtual ~DiffusionBackbone() = default;

    virtual LatentShape latent_shape() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;

    virtual LatentTensor encode(const ImageTensor& image) const = 0;
    virtual ImageTensor decode(const LatentTensor& latent) const = 0;

    /// Maps a tag to a condition token; throws invalid_input for tags the model cannot embed.
    virtual int token_id(std::string_view tag) const = 0;

    /// The projections LoRA may wrap; empty when the model exposes none.
    virtual std::vector<ProjectionInfo> attention_projections() const = 0;

    /// Observed, not owned. nullptr detaches.
    virtual void attach_adapters(LoraState* adapters) = 0;

    /// One-step clean-latent prediction plus the cross-attention maps of that step.
    virtual DenoiseOutput denoise_step(const LatentTensor& z_t, int t, std::span<const int> cond) = 0;

    /// Backpropagates through the most recent denoise_step and accumulates into the attached adapters' gradients.
    virtual void backward(const Eigen::MatrixXd& grad_z0_hat, const Eigen::MatrixXd& grad_raw_attention) = 0;

    /// W <- W + scale * up * down for every adapter.
    virtual void merge_into_base(const LoraState& adapters) = 0;

    /// Frozen weights, in a stable order.
    virtual std::vector<NamedTensor> base_parameters() const = 0;
};

} // namespace eraselora
