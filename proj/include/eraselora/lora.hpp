#pragma once

// Test-time LoRA adaptation: adapter injection, the optimization loop and weight merging.

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "eraselora/backbone.hpp"
#include "eraselora/label_map.hpp"
#include "eraselora/losses.hpp"

namespace eraselora {

/// Zero-initialised adapters (up = 0) for every attention projection of the backbone.
inline LoraState inject_adapters(const DiffusionBackbone& backbone, int rank, std::uint64_t seed = 0)
{
    require(rank >= 1, "adapter rank must be at least 1");
    const auto projections = backbone.attention_projections();
    require(!projections.empty(), "backbone exposes no attention projections to adapt");
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> normal(0.0, 1.0);
    LoraState state;
    state.rank = rank;
    for (const auto& p : projections) {
        LoraAdapter a;
        a.name = p.name;
        a.scale = 1.0 / rank;
        a.down.resize(rank, p.cols);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(p.cols));
        for (Eigen::Index r = 0; r < a.down.rows(); ++r)
            for (Eigen::Index c = 0; c < a.down.cols(); ++c)
                a.down(r, c) = stddev * normal(rng);
        a.up = Eigen::MatrixXd::Zero(p.rows, rank);
        a.zero_grad();
        state.adapters.push_back(std::move(a));
    }
    return state;
}

/// Attaches adapters to a backbone for the lifetime of the guard.
class ScopedAdapters {
public:
    ScopedAdapters(DiffusionBackbone& backbone, LoraState& adapters) : backbone_(backbone)
    {
        backbone_.attach_adapters(&adapters);
    }
    ~ScopedAdapters() { backbone_.attach_adapters(nullptr); }
    ScopedAdapters(const ScopedAdapters&) = delete;
    ScopedAdapters& operator=(const ScopedAdapters&) = delete;

private:
    DiffusionBackbone& backbone_;
};

inline void merge_adapters(DiffusionBackbone& backbone, LoraState& adapters)
{
    if (adapters.merged)
        fail(ErrorCode::already_merged, "adapters were already merged into this backbone");
    const auto projections = backbone.attention_projections();
    for (const auto& a : adapters.adapters) {
        auto it = std::find_if(projections.begin(), projections.end(), [&](const auto& p) { return p.name == a.name; });
        require(it != projections.end(), "adapter '" + a.name + "' does not belong to this backbone");
        require(a.up.rows() == it->rows && a.down.cols() == it->cols,
                "adapter '" + a.name + "' shape does not match its projection");
    }
    backbone.merge_into_base(adapters);
    adapters.merged = true;
}

/// Adam without weight decay over the adapter factors.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(LoraState& state)
    {
        if (m_.empty()) {
            for (const auto& a : state.adapters) {
                m_.push_back(Eigen::MatrixXd::Zero(a.down.rows(), a.down.cols()));
                v_.push_back(Eigen::MatrixXd::Zero(a.down.rows(), a.down.cols()));
                m_.push_back(Eigen::MatrixXd::Zero(a.up.rows(), a.up.cols()));
                v_.push_back(Eigen::MatrixXd::Zero(a.up.rows(), a.up.cols()));
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        std::size_t k = 0;
        for (auto& a : state.adapters) {
            update(a.down, a.grad_down, m_[k], v_[k], c1, c2);
            ++k;
            update(a.up, a.grad_up, m_[k], v_[k], c1, c2);
            ++k;
        }
    }

private:
    void update(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                double c1, double c2) const
    {
        m = beta1_ * m + (1.0 - beta1_) * grad;
        v = beta2_ * v + (1.0 - beta2_) * grad.cwiseProduct(grad);
        param.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }

    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Eigen::MatrixXd> m_, v_;
};

struct TtaConfig {
    int iterations = 500;
    int rank = 32;
    double lambda = kDefaultLambda;
    double tau = kDefaultTau;
    double learning_rate = 1e-4;
    std::uint64_t seed = 0;
    double t_min_fraction = 0.2; // timesteps drawn uniformly from [0.2T, 0.9T]
    double t_max_fraction = 0.9;
    double strength = 0.8;       // final sampling starts from strength * T
    int sampling_steps = 20;

    void validate() const
    {
        require(iterations >= 1, "iterations must be at least 1");
        require(rank >= 1, "rank must be at least 1");
        require(std::isfinite(lambda) && lambda >= 0.0, "lambda must be non-negative");
        require(std::isfinite(tau) && tau > 0.0, "tau must be positive");
        require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning rate must be positive");
        require(t_min_fraction >= 0.0 && t_min_fraction <= t_max_fraction && t_max_fraction <= 1.0,
                "timestep fractions must satisfy 0 <= min <= max <= 1");
        require(strength > 0.0 && strength <= 1.0, "strength must lie in (0,1]");
        require(sampling_steps >= 1, "sampling steps must be at least 1");
    }
};

inline void to_json(nlohmann::json& j, const TtaConfig& c)
{
    j = nlohmann::json{{"iterations", c.iterations}, {"rank", c.rank}, {"lambda", c.lambda}, {"tau", c.tau},
                       {"learning_rate", c.learning_rate}, {"seed", c.seed}, {"t_min_fraction", c.t_min_fraction},
                       {"t_max_fraction", c.t_max_fraction}, {"strength", c.strength},
                       {"sampling_steps", c.sampling_steps}};
}

struct TtaStep {
    int iteration = 0;
    int timestep = 0;
    LossBreakdown losses;
};

struct TtaTrace {
    std::vector<TtaStep> steps;
    double wall_clock_seconds = 0.0;
    std::string final_adapter_digest;

    /// JSON lines, one per iteration; wall clock is kept out so the file is reproducible.
    std::string to_jsonl() const
    {
        std::string out;
        for (const auto& s : steps) {
            nlohmann::json j = s.losses;
            j["iteration"] = s.iteration;
            j["timestep"] = s.timestep;
            out += j.dump() + "\n";
        }
        return out;
    }

    std::vector<double> total_series() const
    {
        std::vector<double> v;
        v.reserve(steps.size());
        for (const auto& s : steps)
            v.push_back(s.losses.l_total);
        return v;
    }
};

/// Raised when the objective turns non-finite; carries the trace up to the failing step.
class TtaAbort : public Error {
public:
    TtaAbort(const std::string& message, TtaTrace trace)
        : Error(ErrorCode::numerical_abort, message), trace_(std::move(trace)) {}
    const TtaTrace& trace() const noexcept { return trace_; }

private:
    TtaTrace trace_;
};

struct TtaResult {
    LoraState adapters;
    TtaTrace trace;
};

/// Condition tokens for the background tags; a generic "background" token stands in when there are none.
inline std::vector<int> background_condition(const DiffusionBackbone& backbone, const std::vector<std::string>& tags)
{
    std::vector<int> cond;
    for (const auto& tag : tags)
        cond.push_back(backbone.token_id(tag));
    if (cond.empty())
        cond.push_back(backbone.token_id("background"));
    return cond;
}

using TtaProgress = std::function<void(const TtaStep&)>;

/// Optimizes adapters on a single image. The backbone's base weights are never written.
inline TtaResult run_tta(DiffusionBackbone& backbone, const ImageTensor& image, const LabelMap& pixel_labels,
                         const std::vector<std::string>& background_tags, const TtaConfig& config,
                         const TtaProgress& progress = {})
{
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    const LatentShape shape = backbone.latent_shape();
    const LabelMap labels = downsample_label_map(pixel_labels, shape.height, shape.width);
    if (labels.count(Label::target) == 0 || labels.count(Label::background) == 0)
        fail(ErrorCode::degenerate_scene, "label map needs target and background indices at latent resolution");

    const LatentTensor z = backbone.encode(image);
    const std::vector<int> cond = background_condition(backbone, background_tags);
    const bool with_puzzle = !background_tags.empty();

    const std::string base_checksum = parameter_checksum(backbone.base_parameters());

    TtaResult result;
    result.adapters = inject_adapters(backbone, config.rank, config.seed);
    AdamOptimizer optimizer(config.learning_rate);
    ScopedAdapters attached(backbone, result.adapters);

    const int total_steps = backbone.schedule().steps();
    const int t_lo = std::max(1, static_cast<int>(std::ceil(config.t_min_fraction * total_steps)));
    const int t_hi = std::max(t_lo, static_cast<int>(std::floor(config.t_max_fraction * total_steps)));
    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<int> pick_t(t_lo, t_hi);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd noise(z.values.rows(), z.values.cols());
    const Eigen::MatrixXd no_attention(z.values.rows(), 0);

    for (int it = 1; it <= config.iterations; ++it) {
        const int t = pick_t(rng);
        for (Eigen::Index r = 0; r < noise.rows(); ++r)
            for (Eigen::Index c = 0; c < noise.cols(); ++c)
                noise(r, c) = normal(rng);
        const LatentTensor z_t = backbone.schedule().add_noise(z, noise, t);
        const DenoiseOutput out = backbone.denoise_step(z_t, t, cond);
        if (!out.z0_hat.values.allFinite() || (with_puzzle && !out.raw_attention.allFinite()))
            throw TtaAbort("non-finite model output at iteration " + std::to_string(it), std::move(result.trace));
        const ObjectiveEvaluation ev = evaluate_objective(z, out.z0_hat, with_puzzle ? out.raw_attention : no_attention,
                                                          background_tags, labels, config.lambda, config.tau);

        TtaStep step{it, t, ev.losses};
        if (!ev.losses.finite() || !ev.grad_z_hat.allFinite())
            throw TtaAbort("non-finite loss at iteration " + std::to_string(it), std::move(result.trace));
        result.trace.steps.push_back(step);

        result.adapters.zero_grad();
        backbone.backward(ev.grad_z_hat, with_puzzle ? ev.grad_raw_attention : Eigen::MatrixXd());
        optimizer.step(result.adapters);
        if (progress)
            progress(step);
    }

    if (parameter_checksum(backbone.base_parameters()) != base_checksum)
        throw std::logic_error("backbone base parameters changed during adaptation");
    result.adapters.zero_grad();
    result.trace.final_adapter_digest = result.adapters.digest();
    result.trace.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

} // namespace eraselora
