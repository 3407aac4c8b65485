#pragma once

// Small deterministic latent diffusion model used for desk-scale runs.
//
// Pipeline of one denoise_step:
//   z_t (8x8x4) -> 2x2 patchify (16 tokens x 16) -> linear in + positional + time embedding
//   -> residual self-attention -> residual cross-attention over tag tokens -> linear out (F)
//   -> z0_hat = c_skip(t) z_t + c_out(t) F
// with c_skip = alpha s^2 / (alpha^2 s^2 + sigma^2) and c_out = sigma s / sqrt(alpha^2 s^2 + sigma^2)
// for an assumed latent spread s, so t = 0 (alpha = 1, sigma = 0) is the identity.
// Cross-attention probabilities of each patch are replicated to its four latent indices.

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "eraselora/backbone.hpp"

namespace eraselora {

struct ToyBackboneConfig {
    int image_height = 64;
    int image_width = 64;
    std::uint64_t seed = 0;
    int schedule_steps = 50;
    double data_std = 0.25;
};

class ToyBackbone final : public DiffusionBackbone {
public:
    static constexpr int kLatentSide = 8;
    static constexpr int kLatentChannels = 4;
    static constexpr int kPatch = 2;
    static constexpr int kModelDim = 32;
    static constexpr int kVocab = 256;
    static constexpr int kPatchSide = kLatentSide / kPatch;
    static constexpr int kTokens = kPatchSide * kPatchSide;
    static constexpr int kPatchDim = kPatch * kPatch * kLatentChannels;

    explicit ToyBackbone(ToyBackboneConfig config = {})
        : config_(config), schedule_(config.schedule_steps)
    {
        require(config.image_height % kLatentSide == 0 && config.image_width % kLatentSide == 0,
                "toy backbone image size must be a multiple of 8");
        block_h_ = config.image_height / kLatentSide;
        block_w_ = config.image_width / kLatentSide;
        require(block_h_ >= 2 && block_w_ >= 2, "toy backbone image must be at least 16x16");
        initialize();
    }

    const ToyBackboneConfig& config() const noexcept { return config_; }

    LatentShape latent_shape() const override { return {kLatentSide, kLatentSide, kLatentChannels}; }
    const NoiseSchedule& schedule() const override { return schedule_; }

    LatentTensor encode(const ImageTensor& image) const override
    {
        require(image.height() == config_.image_height && image.width() == config_.image_width && image.channels() == 3,
                "image does not match the backbone resolution");
        LatentTensor z(kLatentSide, kLatentSide, kLatentChannels);
        Eigen::VectorXd block(block_h_ * block_w_ * 3);
        for (int i = 0; i < kLatentSide; ++i)
            for (int j = 0; j < kLatentSide; ++j) {
                gather_block(image, i, j, block);
                z.values.row(i * kLatentSide + j) = latent_scale() * (encoder_basis_.transpose() * block).transpose();
            }
        return z;
    }

    ImageTensor decode(const LatentTensor& latent) const override
    {
        require(latent.height == kLatentSide && latent.width == kLatentSide && latent.channels == kLatentChannels,
                "latent does not match the backbone shape");
        ImageTensor image(config_.image_height, config_.image_width, 3);
        for (int i = 0; i < kLatentSide; ++i)
            for (int j = 0; j < kLatentSide; ++j) {
                const Eigen::VectorXd block =
                    encoder_basis_ * latent.values.row(i * kLatentSide + j).transpose() / latent_scale();
                scatter_block(image, i, j, block);
            }
        image.clamp01();
        return image;
    }

    int token_id(std::string_view tag) const override
    {
        require(!tag.empty(), "empty tag cannot be tokenized");
        std::uint64_t h = 14695981039346656037ull;
        for (char c : to_lower(std::string(tag))) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return static_cast<int>(h % kVocab);
    }

    std::vector<ProjectionInfo> attention_projections() const override
    {
        std::vector<ProjectionInfo> out;
        for (const auto& name : projection_names())
            out.push_back({name, kModelDim, kModelDim});
        return out;
    }

    void attach_adapters(LoraState* adapters) override { adapters_ = adapters; }

    DenoiseOutput denoise_step(const LatentTensor& z_t, int t, std::span<const int> cond) override
    {
        require(z_t.height == kLatentSide && z_t.width == kLatentSide && z_t.channels == kLatentChannels,
                "latent does not match the backbone shape");
        require(!cond.empty(), "denoise_step needs at least one condition token");
        for (int id : cond)
            require(id >= 0 && id < kVocab, "unknown condition token id " + std::to_string(id));

        Cache& c = cache_;
        {
            const double a = schedule_.alpha(t), s = schedule_.sigma(t), sd = config_.data_std;
            const double denom = a * a * sd * sd + s * s;
            c.c_skip = a * sd * sd / denom;
            c.c_out = s * sd / std::sqrt(denom);
        }
        for (const auto& name : projection_names())
            c.weights[name] = effective_weight(name);

        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kModelDim));
        const Eigen::MatrixXd x = patchify(z_t.values);
        c.h0 = x * weights_.at("patch_in.weight").transpose() + weights_.at("pos_embed");
        c.h0.rowwise() += (weights_.at("time_embed.weight") * time_features(t)).transpose();

        // self-attention
        c.qs = c.h0 * c.weights["self_attn.q_proj"].transpose();
        c.ks = c.h0 * c.weights["self_attn.k_proj"].transpose();
        c.vs = c.h0 * c.weights["self_attn.v_proj"].transpose();
        c.ps = softmax_rows(c.qs * c.ks.transpose() * inv_sqrt_d);
        c.os = c.ps * c.vs;
        c.h1 = c.h0 + c.os * c.weights["self_attn.o_proj"].transpose();

        // cross-attention over tag tokens
        const Eigen::MatrixXd& table = weights_.at("token_embedding");
        c.cond.resize(static_cast<Eigen::Index>(cond.size()), kModelDim);
        for (std::size_t l = 0; l < cond.size(); ++l)
            c.cond.row(static_cast<Eigen::Index>(l)) = table.row(cond[l]);
        c.qc = c.h1 * c.weights["cross_attn.q_proj"].transpose();
        c.kc = c.cond * c.weights["cross_attn.k_proj"].transpose();
        c.vc = c.cond * c.weights["cross_attn.v_proj"].transpose();
        c.pc = softmax_rows(c.qc * c.kc.transpose() * inv_sqrt_d);
        c.oc = c.pc * c.vc;
        c.h2 = c.h1 + c.oc * c.weights["cross_attn.o_proj"].transpose();

        const Eigen::MatrixXd f = unpatchify(c.h2 * weights_.at("patch_out.weight").transpose());
        c.valid = true;

        DenoiseOutput out;
        out.z0_hat = LatentTensor(kLatentSide, kLatentSide, kLatentChannels);
        out.z0_hat.values = c.c_skip * z_t.values + c.c_out * f;
        out.raw_attention.resize(kLatentSide * kLatentSide, c.pc.cols());
        for (int p = 0; p < kLatentSide * kLatentSide; ++p)
            out.raw_attention.row(p) = c.pc.row(patch_of(p));
        return out;
    }

    void backward(const Eigen::MatrixXd& grad_z0_hat, const Eigen::MatrixXd& grad_raw_attention) override
    {
        require(cache_.valid, "backward called before denoise_step");
        require(grad_z0_hat.rows() == kLatentSide * kLatentSide && grad_z0_hat.cols() == kLatentChannels,
                "latent gradient has the wrong shape");
        const Cache& c = cache_;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kModelDim));
        std::map<std::string, Eigen::MatrixXd> gw;

        const Eigen::MatrixXd dy = patchify(c.c_out * grad_z0_hat);
        const Eigen::MatrixXd dh2 = dy * weights_.at("patch_out.weight");

        // cross-attention
        Eigen::MatrixXd dpc = Eigen::MatrixXd::Zero(c.pc.rows(), c.pc.cols());
        if (grad_raw_attention.size() > 0) {
            require(grad_raw_attention.rows() == kLatentSide * kLatentSide && grad_raw_attention.cols() == c.pc.cols(),
                    "attention gradient has the wrong shape");
            for (int p = 0; p < kLatentSide * kLatentSide; ++p)
                dpc.row(patch_of(p)) += grad_raw_attention.row(p);
        }
        gw["cross_attn.o_proj"] = dh2.transpose() * c.oc;
        const Eigen::MatrixXd doc = dh2 * c.weights.at("cross_attn.o_proj");
        dpc += doc * c.vc.transpose();
        const Eigen::MatrixXd dvc = c.pc.transpose() * doc;
        gw["cross_attn.v_proj"] = dvc.transpose() * c.cond;
        const Eigen::MatrixXd dlc = softmax_rows_backward(c.pc, dpc) * inv_sqrt_d;
        const Eigen::MatrixXd dqc = dlc * c.kc;
        const Eigen::MatrixXd dkc = dlc.transpose() * c.qc;
        gw["cross_attn.q_proj"] = dqc.transpose() * c.h1;
        gw["cross_attn.k_proj"] = dkc.transpose() * c.cond;
        const Eigen::MatrixXd dh1 = dh2 + dqc * c.weights.at("cross_attn.q_proj");

        // self-attention
        gw["self_attn.o_proj"] = dh1.transpose() * c.os;
        const Eigen::MatrixXd dos = dh1 * c.weights.at("self_attn.o_proj");
        const Eigen::MatrixXd dps = dos * c.vs.transpose();
        const Eigen::MatrixXd dvs = c.ps.transpose() * dos;
        gw["self_attn.v_proj"] = dvs.transpose() * c.h0;
        const Eigen::MatrixXd dls = softmax_rows_backward(c.ps, dps) * inv_sqrt_d;
        gw["self_attn.q_proj"] = (dls * c.ks).transpose() * c.h0;
        gw["self_attn.k_proj"] = (dls.transpose() * c.qs).transpose() * c.h0;

        last_weight_grads_ = gw;
        if (!adapters_)
            return;
        for (auto& [name, g] : gw)
            if (LoraAdapter* a = adapters_->find(name))
                a->accumulate(g);
    }

    void merge_into_base(const LoraState& adapters) override
    {
        for (const auto& a : adapters.adapters) {
            auto it = weights_.find(a.name);
            require(it != weights_.end(), "adapter '" + a.name + "' does not match a projection");
            require(it->second.rows() == a.up.rows() && it->second.cols() == a.down.cols(),
                    "adapter '" + a.name + "' shape does not match its projection");
            it->second += a.delta();
        }
    }

    std::vector<NamedTensor> base_parameters() const override
    {
        std::vector<NamedTensor> out;
        out.push_back(NamedTensor::from_matrix("encoder.basis", encoder_basis_));
        for (const auto& [name, w] : weights_)
            out.push_back(NamedTensor::from_matrix(name, w));
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = static_cast<std::size_t>(encoder_basis_.size());
        for (const auto& [name, w] : weights_)
            n += static_cast<std::size_t>(w.size());
        return n;
    }

    /// Direct weight access for tests and surgery (e.g. tying token embeddings).
    Eigen::MatrixXd& weight(const std::string& name)
    {
        auto it = weights_.find(name);
        require(it != weights_.end(), "no weight named '" + name + "'");
        return it->second;
    }

    /// Gradients w.r.t. the effective projection weights from the latest backward call.
    const std::map<std::string, Eigen::MatrixXd>& last_weight_grads() const { return last_weight_grads_; }

    static const std::vector<std::string>& projection_names()
    {
        static const std::vector<std::string> names = {
            "self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.o_proj",
            "cross_attn.q_proj", "cross_attn.k_proj", "cross_attn.v_proj", "cross_attn.o_proj"};
        return names;
    }

private:
    struct Cache {
        bool valid = false;
        double c_skip = 1.0;
        double c_out = 0.0;
        std::map<std::string, Eigen::MatrixXd> weights;
        Eigen::MatrixXd h0, qs, ks, vs, ps, os, h1;
        Eigen::MatrixXd cond, qc, kc, vc, pc, oc, h2;
    };

    double latent_scale() const { return 2.0 / std::sqrt(static_cast<double>(block_h_ * block_w_)); }

    static int patch_of(int latent_index)
    {
        const int y = latent_index / kLatentSide;
        const int x = latent_index % kLatentSide;
        return (y / kPatch) * kPatchSide + x / kPatch;
    }

    static Eigen::MatrixXd patchify(const Eigen::MatrixXd& latent)
    {
        Eigen::MatrixXd out(kTokens, kPatchDim);
        for (int p = 0; p < kLatentSide * kLatentSide; ++p) {
            const int y = p / kLatentSide, x = p % kLatentSide;
            const int slot = (y % kPatch) * kPatch + x % kPatch;
            out.block(patch_of(p), slot * kLatentChannels, 1, kLatentChannels) = latent.row(p);
        }
        return out;
    }

    static Eigen::MatrixXd unpatchify(const Eigen::MatrixXd& tokens)
    {
        Eigen::MatrixXd out(kLatentSide * kLatentSide, kLatentChannels);
        for (int p = 0; p < kLatentSide * kLatentSide; ++p) {
            const int y = p / kLatentSide, x = p % kLatentSide;
            const int slot = (y % kPatch) * kPatch + x % kPatch;
            out.row(p) = tokens.block(patch_of(p), slot * kLatentChannels, 1, kLatentChannels);
        }
        return out;
    }

    static Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits)
    {
        Eigen::MatrixXd out(logits.rows(), logits.cols());
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            const Eigen::RowVectorXd e = (logits.row(r).array() - logits.row(r).maxCoeff()).exp();
            out.row(r) = e / e.sum();
        }
        return out;
    }

    static Eigen::MatrixXd softmax_rows_backward(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& grad)
    {
        Eigen::MatrixXd out(probs.rows(), probs.cols());
        for (Eigen::Index r = 0; r < probs.rows(); ++r) {
            const double inner = probs.row(r).dot(grad.row(r));
            out.row(r) = probs.row(r).array() * (grad.row(r).array() - inner);
        }
        return out;
    }

    static Eigen::VectorXd time_features(int t)
    {
        Eigen::VectorXd f(kModelDim);
        for (int i = 0; i < kModelDim / 2; ++i) {
            const double freq = std::exp(-std::log(1000.0) * i / (kModelDim / 2));
            f[2 * i] = std::sin(t * freq);
            f[2 * i + 1] = std::cos(t * freq);
        }
        return f;
    }

    Eigen::MatrixXd effective_weight(const std::string& name) const
    {
        Eigen::MatrixXd w = weights_.at(name);
        if (adapters_ && !adapters_->merged)
            if (const LoraAdapter* a = adapters_->find(name))
                w += a->delta();
        return w;
    }

    void gather_block(const ImageTensor& image, int i, int j, Eigen::VectorXd& block) const
    {
        int k = 0;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < block_h_; ++y)
                for (int x = 0; x < block_w_; ++x)
                    block[k++] = image.at(i * block_h_ + y, j * block_w_ + x, c);
    }

    void scatter_block(ImageTensor& image, int i, int j, const Eigen::VectorXd& block) const
    {
        int k = 0;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < block_h_; ++y)
                for (int x = 0; x < block_w_; ++x)
                    image.at(i * block_h_ + y, j * block_w_ + x, c) = block[k++];
    }

    void initialize()
    {
        std::mt19937_64 rng(config_.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto gaussian = [&](int rows, int cols, double stddev) {
            Eigen::MatrixXd m(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c)
                    m(r, c) = stddev * normal(rng);
            return m;
        };

        // Orthonormal basis: one per-channel mean direction each, plus a seeded texture direction.
        const int n = block_h_ * block_w_;
        encoder_basis_ = Eigen::MatrixXd::Zero(3 * n, kLatentChannels);
        for (int c = 0; c < 3; ++c)
            encoder_basis_.block(c * n, c, n, 1).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
        Eigen::VectorXd texture = gaussian(3 * n, 1, 1.0);
        for (int c = 0; c < 3; ++c)
            texture -= encoder_basis_.col(c).dot(texture) * encoder_basis_.col(c);
        encoder_basis_.col(3) = texture.normalized();

        const double fan = 1.0 / std::sqrt(static_cast<double>(kModelDim));
        weights_["patch_in.weight"] = gaussian(kModelDim, kPatchDim, 1.0 / std::sqrt(static_cast<double>(kPatchDim)));
        weights_["pos_embed"] = gaussian(kTokens, kModelDim, 0.5);
        weights_["time_embed.weight"] = gaussian(kModelDim, kModelDim, 0.5 * fan);
        for (const auto& name : projection_names())
            weights_[name] = gaussian(kModelDim, kModelDim, fan);
        weights_["token_embedding"] = gaussian(kVocab, kModelDim, 1.0);
        weights_["patch_out.weight"] = gaussian(kPatchDim, kModelDim, 0.5 * fan);
    }

    ToyBackboneConfig config_;
    NoiseSchedule schedule_;
    int block_h_ = 0;
    int block_w_ = 0;
    Eigen::MatrixXd encoder_basis_;
    std::map<std::string, Eigen::MatrixXd> weights_;
    LoraState* adapters_ = nullptr;
    Cache cache_;
    std::map<std::string, Eigen::MatrixXd> last_weight_grads_;
};

} // namespace eraselora
