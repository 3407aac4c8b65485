#pragma once

// Background reconstruction and background puzzle objectives, each with its
// closed-form gradient so the adaptation loop can backpropagate into the
// denoiser without an autodiff framework.

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "eraselora/label_map.hpp"
#include "eraselora/latent.hpp"

namespace eraselora {

inline constexpr double kDefaultTau = 100.0;
inline constexpr double kDefaultLambda = 0.2;

/// Per-subtype cross-attention after the temperature softmax across tags.
/// Column b of `raw` / `normalized` is the map of subtype_order[b] over latent indices.
struct AttentionStack {
    std::vector<std::string> subtype_order;
    int height = 0;
    int width = 0;
    double tau = kDefaultTau;
    Eigen::MatrixXd raw;
    Eigen::MatrixXd normalized;
    Eigen::VectorXd dominant;
    std::vector<Eigen::Index> dominant_arg; // which subtype attains the max at each index

    Eigen::Index tags() const noexcept { return normalized.cols(); }
    Eigen::Index indices() const noexcept { return normalized.rows(); }
};

/// A_b[p] = exp(tau * raw_b[p]) / sum_i exp(tau * raw_i[p]), evaluated with max subtraction.
inline AttentionStack normalize_attention(const Eigen::MatrixXd& raw, std::vector<std::string> subtype_order,
                                          int height, int width, double tau = kDefaultTau)
{
    require(raw.cols() >= 1, "attention normalization needs at least one background tag");
    require(raw.rows() == static_cast<Eigen::Index>(height) * width, "attention maps do not match latent grid");
    require(static_cast<Eigen::Index>(subtype_order.size()) == raw.cols(), "one tag name per attention map required");
    require(raw.allFinite(), "raw attention must be finite");
    require(std::isfinite(tau) && tau > 0.0, "temperature must be positive");

    AttentionStack s;
    s.subtype_order = std::move(subtype_order);
    s.height = height;
    s.width = width;
    s.tau = tau;
    s.raw = raw;
    s.normalized.resize(raw.rows(), raw.cols());
    s.dominant.resize(raw.rows());
    s.dominant_arg.resize(static_cast<std::size_t>(raw.rows()));
    for (Eigen::Index p = 0; p < raw.rows(); ++p) {
        const Eigen::RowVectorXd logits = tau * raw.row(p);
        const Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
        s.normalized.row(p) = e / e.sum();
        Eigen::Index arg = 0;
        s.dominant[p] = s.normalized.row(p).maxCoeff(&arg);
        s.dominant_arg[static_cast<std::size_t>(p)] = arg;
    }
    return s;
}

/// Pulls a gradient w.r.t. the normalized maps back to the raw maps.
inline Eigen::MatrixXd softmax_backward(const AttentionStack& att, const Eigen::MatrixXd& grad_normalized)
{
    Eigen::MatrixXd out(grad_normalized.rows(), grad_normalized.cols());
    for (Eigen::Index p = 0; p < out.rows(); ++p) {
        const auto a = att.normalized.row(p);
        const double inner = a.dot(grad_normalized.row(p));
        out.row(p) = att.tau * a.array() * (grad_normalized.row(p).array() - inner);
    }
    return out;
}

namespace detail {

inline void check_labels(const LabelMap& labels, int height, int width)
{
    require(labels.height() == height && labels.width() == width, "label map is not at latent resolution");
}

inline std::vector<double> valid_indicator(const LabelMap& labels)
{
    std::vector<double> v(labels.size());
    for (std::size_t p = 0; p < labels.size(); ++p)
        v[p] = labels[p] == Label::non_target ? 0.0 : 1.0;
    return v;
}

} // namespace detail

/// Mean over background indices of the squared channel-vector distance.
inline double recon_loss(const LatentTensor& z, const LatentTensor& z_hat, const LabelMap& labels)
{
    require(z.same_shape(z_hat), "latent shapes differ");
    detail::check_labels(labels, z.height, z.width);
    const std::size_t n = labels.count(Label::background);
    if (n == 0)
        fail(ErrorCode::degenerate_scene, "no background indices at latent resolution");
    double sum = 0.0;
    for (std::size_t p = 0; p < labels.size(); ++p)
        if (labels[p] == Label::background)
            sum += (z_hat.values.row(static_cast<Eigen::Index>(p)) - z.values.row(static_cast<Eigen::Index>(p))).squaredNorm();
    return sum / static_cast<double>(n);
}

inline Eigen::MatrixXd recon_loss_grad(const LatentTensor& z, const LatentTensor& z_hat, const LabelMap& labels)
{
    require(z.same_shape(z_hat), "latent shapes differ");
    detail::check_labels(labels, z.height, z.width);
    const std::size_t n = labels.count(Label::background);
    if (n == 0)
        fail(ErrorCode::degenerate_scene, "no background indices at latent resolution");
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(z.values.rows(), z.values.cols());
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const auto i = static_cast<Eigen::Index>(p);
        if (labels[p] == Label::background)
            g.row(i) = 2.0 / static_cast<double>(n) * (z_hat.values.row(i) - z.values.row(i));
    }
    return g;
}

/// 1 - Dice(A_dom, indicator of target-or-background indices).
inline double align_loss(const AttentionStack& att, const LabelMap& labels)
{
    detail::check_labels(labels, att.height, att.width);
    const auto valid = detail::valid_indicator(labels);
    return 1.0 - dice(std::span<const double>(att.dominant.data(), static_cast<std::size_t>(att.dominant.size())), valid);
}

/// Gradient w.r.t. the normalized maps; the max routes it to the arg-max subtype.
inline Eigen::MatrixXd align_loss_grad(const AttentionStack& att, const LabelMap& labels)
{
    detail::check_labels(labels, att.height, att.width);
    const auto valid = detail::valid_indicator(labels);
    const auto g_dom = dice_grad_x(std::span<const double>(att.dominant.data(), static_cast<std::size_t>(att.dominant.size())), valid);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(att.indices(), att.tags());
    for (Eigen::Index p = 0; p < att.indices(); ++p)
        g(p, att.dominant_arg[static_cast<std::size_t>(p)]) = -g_dom[static_cast<std::size_t>(p)];
    return g;
}

struct DiversityTerm {
    double loss;
    Eigen::Index weakest_subtype; // argmin_b S_b
    Eigen::Index peak_index;      // where S_b of that subtype is attained
    std::vector<double> subtype_peaks;
};

/// S_b = max over target indices of A_b; the loss is 1 - min_b S_b.
inline DiversityTerm diversity_term(const AttentionStack& att, const LabelMap& labels)
{
    detail::check_labels(labels, att.height, att.width);
    if (labels.count(Label::target) == 0)
        fail(ErrorCode::degenerate_scene, "no target indices at latent resolution");
    DiversityTerm term{0.0, 0, 0, std::vector<double>(static_cast<std::size_t>(att.tags()), -1.0)};
    std::vector<Eigen::Index> peak_at(static_cast<std::size_t>(att.tags()), 0);
    for (Eigen::Index b = 0; b < att.tags(); ++b) {
        for (std::size_t p = 0; p < labels.size(); ++p) {
            if (labels[p] != Label::target)
                continue;
            const double v = att.normalized(static_cast<Eigen::Index>(p), b);
            if (v > term.subtype_peaks[static_cast<std::size_t>(b)]) {
                term.subtype_peaks[static_cast<std::size_t>(b)] = v;
                peak_at[static_cast<std::size_t>(b)] = static_cast<Eigen::Index>(p);
            }
        }
    }
    for (Eigen::Index b = 1; b < att.tags(); ++b)
        if (term.subtype_peaks[static_cast<std::size_t>(b)] < term.subtype_peaks[static_cast<std::size_t>(term.weakest_subtype)])
            term.weakest_subtype = b;
    term.peak_index = peak_at[static_cast<std::size_t>(term.weakest_subtype)];
    term.loss = 1.0 - term.subtype_peaks[static_cast<std::size_t>(term.weakest_subtype)];
    return term;
}

inline double div_loss(const AttentionStack& att, const LabelMap& labels) { return diversity_term(att, labels).loss; }

inline Eigen::MatrixXd div_loss_grad(const AttentionStack& att, const LabelMap& labels)
{
    const auto term = diversity_term(att, labels);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(att.indices(), att.tags());
    g(term.peak_index, term.weakest_subtype) = -1.0;
    return g;
}

struct LossBreakdown {
    double l_recon = 0.0;
    double l_align = 0.0;
    double l_div = 0.0;
    double l_puzzle = 0.0;
    double l_total = 0.0;
    double lambda = kDefaultLambda;
    bool puzzle_skipped = false;

    bool finite() const
    {
        return std::isfinite(l_recon) && std::isfinite(l_align) && std::isfinite(l_div) && std::isfinite(l_total);
    }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b)
{
    j = nlohmann::json{{"l_recon", b.l_recon}, {"l_align", b.l_align}, {"l_div", b.l_div},
                       {"l_puzzle", b.l_puzzle}, {"l_total", b.l_total}, {"lambda", b.lambda},
                       {"puzzle_skipped", b.puzzle_skipped}};
}

inline void from_json(const nlohmann::json& j, LossBreakdown& b)
{
    j.at("l_recon").get_to(b.l_recon);
    j.at("l_align").get_to(b.l_align);
    j.at("l_div").get_to(b.l_div);
    j.at("l_puzzle").get_to(b.l_puzzle);
    j.at("l_total").get_to(b.l_total);
    j.at("lambda").get_to(b.lambda);
    b.puzzle_skipped = j.value("puzzle_skipped", false);
}

/// Combines the terms. Without attention (no background subtypes) the puzzle terms are zero and flagged.
inline LossBreakdown total_loss(const LatentTensor& z, const LatentTensor& z_hat,
                                const std::optional<AttentionStack>& att, const LabelMap& labels,
                                double lambda = kDefaultLambda)
{
    LossBreakdown out;
    out.lambda = lambda;
    out.l_recon = recon_loss(z, z_hat, labels);
    if (att && att->tags() > 0) {
        out.l_align = align_loss(*att, labels);
        out.l_div = div_loss(*att, labels);
    } else {
        out.puzzle_skipped = true;
    }
    out.l_puzzle = out.l_align + out.l_div;
    out.l_total = out.l_recon + lambda * out.l_puzzle;
    return out;
}

/// Loss value plus gradients w.r.t. the predicted latent and the raw (pre-softmax) attention maps.
struct ObjectiveEvaluation {
    LossBreakdown losses;
    AttentionStack attention;
    Eigen::MatrixXd grad_z_hat;
    Eigen::MatrixXd grad_raw_attention;
};

inline ObjectiveEvaluation evaluate_objective(const LatentTensor& z, const LatentTensor& z_hat,
                                              const Eigen::MatrixXd& raw_attention,
                                              const std::vector<std::string>& subtype_order,
                                              const LabelMap& labels, double lambda = kDefaultLambda,
                                              double tau = kDefaultTau)
{
    ObjectiveEvaluation ev;
    ev.grad_z_hat = recon_loss_grad(z, z_hat, labels);
    if (raw_attention.cols() > 0) {
        ev.attention = normalize_attention(raw_attention, subtype_order, z.height, z.width, tau);
        ev.losses = total_loss(z, z_hat, ev.attention, labels, lambda);
        const Eigen::MatrixXd g_norm = align_loss_grad(ev.attention, labels) + div_loss_grad(ev.attention, labels);
        ev.grad_raw_attention = lambda * softmax_backward(ev.attention, g_norm);
    } else {
        ev.losses = total_loss(z, z_hat, std::nullopt, labels, lambda);
        ev.grad_raw_attention = Eigen::MatrixXd::Zero(raw_attention.rows(), 0);
    }
    return ev;
}

} // namespace eraselora
