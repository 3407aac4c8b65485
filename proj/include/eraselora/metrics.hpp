#pragma once

// Object-removal metrics: feature-cosine background/foreground similarity, SSIM-based
// background preservation and paired PSNR/SSIM over the reconstructed region.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eraselora/types.hpp"

namespace eraselora {

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual Eigen::VectorXd extract(const ImageTensor& region) const = 0;
};

/// Soft per-channel colour histogram followed by a seeded random projection.
/// Pixels that are exactly zero in every channel are region padding and are skipped.
class ToyHistogramExtractor final : public FeatureExtractor {
public:
    static constexpr int kBins = 16;
    static constexpr int kDim = 64;

    explicit ToyHistogramExtractor(std::uint64_t seed = 0) : projection_(kDim, 3 * kBins)
    {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(kDim)));
        for (Eigen::Index r = 0; r < projection_.rows(); ++r)
            for (Eigen::Index c = 0; c < projection_.cols(); ++c)
                projection_(r, c) = normal(rng);
    }

    std::string name() const override { return "toy-histogram"; }

    Eigen::VectorXd extract(const ImageTensor& region) const override
    {
        return projection_ * histogram(region);
    }

    static Eigen::VectorXd histogram(const ImageTensor& region)
    {
        require(region.channels() == 3, "histogram extractor expects RGB");
        Eigen::VectorXd h = Eigen::VectorXd::Zero(3 * kBins);
        const double width = 1.0 / kBins;
        std::size_t counted = 0;
        for (int y = 0; y < region.height(); ++y)
            for (int x = 0; x < region.width(); ++x) {
                if (region.at(y, x, 0) == 0.0 && region.at(y, x, 1) == 0.0 && region.at(y, x, 2) == 0.0)
                    continue;
                ++counted;
                for (int c = 0; c < 3; ++c) {
                    const double v = region.at(y, x, c);
                    for (int b = 0; b < kBins; ++b) {
                        const double d = (v - (b + 0.5) * width) / width;
                        h[c * kBins + b] += std::exp(-0.5 * d * d);
                    }
                }
            }
        if (counted > 0)
            h /= static_cast<double>(counted);
        return h;
    }

private:
    Eigen::MatrixXd projection_;
};

/// Index sets derived from a pixel-resolution label map.
struct RegionSets {
    BinaryMask background;    // label 2
    BinaryMask reconstructed; // label 0
    BinaryMask foreground;    // labels 0 and 1
    BinaryMask unmasked;      // labels 1 and 2

    static RegionSets from_labels(const LabelMap& labels)
    {
        RegionSets r{BinaryMask(labels.height(), labels.width()), BinaryMask(labels.height(), labels.width()),
                     BinaryMask(labels.height(), labels.width()), BinaryMask(labels.height(), labels.width())};
        for (int y = 0; y < labels.height(); ++y)
            for (int x = 0; x < labels.width(); ++x) {
                const Label l = labels.at(y, x);
                r.background.set(y, x, l == Label::background);
                r.reconstructed.set(y, x, l == Label::target);
                r.foreground.set(y, x, l != Label::background);
                r.unmasked.set(y, x, l != Label::target);
            }
        return r;
    }

    /// Subset / disjointness / coverage relations between the four sets.
    bool consistent() const
    {
        for (std::size_t i = 0; i < background.size(); ++i) {
            if (reconstructed[i] && !foreground[i])
                return false;
            if (background[i] == foreground[i])
                return false;
            if (unmasked[i] == reconstructed[i])
                return false;
        }
        return true;
    }
};

/// Crops to the mask's bounding box and zeroes pixels outside the mask.
inline ImageTensor restrict_to_region(const ImageTensor& image, const BinaryMask& mask)
{
    require(image.height() == mask.height() && image.width() == mask.width(), "region mask does not match image");
    int y0 = mask.height(), y1 = -1, x0 = mask.width(), x1 = -1;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.at(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0)
        fail(ErrorCode::degenerate_scene, "empty region cannot be presented to a feature extractor");
    ImageTensor crop(y1 - y0 + 1, x1 - x0 + 1, image.channels());
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (mask.at(y, x))
                for (int c = 0; c < image.channels(); ++c)
                    crop.at(y - y0, x - x0, c) = image.at(y, x, c);
    return crop;
}

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    require(a.size() == b.size(), "feature vectors differ in dimension");
    const double na = a.norm(), nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0))
        fail(ErrorCode::degenerate_scene, "cosine similarity of a zero feature vector");
    return a.dot(b) / (na * nb);
}

inline double bg_sim(const FeatureExtractor& f, const ImageTensor& input, const ImageTensor& output,
                     const RegionSets& regions)
{
    require(input.same_shape(output), "input and output images differ in shape");
    return cosine_similarity(f.extract(restrict_to_region(input, regions.background)),
                             f.extract(restrict_to_region(output, regions.reconstructed)));
}

/// (1 - bg_sim) * cos(f(input[F]), f(output[R])), given an already computed bg_sim.
inline double fg_sim_weighted(double bg, const FeatureExtractor& f, const ImageTensor& input,
                              const ImageTensor& output, const RegionSets& regions)
{
    const double fg_cos = cosine_similarity(f.extract(restrict_to_region(input, regions.foreground)),
                                            f.extract(restrict_to_region(output, regions.reconstructed)));
    return (1.0 - bg) * fg_cos;
}

inline double fg_sim(const FeatureExtractor& f, const ImageTensor& input, const ImageTensor& output,
                     const RegionSets& regions)
{
    return fg_sim_weighted(bg_sim(f, input, output, regions), f, input, output, regions);
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

struct SsimParams {
    int radius = 5;     // 11x11 window
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

/// Per-pixel SSIM averaged over channels. Windows are clipped at the border and the
/// Gaussian weights renormalised over the clipped window.
inline std::vector<double> ssim_map(const ImageTensor& a, const ImageTensor& b, const SsimParams& params = {})
{
    require(a.same_shape(b), "SSIM inputs differ in shape");
    const int h = a.height(), w = a.width(), channels = a.channels();
    const int r = params.radius;
    std::vector<double> kernel(static_cast<std::size_t>(2 * r + 1));
    for (int i = -r; i <= r; ++i)
        kernel[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * params.sigma * params.sigma));
    const double c1 = std::pow(params.k1 * params.dynamic_range, 2);
    const double c2 = std::pow(params.k2 * params.dynamic_range, 2);

    // separable weighted mean with border renormalisation
    auto blur = [&](const std::vector<double>& src) {
        std::vector<double> tmp(src.size()), out(src.size());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0, ws = 0.0;
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= w)
                        continue;
                    const double k = kernel[static_cast<std::size_t>(dx + r)];
                    s += k * src[static_cast<std::size_t>(y) * w + xx];
                    ws += k;
                }
                tmp[static_cast<std::size_t>(y) * w + x] = s / ws;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0, ws = 0.0;
                for (int dy = -r; dy <= r; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= h)
                        continue;
                    const double k = kernel[static_cast<std::size_t>(dy + r)];
                    s += k * tmp[static_cast<std::size_t>(yy) * w + x];
                    ws += k;
                }
                out[static_cast<std::size_t>(y) * w + x] = s / ws;
            }
        return out;
    };

    std::vector<double> result(static_cast<std::size_t>(h) * w, 0.0);
    const std::size_t n = result.size();
    std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                xa[i] = a.at(y, x, c);
                xb[i] = b.at(y, x, c);
                xaa[i] = xa[i] * xa[i];
                xbb[i] = xb[i] * xb[i];
                xab[i] = xa[i] * xb[i];
            }
        const auto mu_a = blur(xa), mu_b = blur(xb), m_aa = blur(xaa), m_bb = blur(xbb), m_ab = blur(xab);
        for (std::size_t i = 0; i < n; ++i) {
            const double va = m_aa[i] - mu_a[i] * mu_a[i];
            const double vb = m_bb[i] - mu_b[i] * mu_b[i];
            const double cov = m_ab[i] - mu_a[i] * mu_b[i];
            const double s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
                             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
            result[i] += s / channels;
        }
    }
    return result;
}

/// Mean SSIM over windows centred inside `region`.
inline double ssim_over(const ImageTensor& a, const ImageTensor& b, const BinaryMask& region,
                        const SsimParams& params = {})
{
    require(region.height() == a.height() && region.width() == a.width(), "SSIM region does not match images");
    if (region.area() == 0)
        fail(ErrorCode::degenerate_scene, "SSIM region is empty");
    const auto map = ssim_map(a, b, params);
    double sum = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i)
        if (region[i])
            sum += map[i];
    return sum / static_cast<double>(region.area());
}

inline double bg_pres(const ImageTensor& input, const ImageTensor& output, const RegionSets& regions)
{
    return ssim_over(input, output, regions.unmasked);
}

/// PSNR over a region for a unit dynamic range; +infinity when the images agree there.
inline double psnr_over(const ImageTensor& a, const ImageTensor& b, const BinaryMask& region)
{
    require(a.same_shape(b), "PSNR inputs differ in shape");
    require(region.height() == a.height() && region.width() == a.width(), "PSNR region does not match images");
    if (region.area() == 0)
        fail(ErrorCode::degenerate_scene, "PSNR region is empty");
    double sum = 0.0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
            if (region.at(y, x))
                for (int c = 0; c < a.channels(); ++c) {
                    const double d = a.at(y, x, c) - b.at(y, x, c);
                    sum += d * d;
                }
    const double mse = sum / static_cast<double>(region.area() * static_cast<std::size_t>(a.channels()));
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

/// Slot for a learned perceptual metric; no implementation ships by default.
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    virtual double distance(const ImageTensor& a, const ImageTensor& b, const BinaryMask& region) const = 0;
};

struct PairedMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> lpips;
};

inline PairedMetrics paired_metrics(const ImageTensor& prediction, const ImageTensor& ground_truth,
                                    const RegionSets& regions, const PerceptualMetric* perceptual = nullptr)
{
    PairedMetrics m;
    m.psnr = psnr_over(prediction, ground_truth, regions.reconstructed);
    m.ssim = ssim_over(prediction, ground_truth, regions.reconstructed);
    if (perceptual)
        m.lpips = perceptual->distance(prediction, ground_truth, regions.reconstructed);
    return m;
}

} // namespace eraselora
