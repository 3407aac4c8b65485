#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "eraselora/error.hpp"

namespace eraselora {

/// Interleaved H x W x C image with values in [0,1].
class ImageTensor {
public:
    ImageTensor() = default;
    ImageTensor(int height, int width, int channels = 3, double fill = 0.0)
        : height_(height), width_(width), channels_(channels),
          values_(static_cast<std::size_t>(height) * width * channels, fill)
    {
        require(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const noexcept { return values_.empty(); }

    double& at(int y, int x, int c) { return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }
    double at(int y, int x, int c) const { return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }

    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool same_shape(const ImageTensor& other) const noexcept
    {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    /// Checks the ingestion invariants: finite values in [0,1], both sides at least 8.
    void validate() const
    {
        require(height_ >= 8 && width_ >= 8, "image must be at least 8x8");
        for (double v : values_)
            require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "image values must be finite and within [0,1]");
    }

    void clamp01()
    {
        for (double& v : values_)
            v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    }

    bool operator==(const ImageTensor&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> values_;
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width, std::uint8_t fill = 0)
        : height_(height), width_(width), values_(static_cast<std::size_t>(height) * width, fill ? 1 : 0)
    {
        require(height > 0 && width > 0, "mask dimensions must be positive");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }

    bool at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x] != 0; }
    void set(int y, int x, bool on) { values_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }
    bool operator[](std::size_t i) const { return values_[i] != 0; }

    const std::vector<std::uint8_t>& values() const noexcept { return values_; }

    std::size_t area() const
    {
        return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
    }

    bool same_shape(const BinaryMask& other) const noexcept
    {
        return height_ == other.height_ && width_ == other.width_;
    }

    BinaryMask& operator|=(const BinaryMask& other)
    {
        require(same_shape(other), "mask shape mismatch in union");
        for (std::size_t i = 0; i < values_.size(); ++i)
            values_[i] = values_[i] | other.values_[i];
        return *this;
    }

    /// Removes every pixel set in `other`.
    BinaryMask& subtract(const BinaryMask& other)
    {
        require(same_shape(other), "mask shape mismatch in subtraction");
        for (std::size_t i = 0; i < values_.size(); ++i)
            values_[i] = values_[i] & static_cast<std::uint8_t>(!other.values_[i]);
        return *this;
    }

    bool operator==(const BinaryMask&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> values_;
};

enum class Label : std::uint8_t { target = 0, non_target = 1, background = 2 };

/// Ternary region labels over a pixel or latent grid (row-major).
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int height, int width, Label fill = Label::background)
        : height_(height), width_(width), labels_(static_cast<std::size_t>(height) * width, fill)
    {
        require(height > 0 && width > 0, "label map dimensions must be positive");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return labels_.size(); }

    Label at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    void set(int y, int x, Label l) { labels_[static_cast<std::size_t>(y) * width_ + x] = l; }
    Label operator[](std::size_t i) const { return labels_[i]; }
    Label& operator[](std::size_t i) { return labels_[i]; }

    const std::vector<Label>& labels() const noexcept { return labels_; }

    std::size_t count(Label l) const
    {
        return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), l));
    }

    std::array<std::size_t, 3> histogram() const
    {
        std::array<std::size_t, 3> h{};
        for (Label l : labels_)
            ++h[static_cast<std::size_t>(l)];
        return h;
    }

    BinaryMask mask_of(Label l) const
    {
        BinaryMask m(height_, width_);
        for (int y = 0; y < height_; ++y)
            for (int x = 0; x < width_; ++x)
                m.set(y, x, at(y, x) == l);
        return m;
    }

    bool operator==(const LabelMap&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<Label> labels_;
};

inline std::string to_lower(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

/// Tag classification of one image/mask pair.
struct TagReport {
    std::string target_tag;
    std::vector<std::string> non_target_tags;
    std::vector<std::string> background_tags;
    std::string raw_response;

    /// Throws invalid_input when a list repeats a tag or two lists share one (case-insensitive).
    void validate() const
    {
        require(!target_tag.empty(), "target tag must be non-empty");
        std::set<std::string> seen{to_lower(target_tag)};
        for (const auto* list : {&non_target_tags, &background_tags}) {
            for (const auto& tag : *list) {
                require(!tag.empty(), "tags must be non-empty");
                require(seen.insert(to_lower(tag)).second, "tag '" + tag + "' appears more than once across tag lists");
            }
        }
    }

    bool operator==(const TagReport&) const = default;
};

struct SampleManifestEntry {
    std::string sample_id;
    std::filesystem::path image_path;
    std::filesystem::path label_mask_path;
    std::optional<std::filesystem::path> result_path;
    std::optional<std::filesystem::path> ground_truth_path;
};

} // namespace eraselora
