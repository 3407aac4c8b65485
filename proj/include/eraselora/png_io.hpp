#pragma once

// PNG encode/decode for images, binary masks and three-label masks.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "eraselora/types.hpp"

namespace eraselora {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(ErrorCode::invalid_input, "cannot open file: " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::string read_text_file(const std::filesystem::path& path)
{
    const Bytes bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

inline void write_file_bytes(const std::filesystem::path& path, const Bytes& bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        fail(ErrorCode::invalid_input, "cannot write file: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_file_text(const std::filesystem::path& path, const std::string& text)
{
    write_file_bytes(path, Bytes(text.begin(), text.end()));
}

namespace detail {

struct PngHeader {
    std::uint32_t width;
    std::uint32_t height;
    int bit_depth;
    int color_type;
};

inline PngHeader peek_png_header(const Bytes& bytes)
{
    static constexpr std::uint8_t signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 33 || std::memcmp(bytes.data(), signature, 8) != 0 ||
        std::memcmp(bytes.data() + 12, "IHDR", 4) != 0)
        fail(ErrorCode::invalid_input, "not a PNG file");
    auto be32 = [&](std::size_t off) {
        return (std::uint32_t{bytes[off]} << 24) | (std::uint32_t{bytes[off + 1]} << 16) |
               (std::uint32_t{bytes[off + 2]} << 8) | std::uint32_t{bytes[off + 3]};
    };
    return {be32(16), be32(20), bytes[24], bytes[25]};
}

struct DecodedPng {
    int width = 0;
    int height = 0;
    int channels = 0;
    Bytes pixels;
};

inline DecodedPng decode_png(const Bytes& bytes, std::uint32_t format)
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        fail(ErrorCode::invalid_input, std::string("PNG decode failed: ") + image.message);
    image.format = format;
    DecodedPng out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.channels = static_cast<int>(PNG_IMAGE_SAMPLE_CHANNELS(format));
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&image);
        fail(ErrorCode::invalid_input, std::string("PNG decode failed: ") + image.message);
    }
    return out;
}

inline Bytes encode_png(const std::uint8_t* pixels, int width, int height, std::uint32_t format)
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels, 0, nullptr))
        fail(ErrorCode::invalid_input, std::string("PNG encode failed: ") + image.message);
    Bytes out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels, 0, nullptr))
        fail(ErrorCode::invalid_input, std::string("PNG encode failed: ") + image.message);
    out.resize(size);
    return out;
}

} // namespace detail

inline std::uint8_t quantize_unit(double v)
{
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Decodes any PNG to an RGB image in [0,1]; alpha is dropped, gray is replicated.
inline ImageTensor decode_image_png(const Bytes& bytes)
{
    const auto png = detail::decode_png(bytes, PNG_FORMAT_RGB);
    ImageTensor img(png.height, png.width, 3);
    for (std::size_t i = 0; i < png.pixels.size(); ++i)
        img.values()[i] = png.pixels[i] / 255.0;
    return img;
}

inline Bytes encode_image_png(const ImageTensor& img)
{
    require(img.channels() == 3 || img.channels() == 1, "PNG export supports 1 or 3 channels");
    Bytes pixels(img.values().size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = quantize_unit(img.values()[i]);
    return detail::encode_png(pixels.data(), img.width(), img.height(),
                              img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
}

inline ImageTensor read_image_png(const std::filesystem::path& path) { return decode_image_png(read_file_bytes(path)); }
inline void write_image_png(const std::filesystem::path& path, const ImageTensor& img)
{
    write_file_bytes(path, encode_image_png(img));
}

/// Binary masks: any PNG; a pixel is set when its gray value is non-zero.
inline BinaryMask decode_mask_png(const Bytes& bytes)
{
    const auto png = detail::decode_png(bytes, PNG_FORMAT_GRAY);
    BinaryMask mask(png.height, png.width);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            mask.set(y, x, png.pixels[static_cast<std::size_t>(y) * png.width + x] != 0);
    return mask;
}

/// Written as 0 / 255 so the file is viewable.
inline Bytes encode_mask_png(const BinaryMask& mask)
{
    Bytes pixels(mask.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = mask[i] ? 255 : 0;
    return detail::encode_png(pixels.data(), mask.width(), mask.height(), PNG_FORMAT_GRAY);
}

inline BinaryMask read_mask_png(const std::filesystem::path& path) { return decode_mask_png(read_file_bytes(path)); }
inline void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask)
{
    write_file_bytes(path, encode_mask_png(mask));
}

/// Three-label masks: 8-bit single-channel PNG holding exactly 0, 1 or 2 per pixel.
inline LabelMap decode_label_png(const Bytes& bytes)
{
    const auto header = detail::peek_png_header(bytes);
    if (header.bit_depth != 8 || header.color_type != PNG_COLOR_TYPE_GRAY)
        fail(ErrorCode::invalid_input, "label mask must be an 8-bit single-channel PNG");
    const auto png = detail::decode_png(bytes, PNG_FORMAT_GRAY);
    LabelMap map(png.height, png.width);
    for (std::size_t i = 0; i < png.pixels.size(); ++i) {
        const std::uint8_t v = png.pixels[i];
        if (v > 2)
            fail(ErrorCode::invalid_input, "label mask holds value " + std::to_string(v) + " outside {0,1,2}");
        map[i] = static_cast<Label>(v);
    }
    return map;
}

inline Bytes encode_label_png(const LabelMap& map)
{
    Bytes pixels(map.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<std::uint8_t>(map[i]);
    return detail::encode_png(pixels.data(), map.width(), map.height(), PNG_FORMAT_GRAY);
}

inline LabelMap read_label_png(const std::filesystem::path& path) { return decode_label_png(read_file_bytes(path)); }
inline void write_label_png(const std::filesystem::path& path, const LabelMap& map)
{
    write_file_bytes(path, encode_label_png(map));
}

} // namespace eraselora
