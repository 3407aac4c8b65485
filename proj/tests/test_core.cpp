#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "eraselora/digest.hpp"
#include "eraselora/label_map.hpp"
#include "eraselora/png_io.hpp"

#include "oracles.hpp"

using namespace eraselora;

namespace {

LabelMap random_labels(std::mt19937_64& rng, int h, int w)
{
    LabelMap m(h, w);
    std::uniform_int_distribution<int> pick(0, 2);
    for (std::size_t i = 0; i < m.size(); ++i)
        m[i] = static_cast<Label>(pick(rng));
    return m;
}

std::filesystem::path scratch_dir(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("eraselora_core_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST(BuildLabelMap, EmptyMasksGiveAllBackground)
{
    const auto map = build_label_map(BinaryMask(5, 7), BinaryMask(5, 7));
    EXPECT_EQ(map.count(Label::background), 35u);
}

TEST(BuildLabelMap, FullTargetOverridesNonTarget)
{
    const auto map = build_label_map(BinaryMask(4, 4, 1), BinaryMask(4, 4, 1));
    EXPECT_EQ(map.count(Label::target), 16u);
}

TEST(BuildLabelMap, FourByFourGridMatchesCellEnumeration)
{
    BinaryMask target(4, 4), non_target(4, 4);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
            target.set(y, x, true);
    for (int x = 0; x < 4; ++x)
        non_target.set(3, x, true);
    const auto map = build_label_map(target, non_target);
    EXPECT_EQ(map, oracle::build_label_map(target, non_target));
    EXPECT_EQ(map.count(Label::target), 4u);
    EXPECT_EQ(map.count(Label::non_target), 4u);
    EXPECT_EQ(map.count(Label::background), 8u);
}

TEST(BuildLabelMap, RejectsShapeMismatch)
{
    EXPECT_THROW(build_label_map(BinaryMask(4, 4), BinaryMask(4, 5)), Error);
}

TEST(BuildLabelMap, IdempotentOnItsOwnDecodedMasks)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto map = random_labels(rng, 9, 11);
        const auto again = build_label_map(map.mask_of(Label::target), map.mask_of(Label::non_target));
        EXPECT_EQ(again, map);
    }
}

TEST(BuildLabelMap, EveryIndexCarriesExactlyOneLabel)
{
    std::mt19937_64 rng(5);
    BinaryMask t(12, 12), n(12, 12);
    std::bernoulli_distribution coin(0.4);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            t.set(y, x, coin(rng));
            n.set(y, x, coin(rng));
        }
    const auto map = build_label_map(t, n);
    const auto h = map.histogram();
    EXPECT_EQ(h[0] + h[1] + h[2], map.size());
}

TEST(Downsample, ConstantBackgroundStaysBackground)
{
    const LabelMap map(16, 16);
    for (auto [h, w] : {std::pair{1, 1}, {4, 4}, {3, 5}, {16, 16}})
        EXPECT_EQ(downsample_label_map(map, h, w).count(Label::background), static_cast<std::size_t>(h * w));
}

TEST(Downsample, SingleTargetPixelSurvivesAsOneCell)
{
    LabelMap map(8, 8);
    map.set(5, 2, Label::target);
    const auto small = downsample_label_map(map, 2, 2);
    EXPECT_EQ(small.count(Label::target), 1u);
    EXPECT_EQ(small.at(1, 0), Label::target);
}

TEST(Downsample, RandomSixteenToFourMatchesHistogramOracle)
{
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto map = random_labels(rng, 16, 16);
        EXPECT_EQ(downsample_label_map(map, 4, 4), oracle::downsample_label_map(map, 4, 4));
    }
}

TEST(Downsample, TieBreaksTowardLowerLabel)
{
    LabelMap map(2, 2);
    map.set(0, 0, Label::non_target);
    map.set(0, 1, Label::non_target);
    EXPECT_EQ(downsample_label_map(map, 1, 1).at(0, 0), Label::non_target);
    map.set(1, 0, Label::target);
    map.set(1, 1, Label::target);
    EXPECT_EQ(downsample_label_map(map, 1, 1).at(0, 0), Label::target);
}

TEST(Downsample, NonDividingSizesMatchOracle)
{
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        const auto map = random_labels(rng, 13, 10);
        EXPECT_EQ(downsample_label_map(map, 5, 3), oracle::downsample_label_map(map, 5, 3));
    }
}

TEST(Downsample, RejectsUpsampling)
{
    EXPECT_THROW(downsample_label_map(LabelMap(4, 4), 8, 4), Error);
}

TEST(Dice, SelfSimilarityOfOnes)
{
    const std::vector<double> ones(100, 1.0);
    EXPECT_NEAR(dice(ones, ones), 1.0, 1e-7);
}

TEST(Dice, EmptyIntersectionIsZero)
{
    const std::vector<double> x{0.3, 0.9, 1.0}, y(3, 0.0);
    EXPECT_EQ(dice(x, y), 0.0);
}

TEST(Dice, HandEvaluatedPair)
{
    const std::vector<double> x{1.0, 0.5}, y{0.5, 0.5};
    EXPECT_NEAR(dice(x, y), 0.6, 1e-6);
}

TEST(Dice, RejectsOutOfRangeValues)
{
    const std::vector<double> bad{-0.1, 0.5}, ok{0.5, 0.5};
    EXPECT_THROW(dice(bad, ok), Error);
    const std::vector<double> big{1.5, 0.5};
    EXPECT_THROW(dice(ok, big), Error);
}

TEST(Dice, SymmetricAndMatchesOracle)
{
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(36), y(36);
        for (auto& v : x)
            v = u(rng);
        for (auto& v : y)
            v = u(rng);
        EXPECT_EQ(dice(x, y), dice(y, x));
        EXPECT_NEAR(dice(x, y), oracle::dice(x, y), 1e-12);
    }
}

TEST(Dice, SelfSimilarityOfBinaryMapsIsWithinEpsilonOfOne)
{
    std::mt19937_64 rng(8);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(49, 0.0);
        x[static_cast<std::size_t>(trial % 49)] = 1.0;
        for (auto& v : x)
            v = std::max(v, coin(rng) ? 1.0 : 0.0);
        EXPECT_GE(dice(x, x), 1.0 - kDiceEpsilon);
    }
}

TEST(TagReportValidation, DetectsCaseInsensitiveOverlap)
{
    TagReport r{"Dog", {"person"}, {"grass", "PERSON"}, ""};
    EXPECT_THROW(r.validate(), Error);
    r.background_tags = {"grass"};
    EXPECT_NO_THROW(r.validate());
    r.target_tag.clear();
    EXPECT_THROW(r.validate(), Error);
}

TEST(ImageTensorValidation, RejectsTinyOrNonFiniteImages)
{
    EXPECT_THROW(ImageTensor(4, 16).validate(), Error);
    ImageTensor img(8, 8);
    EXPECT_NO_THROW(img.validate());
    img.at(1, 1, 1) = std::nan("");
    EXPECT_THROW(img.validate(), Error);
    img.at(1, 1, 1) = 1.2;
    EXPECT_THROW(img.validate(), Error);
}

TEST(LabelPng, RoundTripsExactValues)
{
    std::mt19937_64 rng(9);
    const auto map = random_labels(rng, 17, 23);
    const auto dir = scratch_dir("label");
    write_label_png(dir / "labels.png", map);
    EXPECT_EQ(read_label_png(dir / "labels.png"), map);
}

TEST(LabelPng, RejectsValueThree)
{
    Bytes pixels(64, 2);
    pixels[10] = 3;
    const Bytes png = detail::encode_png(pixels.data(), 8, 8, PNG_FORMAT_GRAY);
    EXPECT_THROW(decode_label_png(png), Error);
}

TEST(LabelPng, RejectsColourPng)
{
    const Bytes png = encode_image_png(ImageTensor(8, 8, 3, 0.0));
    EXPECT_THROW(decode_label_png(png), Error);
}

TEST(ImagePng, RoundTripWithinQuantisation)
{
    ImageTensor img(9, 10, 3);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.values())
        v = u(rng);
    const auto back = decode_image_png(encode_image_png(img));
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.values().size(); ++i)
        EXPECT_NEAR(back.values()[i], img.values()[i], 0.5 / 255.0 + 1e-12);
}

TEST(Digest, KnownSha256AndBase64)
{
    EXPECT_EQ(sha256_hex(std::string_view("abc")),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const std::string text = "hello world";
    const auto encoded = base64_encode(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    EXPECT_EQ(encoded, "aGVsbG8gd29ybGQ=");
    const auto decoded = base64_decode("data:text/plain;base64," + encoded);
    EXPECT_EQ(std::string(decoded.begin(), decoded.end()), text);
}
