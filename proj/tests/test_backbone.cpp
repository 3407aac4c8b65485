#include <gtest/gtest.h>

#include <random>

#include "eraselora/digest.hpp"
#include "eraselora/lora.hpp"
#include "eraselora/metrics.hpp"
#include "eraselora/sampling.hpp"
#include "eraselora/scene.hpp"
#include "eraselora/toy_backbone.hpp"

using namespace eraselora;

namespace {

LatentTensor random_latent(std::mt19937_64& rng, double scale = 1.0)
{
    LatentTensor z(8, 8, 4);
    std::normal_distribution<double> n(0.0, scale);
    for (Eigen::Index i = 0; i < z.values.size(); ++i)
        z.values.data()[i] = n(rng);
    return z;
}

std::string tensor_hash(const DenoiseOutput& out)
{
    return sha256_hex(encode_tensor_archive({NamedTensor::from_matrix("z0_hat", out.z0_hat.values),
                                             NamedTensor::from_matrix("attention", out.raw_attention)}));
}

} // namespace

TEST(NoiseSchedule, VariancePreservingAtEveryStep)
{
    const NoiseSchedule s(50);
    for (int t = 0; t <= 50; ++t) {
        EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t), 1.0, 1e-9);
        EXPECT_GE(s.alpha(t), 0.0);
        EXPECT_LE(s.alpha(t), 1.0);
    }
    EXPECT_EQ(s.alpha(0), 1.0);
    EXPECT_EQ(s.sigma(0), 0.0);
    EXPECT_THROW(s.alpha(51), Error);
}

TEST(ToyBackbone, ZeroImageEncodesToZeroLatent)
{
    const ToyBackbone bb;
    const auto z = bb.encode(ImageTensor(64, 64, 3, 0.0));
    EXPECT_EQ(z.values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ToyBackbone, DecodeOfEncodeKeepsShape)
{
    const ToyBackbone bb;
    const auto scene = generate_scene(1);
    const auto back = bb.decode(bb.encode(scene.image));
    EXPECT_TRUE(back.same_shape(scene.image));
}

TEST(ToyBackbone, RejectsWrongResolution)
{
    const ToyBackbone bb;
    EXPECT_THROW(bb.encode(ImageTensor(32, 64, 3)), Error);
}

TEST(ToyBackbone, EncodeIsByteIdenticalAcrossInstances)
{
    const auto scene = generate_scene(2);
    const ToyBackbone a, b;
    const auto za = a.encode(scene.image), zb = b.encode(scene.image);
    EXPECT_EQ(sha256_hex(encode_tensor_archive({NamedTensor::from_matrix("z", za.values)})),
              sha256_hex(encode_tensor_archive({NamedTensor::from_matrix("z", zb.values)})));
    EXPECT_TRUE(za.values == zb.values);
}

TEST(ToyBackbone, UntrainedDenoiseOutputMatchesGoldenHash)
{
    ToyBackbone bb;
    std::mt19937_64 rng(42);
    const auto z = random_latent(rng);
    const std::vector<int> cond{bb.token_id("grass"), bb.token_id("sky")};
    const auto out = bb.denoise_step(z, 25, cond);
    EXPECT_EQ(tensor_hash(out), "965a68f5a60b4e1a7321d3df8ba917c3cc7b0ce48a9c717558c15fdb013eb6e6");
}

TEST(ToyBackbone, AttentionRowsAreDistributionsOverTokens)
{
    ToyBackbone bb;
    std::mt19937_64 rng(1);
    const std::vector<int> cond{1, 7, 99};
    const auto out = bb.denoise_step(random_latent(rng), 30, cond);
    ASSERT_EQ(out.raw_attention.rows(), 64);
    ASSERT_EQ(out.raw_attention.cols(), 3);
    EXPECT_GE(out.raw_attention.minCoeff(), 0.0);
    for (Eigen::Index p = 0; p < 64; ++p)
        EXPECT_NEAR(out.raw_attention.row(p).sum(), 1.0, 1e-12);
}

TEST(ToyBackbone, PatchAttentionIsReplicatedToLatentIndices)
{
    ToyBackbone bb;
    std::mt19937_64 rng(2);
    const std::vector<int> cond{3, 4};
    const auto out = bb.denoise_step(random_latent(rng), 10, cond);
    // latent (0,0), (0,1), (1,0), (1,1) form one 2x2 patch
    for (int p : {1, 8, 9})
        EXPECT_TRUE(out.raw_attention.row(p) == out.raw_attention.row(0));
}

TEST(ToyBackbone, TiedEmbeddingsGiveIdenticalMaps)
{
    ToyBackbone bb;
    bb.weight("token_embedding").row(11) = bb.weight("token_embedding").row(5);
    std::mt19937_64 rng(3);
    const std::vector<int> cond{5, 11, 20};
    const auto out = bb.denoise_step(random_latent(rng), 20, cond);
    EXPECT_TRUE(out.raw_attention.col(0) == out.raw_attention.col(1));
}

TEST(ToyBackbone, UnknownTokenIsRejected)
{
    ToyBackbone bb;
    std::mt19937_64 rng(4);
    const std::vector<int> bad{ToyBackbone::kVocab};
    EXPECT_THROW(bb.denoise_step(random_latent(rng), 10, bad), Error);
    const std::vector<int> none;
    EXPECT_THROW(bb.denoise_step(random_latent(rng), 10, none), Error);
}

TEST(ToyBackbone, ZeroNoisePredictionIsIdentity)
{
    ToyBackbone bb;
    std::mt19937_64 rng(5);
    const auto z = random_latent(rng, 0.3);
    const Eigen::MatrixXd noise = random_latent(rng).values;
    const auto z0 = bb.schedule().add_noise(z, noise, 0);
    const std::vector<int> cond{1};
    const auto out = bb.denoise_step(z0, 0, cond);
    EXPECT_LT((out.z0_hat.values - z.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ToyBackbone, DetachedAdaptersDoNotInfluenceOutput)
{
    ToyBackbone bb;
    std::mt19937_64 rng(6);
    const auto z = random_latent(rng);
    const std::vector<int> cond{2, 9};
    const auto before = bb.denoise_step(z, 17, cond);
    LoraState lora = inject_adapters(bb, 4, 1);
    for (auto& a : lora.adapters)
        a.up.setRandom();
    const auto after = bb.denoise_step(z, 17, cond);
    EXPECT_TRUE(before.z0_hat.values == after.z0_hat.values);
    EXPECT_TRUE(before.raw_attention == after.raw_attention);
}

TEST(ToyBackbone, ParameterCountBelowHundredThousand)
{
    const ToyBackbone bb;
    EXPECT_LT(bb.parameter_count(), 100000u);
    EXPECT_EQ(bb.attention_projections().size(), 8u);
}

// Backward pass against central differences of a random linear functional of the outputs.
TEST(ToyBackbone, WeightGradientsMatchFiniteDifferences)
{
    ToyBackbone bb;
    std::mt19937_64 rng(7);
    const auto z = random_latent(rng);
    const std::vector<int> cond{bb.token_id("grass"), bb.token_id("sky"), bb.token_id("fence")};
    const Eigen::MatrixXd gz = random_latent(rng).values;
    Eigen::MatrixXd ga(64, 3);
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < ga.size(); ++i)
        ga.data()[i] = n(rng);
    const int t = 30;
    auto objective = [&] {
        const auto out = bb.denoise_step(z, t, cond);
        return (out.z0_hat.values.array() * gz.array()).sum() + (out.raw_attention.array() * ga.array()).sum();
    };
    bb.denoise_step(z, t, cond);
    bb.backward(gz, ga);
    const auto grads = bb.last_weight_grads();
    std::uniform_int_distribution<int> idx(0, 31);
    for (const auto& name : ToyBackbone::projection_names()) {
        for (int k = 0; k < 4; ++k) {
            const int r = idx(rng), c = idx(rng);
            double& w = bb.weight(name)(r, c);
            const double keep = w, h = 1e-6;
            w = keep + h;
            const double up = objective();
            w = keep - h;
            const double down = objective();
            w = keep;
            const double fd = (up - down) / (2 * h);
            EXPECT_NEAR(grads.at(name)(r, c), fd, 1e-6 + 1e-5 * std::abs(fd)) << name << "(" << r << "," << c << ")";
        }
    }
}

TEST(ToyBackbone, AdapterGradientsMatchFiniteDifferences)
{
    ToyBackbone bb;
    LoraState lora = inject_adapters(bb, 3, 5);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& a : lora.adapters)
        for (Eigen::Index i = 0; i < a.up.size(); ++i)
            a.up.data()[i] = n(rng);
    ScopedAdapters attached(bb, lora);
    const auto z = random_latent(rng);
    const std::vector<int> cond{4, 8};
    const Eigen::MatrixXd gz = random_latent(rng).values;
    auto objective = [&] { return (bb.denoise_step(z, 22, cond).z0_hat.values.array() * gz.array()).sum(); };
    lora.zero_grad();
    bb.denoise_step(z, 22, cond);
    bb.backward(gz, Eigen::MatrixXd());
    for (auto& a : lora.adapters) {
        for (auto* which : {&a.down, &a.up}) {
            const Eigen::MatrixXd grad = which == &a.down ? a.grad_down : a.grad_up;
            double& v = (*which)(1, 2);
            const double keep = v, h = 1e-6;
            v = keep + h;
            const double up = objective();
            v = keep - h;
            const double down = objective();
            v = keep;
            const double fd = (up - down) / (2 * h);
            EXPECT_NEAR(grad(1, 2), fd, 1e-7 + 1e-5 * std::abs(fd)) << a.name;
        }
    }
}

TEST(SampleRemoval, MinimalStrengthReturnsReconstruction)
{
    ToyBackbone bb;
    const auto scene = generate_scene(3);
    const auto z = bb.encode(scene.image);
    const auto recon = bb.decode(z);
    const std::vector<int> cond{bb.token_id("grass")};
    const auto out = sample_removal(bb, z, cond, 1.0 / bb.schedule().steps(), 1, 0);
    const BinaryMask all(64, 64, 1);
    EXPECT_GT(psnr_over(out, recon, all), 30.0);
}

TEST(SampleRemoval, FixedSeedIsDeterministic)
{
    ToyBackbone a, b;
    const auto scene = generate_scene(4);
    const std::vector<int> cond{a.token_id("grass"), a.token_id("sky")};
    const auto x = sample_removal(a, a.encode(scene.image), cond, 0.8, 20, 9);
    const auto y = sample_removal(b, b.encode(scene.image), cond, 0.8, 20, 9);
    EXPECT_EQ(sha256_hex(encode_image_png(x)), sha256_hex(encode_image_png(y)));
    const auto other = sample_removal(a, a.encode(scene.image), cond, 0.8, 20, 10);
    EXPECT_FALSE(other == x);
}

TEST(SampleRemoval, RejectsZeroStrength)
{
    ToyBackbone bb;
    const std::vector<int> cond{1};
    EXPECT_THROW(sample_removal(bb, LatentTensor(8, 8, 4), cond, 0.0, 10, 0), Error);
    EXPECT_THROW(sample_removal(bb, LatentTensor(8, 8, 4), cond, 0.001, 10, 0), Error);
}

TEST(SamplingTimesteps, DescendToZeroWithoutRepeats)
{
    const auto ts = sampling_timesteps(40, 20);
    EXPECT_EQ(ts.front(), 40);
    EXPECT_EQ(ts.back(), 0);
    for (std::size_t i = 1; i < ts.size(); ++i)
        EXPECT_LT(ts[i], ts[i - 1]);
    EXPECT_EQ(sampling_timesteps(3, 10).size(), 4u);
}
