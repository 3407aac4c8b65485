#pragma once

// Scripted clients that answer from a synthetic scene's known geometry, and a helper that
// records their answers as replayable fixtures next to the scene's image files.

#include <filesystem>
#include <memory>
#include <string>

#include "json.hpp"

#include "eraselora/bfe.hpp"
#include "eraselora/clients.hpp"
#include "eraselora/png_io.hpp"
#include "eraselora/scene.hpp"

namespace eraselora {

/// Answers tag classification for a synthetic scene. Lists one non-target tag ("bench")
/// that does not exist in the image, so localization has something to discard.
class SceneMllmClient final : public MllmClient {
public:
    explicit SceneMllmClient(const SyntheticScene& scene) : scene_(scene) {}
    std::string model_name() const override { return "scene-script"; }
    std::string complete(const MllmRequest&) override
    {
        nlohmann::json non_target = scene_.tags.non_target_tags;
        non_target.push_back("bench");
        const nlohmann::json reply{{"target", scene_.tags.target_tag},
                                   {"non_target", non_target},
                                   {"background", scene_.tags.background_tags}};
        return reply.dump();
    }

private:
    SyntheticScene scene_;
};

/// Detects scene tags from the generator's geometry; prompt segmentation is colour based.
class SceneTag2MaskClient final : public Tag2MaskClient {
public:
    explicit SceneTag2MaskClient(const SyntheticScene& scene) : scene_(scene) {}

    std::vector<InstanceMask> detect(const ImageTensor&, const std::string& tag, const Tag2MaskOptions&) override
    {
        const std::string t = to_lower(tag);
        const int n = scene_.size;
        BinaryMask m(n, n);
        if (t == to_lower(scene_.tags.target_tag)) {
            m = scene_.target_mask;
        } else if (!scene_.tags.non_target_tags.empty() && t == to_lower(scene_.tags.non_target_tags[0])) {
            m = scene_.non_target_mask;
        } else if (t == "grass" || t == "sky") {
            // visible part of one background subtype
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    m.set(y, x, ((x < scene_.seam_x) == (t == "grass")) && scene_.labels.at(y, x) == Label::background);
        } else {
            return {};
        }
        return {InstanceMask{m, 0.9}};
    }

    BinaryMask segment(const ImageTensor& image, const BinaryMask& initial, std::span<const PromptEvent> events) override
    {
        return segmenter_.segment(image, initial, events);
    }

private:
    SyntheticScene scene_;
    ColorRegionSegmenter segmenter_;
};

struct SceneFiles {
    std::filesystem::path image;
    std::filesystem::path target_mask;
    std::filesystem::path labels;
    std::filesystem::path ground_truth;
    std::filesystem::path fixtures;
};

/// Writes image.png, target_mask.png, labels.png, ground_truth.png and fixtures/fixtures.jsonl
/// (recorded BFE traffic for `prompt_template`) under `dir`.
inline SceneFiles write_scene_files(const SyntheticScene& scene, const std::filesystem::path& dir,
                                    const std::string& prompt_template)
{
    std::filesystem::create_directories(dir);
    SceneFiles files{dir / "image.png", dir / "target_mask.png", dir / "labels.png", dir / "ground_truth.png",
                     dir / "fixtures" / "fixtures.jsonl"};
    write_image_png(files.image, scene.image);
    write_mask_png(files.target_mask, scene.target_mask);
    write_label_png(files.labels, scene.labels);
    write_image_png(files.ground_truth, scene.ground_truth);

    std::filesystem::remove_all(files.fixtures.parent_path());
    auto recorder = std::make_shared<FixtureRecorder>(files.fixtures);
    RecordingMllmClient mllm(std::make_shared<SceneMllmClient>(scene), recorder);
    RecordingTag2MaskClient t2m(std::make_shared<SceneTag2MaskClient>(scene), recorder);
    BfeOptions options;
    options.prompt_template = prompt_template;
    options.parallel_localization = false;
    run_bfe(mllm, t2m, scene.image, scene.target_mask, options);
    return files;
}

} // namespace eraselora
