#pragma once

// End-to-end removal on one image: adapt (or reuse adapters), merge, sample, and write the
// run directory. Shared by the CLI, the service and the sweep harness.

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eraselora/digest.hpp"
#include "eraselora/lora.hpp"
#include "eraselora/metrics.hpp"
#include "eraselora/png_io.hpp"
#include "eraselora/sampling.hpp"

namespace eraselora {

/// Applies the keys present in `j` on top of `config`; unknown keys are rejected.
inline void apply_config_json(const nlohmann::json& j, TtaConfig& config)
{
    require(j.is_object(), "configuration must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "iterations" || key == "iters")
                config.iterations = value.get<int>();
            else if (key == "rank")
                config.rank = value.get<int>();
            else if (key == "lambda")
                config.lambda = value.get<double>();
            else if (key == "tau")
                config.tau = value.get<double>();
            else if (key == "learning_rate" || key == "lr")
                config.learning_rate = value.get<double>();
            else if (key == "seed")
                config.seed = value.get<std::uint64_t>();
            else if (key == "t_min_fraction")
                config.t_min_fraction = value.get<double>();
            else if (key == "t_max_fraction")
                config.t_max_fraction = value.get<double>();
            else if (key == "strength")
                config.strength = value.get<double>();
            else if (key == "sampling_steps")
                config.sampling_steps = value.get<int>();
            else
                fail(ErrorCode::invalid_input, "unknown configuration key '" + key + "'");
        } catch (const nlohmann::json::exception&) {
            fail(ErrorCode::invalid_input, "configuration key '" + key + "' has the wrong type");
        }
    }
    config.validate();
}

/// Config text as JSON: either a JSON object or `key = value` lines ('#' starts a comment).
inline nlohmann::json parse_config_text(const std::string& text, const std::string& origin = "config")
{
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::invalid_input, origin + ": " + e.what());
        }
    }
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    nlohmann::json out = nlohmann::json::object();
    std::istringstream in(text);
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(n) + ": ";
        if (eq == std::string::npos)
            fail(ErrorCode::invalid_input, where + "expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty() || out.contains(key))
            fail(ErrorCode::invalid_input, where + (key.empty() ? "empty key" : "duplicate key '" + key + "'"));
        try {
            out[key] = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            fail(ErrorCode::invalid_input, where + "value of '" + key + "' is not a number");
        }
    }
    return out;
}

inline nlohmann::json load_config_file(const std::filesystem::path& path)
{
    return parse_config_text(read_text_file(path), path.string());
}

struct RemovalInputs {
    ImageTensor image;
    LabelMap labels; // pixel resolution
    std::vector<std::string> background_tags;
    std::optional<LoraState> reuse_adapters;
    std::optional<ImageTensor> ground_truth; // adds paired PSNR/SSIM to the metrics
};

struct RemovalOutputs {
    ImageTensor result;
    TtaTrace trace;
    LoraState adapters;
    nlohmann::json summary;
};

/// Toy-extractor metrics of `output` against `input` (and optionally a paired ground truth).
inline nlohmann::json removal_metrics(const ImageTensor& input, const ImageTensor& output, const LabelMap& labels,
                                      const ImageTensor* ground_truth = nullptr)
{
    const RegionSets regions = RegionSets::from_labels(labels);
    const ToyHistogramExtractor extractor;
    const double bg = bg_sim(extractor, input, output, regions);
    nlohmann::json m{{"extractor", extractor.name()},
                     {"bg_sim", bg},
                     {"fg_sim", fg_sim_weighted(bg, extractor, input, output, regions)},
                     {"bg_pres", bg_pres(input, output, regions)}};
    if (ground_truth) {
        const auto paired = paired_metrics(output, *ground_truth, regions);
        m["psnr"] = std::isinf(paired.psnr) ? nlohmann::json("inf") : nlohmann::json(paired.psnr);
        m["ssim"] = paired.ssim;
    }
    return m;
}

/// The backbone ends up holding the merged weights; use a fresh instance per call.
inline RemovalOutputs run_removal(DiffusionBackbone& backbone, const RemovalInputs& in, const TtaConfig& config,
                                  const TtaProgress& progress = {})
{
    config.validate();
    require(in.image.height() == in.labels.height() && in.image.width() == in.labels.width(),
            "label map does not match the image");
    RemovalOutputs out;
    if (in.reuse_adapters) {
        out.adapters = *in.reuse_adapters;
        out.adapters.merged = false;
        out.trace.final_adapter_digest = out.adapters.digest();
    } else {
        TtaResult tta = run_tta(backbone, in.image, in.labels, in.background_tags, config, progress);
        out.adapters = std::move(tta.adapters);
        out.trace = std::move(tta.trace);
    }

    LoraState merged = out.adapters;
    merge_adapters(backbone, merged);
    const std::vector<int> cond = background_condition(backbone, in.background_tags);
    out.result = sample_removal(backbone, backbone.encode(in.image), cond, config.strength, config.sampling_steps,
                                config.seed);

    nlohmann::json cfg = config;
    out.summary = {
        {"config", cfg},
        {"background_tags", in.background_tags},
        {"reused_adapters", in.reuse_adapters.has_value()},
        {"iterations_run", out.trace.steps.size()},
        {"adapter_digest", out.adapters.digest()},
        {"adapter_parameters", out.adapters.parameter_count()},
        {"result_sha256", sha256_hex(encode_image_png(out.result))},
        {"metrics", removal_metrics(in.image, out.result, in.labels, in.ground_truth ? &*in.ground_truth : nullptr)},
    };
    if (!out.trace.steps.empty())
        out.summary["final_losses"] = out.trace.steps.back().losses;
    return out;
}

/// result.png, trace.jsonl, lora.bin and summary.json. Nothing time-dependent is written.
inline void write_run_outputs(const std::filesystem::path& dir, const RemovalOutputs& out)
{
    std::filesystem::create_directories(dir);
    write_image_png(dir / "result.png", out.result);
    write_file_text(dir / "trace.jsonl", out.trace.to_jsonl());
    write_file_bytes(dir / "lora.bin", out.adapters.serialize());
    write_file_text(dir / "summary.json", out.summary.dump(2) + "\n");
}

} // namespace eraselora
