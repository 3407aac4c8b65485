#pragma once

// External VLM judge for removal results: a success flag and a 0-100 perceptual score.

#include <string>
#include <vector>

#include "json.hpp"

#include "eraselora/bfe.hpp"
#include "eraselora/clients.hpp"
#include "eraselora/png_io.hpp"

namespace eraselora {

struct JudgeVerdict {
    bool success = false;
    double score = 0.0;
    std::string raw;
};

inline JudgeVerdict parse_judge_response(const std::string& raw)
{
    const auto open = raw.find('{');
    const auto close = raw.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open)
        throw ParseError("judge reply contains no JSON object", raw);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw.substr(open, close - open + 1));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("judge reply JSON does not parse: ") + e.what(), raw);
    }
    if (!j.contains("success") || !j["success"].is_boolean())
        throw ParseError("judge reply lacks a boolean 'success'", raw);
    if (!j.contains("score") || !j["score"].is_number())
        throw ParseError("judge reply lacks a numeric 'score'", raw);
    JudgeVerdict v;
    v.success = j["success"].get<bool>();
    v.score = j["score"].get<double>();
    v.raw = raw;
    if (!(v.score >= 0.0 && v.score <= 100.0))
        throw ParseError("judge score " + std::to_string(v.score) + " is outside [0, 100]", raw);
    return v;
}

inline MllmRequest judge_request(const std::string& prompt_template, const ImageTensor& input,
                                 const ImageTensor& output, const std::string& target, int attempt)
{
    MllmRequest req;
    req.prompt = fill_template(prompt_template, {{"target", target}});
    req.images = {encode_image_png(input), encode_image_png(output)};
    req.attempt = attempt;
    return req;
}

/// Two attempts, like tag classification.
inline JudgeVerdict judge_removal(MllmClient& client, const ImageTensor& input, const ImageTensor& output,
                                  const std::string& target, const std::string& prompt_template)
{
    require(input.same_shape(output), "judge inputs differ in shape");
    constexpr int kAttempts = 2;
    for (int attempt = 0;; ++attempt) {
        try {
            return parse_judge_response(client.complete(judge_request(prompt_template, input, output, target, attempt)));
        } catch (const ParseError&) {
            if (attempt + 1 >= kAttempts)
                throw;
        }
    }
}

struct JudgeSummary {
    std::size_t count = 0;
    double success_rate = 0.0;
    double mean_score = 0.0;
};

inline JudgeSummary summarize_verdicts(const std::vector<JudgeVerdict>& verdicts)
{
    JudgeSummary s;
    s.count = verdicts.size();
    if (verdicts.empty())
        return s;
    for (const auto& v : verdicts) {
        s.success_rate += v.success ? 1.0 : 0.0;
        s.mean_score += v.score;
    }
    s.success_rate /= static_cast<double>(s.count);
    s.mean_score /= static_cast<double>(s.count);
    return s;
}

} // namespace eraselora
