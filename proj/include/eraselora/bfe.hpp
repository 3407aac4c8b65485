#pragma once

// Background-aware foreground exclusion: ask a multimodal model which tags are the target,
// which are other foreground objects and which are background components, localize the
// tags, and build the three-label map.

#include <future>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eraselora/clients.hpp"
#include "eraselora/label_map.hpp"

namespace eraselora {

/// Replaces every `{{key}}` with its value.
inline std::string fill_template(std::string text, const std::map<std::string, std::string>& values)
{
    for (const auto& [key, value] : values) {
        const std::string needle = "{{" + key + "}}";
        for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size()))
            text.replace(pos, needle.size(), value);
    }
    return text;
}

/// Template text without its '#' header lines; leading blank lines are dropped too.
inline std::string load_prompt_template(const std::filesystem::path& path)
{
    std::istringstream in(read_text_file(path));
    std::string out, line;
    while (std::getline(in, line)) {
        if (line.rfind('#', 0) == 0 || (out.empty() && line.find_first_not_of(" \t\r") == std::string::npos))
            continue;
        out += line + "\n";
    }
    require(!out.empty(), "prompt template " + path.string() + " is empty");
    return out;
}

/// Tag lists as parsed, plus which background tags may be kept without a detection.
struct ParsedTags {
    TagReport report;
    std::vector<bool> background_occluded; // parallel to report.background_tags
};

/// Pulls the outermost JSON object out of a model reply (tolerates prose and code fences).
inline ParsedTags parse_tag_response(const std::string& raw)
{
    const auto open = raw.find('{');
    const auto close = raw.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open)
        throw ParseError("reply contains no JSON object", raw);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw.substr(open, close - open + 1));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("reply JSON does not parse: ") + e.what(), raw);
    }

    ParsedTags out;
    out.report.raw_response = raw;
    if (!j.contains("target") || !j["target"].is_string())
        throw ParseError("reply lacks a string 'target'", raw);
    out.report.target_tag = j["target"].get<std::string>();

    auto list = [&](const char* key) {
        if (!j.contains(key))
            return nlohmann::json::array();
        if (!j[key].is_array())
            throw ParseError(std::string("'") + key + "' must be an array", raw);
        return j[key];
    };
    for (const auto& t : list("non_target")) {
        if (!t.is_string())
            throw ParseError("non_target entries must be strings", raw);
        out.report.non_target_tags.push_back(t.get<std::string>());
    }
    for (const auto& t : list("background")) {
        if (t.is_string()) {
            out.report.background_tags.push_back(t.get<std::string>());
            out.background_occluded.push_back(true);
        } else if (t.is_object() && t.contains("tag") && t["tag"].is_string()) {
            out.report.background_tags.push_back(t["tag"].get<std::string>());
            out.background_occluded.push_back(t.value("occluded", true));
        } else {
            throw ParseError("background entries must be strings or {\"tag\",\"occluded\"} objects", raw);
        }
    }
    try {
        out.report.validate();
    } catch (const Error& e) {
        throw ParseError(e.what(), raw);
    }
    return out;
}

struct AuditRecord {
    std::string call;        // "mllm" | "localize" | "disposition"
    std::string tag;
    std::string role;        // target | non_target | background
    std::string digest;
    int attempt = 0;
    std::string outcome;     // ok | parse_error | localized | discarded | occluded-kept
    std::size_t instances = 0;
    std::size_t area = 0;
    std::string detail;
};

inline void to_json(nlohmann::json& j, const AuditRecord& r)
{
    j = nlohmann::json{{"call", r.call}, {"outcome", r.outcome}};
    if (!r.tag.empty())
        j["tag"] = r.tag;
    if (!r.role.empty())
        j["role"] = r.role;
    if (!r.digest.empty())
        j["digest"] = r.digest;
    if (r.call == "mllm")
        j["attempt"] = r.attempt;
    if (r.call == "localize") {
        j["instances"] = r.instances;
        j["area"] = r.area;
    }
    if (!r.detail.empty())
        j["detail"] = r.detail;
}

inline void from_json(const nlohmann::json& j, AuditRecord& r)
{
    r.call = j.at("call").get<std::string>();
    r.outcome = j.at("outcome").get<std::string>();
    r.tag = j.value("tag", "");
    r.role = j.value("role", "");
    r.digest = j.value("digest", "");
    r.attempt = j.value("attempt", 0);
    r.instances = j.value("instances", std::size_t{0});
    r.area = j.value("area", std::size_t{0});
    r.detail = j.value("detail", "");
}

struct BfeOptions {
    std::string prompt_template;
    Tag2MaskOptions localization;
    bool parallel_localization = true;
};

/// Prompt sent for one image: the template with the image size filled in.
inline MllmRequest classification_request(const std::string& prompt_template, const ImageTensor& image,
                                          const BinaryMask& target_mask, int attempt)
{
    MllmRequest req;
    req.prompt = fill_template(prompt_template,
                               {{"width", std::to_string(image.width())}, {"height", std::to_string(image.height())}});
    req.images = {encode_image_png(image), encode_mask_png(target_mask)};
    req.attempt = attempt;
    return req;
}

/// Two attempts; a second unusable reply raises ParseError with that reply's text.
inline ParsedTags classify_tags_detailed(MllmClient& client, const ImageTensor& image, const BinaryMask& target_mask,
                                         const std::string& prompt_template, std::vector<AuditRecord>* audit = nullptr)
{
    require(image.height() == target_mask.height() && image.width() == target_mask.width(),
            "target mask does not match the image");
    require(target_mask.area() > 0, "target mask is empty");
    constexpr int kAttempts = 2;
    for (int attempt = 0;; ++attempt) {
        const MllmRequest req = classification_request(prompt_template, image, target_mask, attempt);
        const std::string raw = client.complete(req);
        try {
            ParsedTags parsed = parse_tag_response(raw);
            if (audit)
                audit->push_back({"mllm", "", "", request_digest(req), attempt, "ok", 0, 0, ""});
            return parsed;
        } catch (const ParseError& e) {
            if (audit)
                audit->push_back({"mllm", "", "", request_digest(req), attempt, "parse_error", 0, 0, e.what()});
            if (attempt + 1 >= kAttempts)
                throw;
        }
    }
}

inline TagReport classify_tags(MllmClient& client, const ImageTensor& image, const BinaryMask& target_mask,
                               const std::string& prompt_template)
{
    return classify_tags_detailed(client, image, target_mask, prompt_template).report;
}

struct TagLocalization {
    std::string tag;
    BinaryMask mask;              // union of kept instances; empty when nothing was found
    std::size_t instances = 0;    // instances above the box threshold
    bool discarded() const { return instances == 0 || mask.area() == 0; }
};

/// Localizes each tag; results come back in `tags` order.
inline std::vector<TagLocalization> localize_tags(Tag2MaskClient& client, const ImageTensor& image,
                                                  const std::vector<std::string>& tags,
                                                  const Tag2MaskOptions& options = {}, bool parallel = true)
{
    require(!tags.empty(), "localize_tags needs at least one tag");
    auto one = [&](const std::string& tag) {
        TagLocalization loc{tag, BinaryMask(image.height(), image.width()), 0};
        for (const auto& inst : client.detect(image, tag, options)) {
            if (inst.score < options.box_threshold)
                continue;
            if (inst.mask.height() != image.height() || inst.mask.width() != image.width())
                throw ParseError("instance mask for '" + tag + "' does not match the image", "");
            loc.mask |= inst.mask;
            ++loc.instances;
        }
        return loc;
    };

    std::vector<TagLocalization> out;
    out.reserve(tags.size());
    if (parallel && client.concurrent_safe() && tags.size() > 1) {
        std::vector<std::future<TagLocalization>> pending;
        for (const auto& tag : tags)
            pending.push_back(std::async(std::launch::async, one, tag));
        for (auto& f : pending)
            out.push_back(f.get());
    } else {
        for (const auto& tag : tags)
            out.push_back(one(tag));
    }
    return out;
}

struct BfeResult {
    TagReport tag_report;                     // as classified
    std::vector<std::string> background_tags; // subtypes kept for adaptation
    LabelMap label_map;
    std::vector<std::pair<std::string, BinaryMask>> per_tag_masks; // target first, then report order
    std::vector<AuditRecord> audit_log;
    std::vector<std::string> warnings;

    std::string status() const { return warnings.empty() ? "ok" : "warning"; }

    const BinaryMask* mask_for(const std::string& tag) const
    {
        for (const auto& [t, m] : per_tag_masks)
            if (to_lower(t) == to_lower(tag))
                return &m;
        return nullptr;
    }
};

/// Label map from a target mask and the localized non-target tags.
inline LabelMap label_map_from_tags(const BinaryMask& target_mask, const std::vector<TagLocalization>& non_target)
{
    BinaryMask union_mask(target_mask.height(), target_mask.width());
    for (const auto& loc : non_target)
        union_mask |= loc.mask;
    union_mask.subtract(target_mask);
    return build_label_map(target_mask, union_mask);
}

inline BfeResult run_bfe(MllmClient& mllm, Tag2MaskClient& t2m, const ImageTensor& image,
                         const BinaryMask& target_mask, const BfeOptions& options)
{
    BfeResult result;
    const ParsedTags parsed = classify_tags_detailed(mllm, image, target_mask, options.prompt_template, &result.audit_log);
    result.tag_report = parsed.report;
    const TagReport& report = result.tag_report;

    std::vector<std::string> to_localize = report.non_target_tags;
    to_localize.insert(to_localize.end(), report.background_tags.begin(), report.background_tags.end());
    std::vector<TagLocalization> found;
    if (!to_localize.empty())
        found = localize_tags(t2m, image, to_localize, options.localization, options.parallel_localization);
    const Bytes image_png = encode_image_png(image);
    for (const auto& loc : found)
        result.audit_log.push_back({"localize", loc.tag, "", localize_digest(image_png, loc.tag), 0,
                                    loc.discarded() ? "empty" : "ok", loc.instances, loc.mask.area(), ""});

    const std::vector<TagLocalization> non_target(found.begin(),
                                                  found.begin() + static_cast<std::ptrdiff_t>(report.non_target_tags.size()));
    result.label_map = label_map_from_tags(target_mask, non_target);

    result.per_tag_masks.emplace_back(report.target_tag, target_mask);
    result.audit_log.push_back({"disposition", report.target_tag, "target", "", 0, "localized", 0, target_mask.area(),
                                "user mask"});
    for (const auto& loc : non_target) {
        result.per_tag_masks.emplace_back(loc.tag, loc.mask);
        result.audit_log.push_back(
            {"disposition", loc.tag, "non_target", "", 0, loc.discarded() ? "discarded" : "localized", 0, loc.mask.area(), ""});
    }
    for (std::size_t i = 0; i < report.background_tags.size(); ++i) {
        const auto& loc = found[report.non_target_tags.size() + i];
        result.per_tag_masks.emplace_back(loc.tag, loc.mask);
        std::string outcome = "localized";
        if (loc.discarded())
            outcome = parsed.background_occluded[i] ? "occluded-kept" : "discarded";
        if (outcome != "discarded")
            result.background_tags.push_back(loc.tag);
        result.audit_log.push_back({"disposition", loc.tag, "background", "", 0, outcome, 0, loc.mask.area(), ""});
    }
    if (result.background_tags.empty())
        result.warnings.push_back("empty_background: puzzle terms will be skipped");
    return result;
}

// ---------------------------------------------------------------------------
// Files: <dir>/bfe.json, <dir>/label_map.png, <dir>/masks/NN.png
// ---------------------------------------------------------------------------

inline nlohmann::json tag_report_json(const TagReport& r)
{
    return {{"target", r.target_tag}, {"non_target", r.non_target_tags}, {"background", r.background_tags},
            {"raw_response", r.raw_response}};
}

inline TagReport tag_report_from_json(const nlohmann::json& j)
{
    TagReport r;
    r.target_tag = j.at("target").get<std::string>();
    r.non_target_tags = j.value("non_target", std::vector<std::string>{});
    r.background_tags = j.value("background", std::vector<std::string>{});
    r.raw_response = j.value("raw_response", "");
    return r;
}

inline void write_bfe_result(const std::filesystem::path& dir, const BfeResult& result)
{
    std::filesystem::create_directories(dir / "masks");
    const Bytes label_png = encode_label_png(result.label_map);
    write_file_bytes(dir / "label_map.png", label_png);

    nlohmann::json masks = nlohmann::json::array();
    for (std::size_t i = 0; i < result.per_tag_masks.size(); ++i) {
        const auto& [tag, mask] = result.per_tag_masks[i];
        char name[32];
        std::snprintf(name, sizeof(name), "masks/%02zu.png", i);
        const Bytes png = encode_mask_png(mask);
        write_file_bytes(dir / name, png);
        masks.push_back({{"tag", tag}, {"file", name}, {"area", mask.area()}, {"sha256", sha256_hex(png)}});
    }
    const auto hist = result.label_map.histogram();
    const nlohmann::json doc{
        {"status", result.status()},
        {"warnings", result.warnings},
        {"tag_report", tag_report_json(result.tag_report)},
        {"background_tags", result.background_tags},
        {"label_map",
         {{"file", "label_map.png"},
          {"height", result.label_map.height()},
          {"width", result.label_map.width()},
          {"counts", {{"target", hist[0]}, {"non_target", hist[1]}, {"background", hist[2]}}},
          {"sha256", sha256_hex(label_png)}}},
        {"per_tag_masks", masks},
        {"audit_log", result.audit_log},
    };
    write_file_text(dir / "bfe.json", doc.dump(2) + "\n");
}

/// Accepts either the result directory or its bfe.json.
inline BfeResult read_bfe_result(std::filesystem::path path)
{
    if (std::filesystem::is_directory(path))
        path /= "bfe.json";
    const std::filesystem::path dir = path.parent_path();
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::invalid_input, "malformed " + path.string() + ": " + e.what());
    }
    BfeResult r;
    try {
        r.tag_report = tag_report_from_json(doc.at("tag_report"));
        r.background_tags = doc.at("background_tags").get<std::vector<std::string>>();
        r.warnings = doc.value("warnings", std::vector<std::string>{});
        r.label_map = read_label_png(dir / doc.at("label_map").at("file").get<std::string>());
        for (const auto& m : doc.at("per_tag_masks"))
            r.per_tag_masks.emplace_back(m.at("tag").get<std::string>(),
                                         read_mask_png(dir / m.at("file").get<std::string>()));
        r.audit_log = doc.at("audit_log").get<std::vector<AuditRecord>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::invalid_input, "malformed " + path.string() + ": " + e.what());
    }
    return r;
}

} // namespace eraselora
