#pragma once

// External model clients: a multimodal chat model (tag classification, judging) and a
// text/prompt-driven localizer. Every request has a canonical digest so calls can be
// recorded to and replayed from JSON-lines fixtures.

#include <algorithm>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense> // ahead of httplib: <resolv.h> defines _res
#include "httplib.h"
#include "json.hpp"

#include "eraselora/digest.hpp"
#include "eraselora/png_io.hpp"
#include "eraselora/types.hpp"

namespace eraselora {

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

/// One chat turn: a text prompt followed by PNG images.
struct MllmRequest {
    std::string prompt;
    std::vector<Bytes> images;
    int attempt = 0;
};

inline std::string request_digest(const MllmRequest& req)
{
    nlohmann::json images = nlohmann::json::array();
    for (const auto& png : req.images)
        images.push_back(sha256_hex(png));
    const nlohmann::json key{{"kind", "mllm"}, {"prompt", sha256_hex(req.prompt)}, {"images", images},
                             {"attempt", req.attempt}};
    return sha256_hex(key.dump());
}

struct InstanceMask {
    BinaryMask mask;
    double score = 1.0;
};

struct Tag2MaskOptions {
    double box_threshold = 0.3;
    double mask_threshold = 0.5;
};

struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // inclusive corners
};

/// One interactive edit: a click, a box, or an add/remove on a tag list.
struct PromptEvent {
    enum class Kind { point, bbox, tag_edit };
    enum class Polarity { include, exclude };

    Kind kind = Kind::point;
    Polarity polarity = Polarity::include;
    int x = 0, y = 0;
    Box box;
    std::string tag;
    std::string tag_list; // "background" or "non_target"

    void validate(int height, int width) const
    {
        switch (kind) {
        case Kind::point:
            require(x >= 0 && x < width && y >= 0 && y < height, "point prompt lies outside the image");
            break;
        case Kind::bbox:
            require(box.x0 >= 0 && box.y0 >= 0 && box.x1 < width && box.y1 < height && box.x0 <= box.x1 &&
                        box.y0 <= box.y1,
                    "box prompt must lie inside the image with ordered corners");
            break;
        case Kind::tag_edit:
            require(!tag.empty(), "tag edit needs a tag");
            require(tag_list == "background" || tag_list == "non_target", "tag_list must be background or non_target");
            break;
        }
    }
};

inline std::string to_string(PromptEvent::Kind k)
{
    switch (k) {
    case PromptEvent::Kind::point: return "point";
    case PromptEvent::Kind::bbox: return "bbox";
    case PromptEvent::Kind::tag_edit: return "tag_edit";
    }
    return "point";
}

inline void to_json(nlohmann::json& j, const PromptEvent& e)
{
    j = nlohmann::json{{"kind", to_string(e.kind)},
                       {"polarity", e.polarity == PromptEvent::Polarity::include ? "include" : "exclude"}};
    if (e.kind == PromptEvent::Kind::point)
        j["point"] = {e.x, e.y};
    else if (e.kind == PromptEvent::Kind::bbox)
        j["box"] = {e.box.x0, e.box.y0, e.box.x1, e.box.y1};
    else {
        j["tag"] = e.tag;
        j["list"] = e.tag_list;
    }
}

inline void from_json(const nlohmann::json& j, PromptEvent& e)
{
    require(j.is_object(), "prompt event must be a JSON object");
    const std::string kind = j.value("kind", "");
    const std::string polarity = j.value("polarity", "include");
    require(polarity == "include" || polarity == "exclude", "polarity must be include or exclude");
    e.polarity = polarity == "include" ? PromptEvent::Polarity::include : PromptEvent::Polarity::exclude;
    auto ints = [&](const char* key, std::size_t n) {
        require(j.contains(key) && j[key].is_array() && j[key].size() == n, std::string("prompt event needs '") + key + "'");
        std::vector<int> v;
        for (const auto& x : j[key]) {
            require(x.is_number_integer(), std::string("'") + key + "' must hold integers");
            v.push_back(x.get<int>());
        }
        return v;
    };
    if (kind == "point") {
        e.kind = PromptEvent::Kind::point;
        const auto p = ints("point", 2);
        e.x = p[0];
        e.y = p[1];
    } else if (kind == "bbox") {
        e.kind = PromptEvent::Kind::bbox;
        const auto b = ints("box", 4);
        e.box = {b[0], b[1], b[2], b[3]};
    } else if (kind == "tag_edit") {
        e.kind = PromptEvent::Kind::tag_edit;
        require(j.contains("tag") && j["tag"].is_string(), "tag edit needs a string 'tag'");
        e.tag = j["tag"].get<std::string>();
        e.tag_list = j.value("list", "background");
    } else {
        fail(ErrorCode::invalid_input, "unknown prompt kind '" + kind + "'");
    }
}

inline std::string localize_digest(const Bytes& image_png, const std::string& tag)
{
    const nlohmann::json key{{"kind", "localize"}, {"image", sha256_hex(image_png)}, {"tag", to_lower(tag)}};
    return sha256_hex(key.dump());
}

inline std::string segment_digest(const Bytes& image_png, const BinaryMask& initial,
                                  std::span<const PromptEvent> events)
{
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : events)
        ev.push_back(e);
    const nlohmann::json key{{"kind", "segment"}, {"image", sha256_hex(image_png)},
                             {"initial", sha256_hex(encode_mask_png(initial))}, {"events", ev}};
    return sha256_hex(key.dump());
}

/// Gray PNG read as a probability map and cut at `threshold`.
inline BinaryMask decode_soft_mask_png(const Bytes& bytes, double threshold)
{
    const auto png = detail::decode_png(bytes, PNG_FORMAT_GRAY);
    BinaryMask mask(png.height, png.width);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            mask.set(y, x, png.pixels[static_cast<std::size_t>(y) * png.width + x] / 255.0 >= threshold);
    return mask;
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

class MllmClient {
public:
    virtual ~MllmClient() = default;
    virtual std::string model_name() const = 0;
    /// Returns the assistant text. Throws Error(client_transport) when the endpoint fails.
    virtual std::string complete(const MllmRequest& request) = 0;
};

class Tag2MaskClient {
public:
    virtual ~Tag2MaskClient() = default;
    /// Instance masks (already cut at the mask threshold) with detection scores.
    virtual std::vector<InstanceMask> detect(const ImageTensor& image, const std::string& tag,
                                             const Tag2MaskOptions& options) = 0;
    /// Mask produced by applying point/box prompts, in order, to `initial`.
    virtual BinaryMask segment(const ImageTensor& image, const BinaryMask& initial,
                               std::span<const PromptEvent> events) = 0;
    /// False when calls must not overlap.
    virtual bool concurrent_safe() const { return true; }
};

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// JSON-lines store keyed by request digest. Mask paths are relative to the fixture file.
class FixtureStore {
public:
    explicit FixtureStore(const std::filesystem::path& path) : path_(path)
    {
        std::ifstream in(path);
        if (!in)
            fail(ErrorCode::invalid_input, "cannot open fixture file " + path.string());
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos)
                continue;
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorCode::invalid_input, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
            }
            require(rec.is_object() && rec.contains("digest") && rec["digest"].is_string(),
                    path.string() + ":" + std::to_string(line_no) + ": fixture record needs a digest");
            records_[rec["digest"].get<std::string>()].push_back(std::move(rec));
        }
    }

    /// Records sharing a digest are served in file order, the last one repeating.
    nlohmann::json lookup(const std::string& digest, const std::string& what) const
    {
        std::lock_guard lock(mutex_);
        auto it = records_.find(digest);
        if (it == records_.end())
            fail(ErrorCode::client_transport, "no recorded fixture for " + what + " (digest " + digest + ")");
        std::size_t& served = served_[digest];
        const auto& list = it->second;
        return list[std::min(served++, list.size() - 1)];
    }

    std::filesystem::path resolve(const std::string& relative) const { return path_.parent_path() / relative; }

private:
    std::filesystem::path path_;
    std::map<std::string, std::vector<nlohmann::json>> records_;
    mutable std::map<std::string, std::size_t> served_;
    mutable std::mutex mutex_;
};

/// Appends fixture records (and mask files) next to a JSON-lines file.
class FixtureRecorder {
public:
    explicit FixtureRecorder(std::filesystem::path path) : path_(std::move(path))
    {
        if (path_.has_parent_path())
            std::filesystem::create_directories(path_.parent_path());
    }

    void append(const nlohmann::json& record)
    {
        std::lock_guard lock(mutex_);
        std::ofstream out(path_, std::ios::app);
        if (!out)
            fail(ErrorCode::invalid_input, "cannot append to fixture file " + path_.string());
        out << record.dump() << '\n';
    }

    /// Writes the mask under masks/ and returns its path relative to the fixture file.
    std::string store_mask(const std::string& stem, const BinaryMask& mask)
    {
        const std::string rel = "masks/" + stem + ".png";
        write_mask_png(path_.parent_path() / rel, mask);
        return rel;
    }

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    std::mutex mutex_;
};

inline nlohmann::json mllm_record(const MllmRequest& req, const std::string& response)
{
    return {{"digest", request_digest(req)}, {"kind", "mllm"}, {"attempt", req.attempt}, {"response", response}};
}

class FixtureMllmClient final : public MllmClient {
public:
    explicit FixtureMllmClient(std::shared_ptr<const FixtureStore> store) : store_(std::move(store)) {}
    std::string model_name() const override { return "fixture"; }
    std::string complete(const MllmRequest& request) override
    {
        const auto rec = store_->lookup(request_digest(request), "chat request attempt " + std::to_string(request.attempt));
        require(rec.contains("response") && rec["response"].is_string(), "mllm fixture record lacks 'response'");
        return rec["response"].get<std::string>();
    }

private:
    std::shared_ptr<const FixtureStore> store_;
};

class FixtureTag2MaskClient final : public Tag2MaskClient {
public:
    explicit FixtureTag2MaskClient(std::shared_ptr<const FixtureStore> store) : store_(std::move(store)) {}

    std::vector<InstanceMask> detect(const ImageTensor& image, const std::string& tag,
                                     const Tag2MaskOptions& options) override
    {
        const auto rec = store_->lookup(localize_digest(encode_image_png(image), tag), "localization of '" + tag + "'");
        std::vector<InstanceMask> out;
        for (const auto& inst : rec.value("instances", nlohmann::json::array())) {
            InstanceMask m;
            m.mask = decode_soft_mask_png(read_file_bytes(store_->resolve(inst.at("mask").get<std::string>())),
                                          options.mask_threshold);
            m.score = inst.value("score", 1.0);
            out.push_back(std::move(m));
        }
        return out;
    }

    BinaryMask segment(const ImageTensor& image, const BinaryMask& initial,
                       std::span<const PromptEvent> events) override
    {
        const auto rec = store_->lookup(segment_digest(encode_image_png(image), initial, events), "prompt segmentation");
        return decode_mask_png(read_file_bytes(store_->resolve(rec.at("mask").get<std::string>())));
    }

private:
    std::shared_ptr<const FixtureStore> store_;
};

class RecordingMllmClient final : public MllmClient {
public:
    RecordingMllmClient(std::shared_ptr<MllmClient> inner, std::shared_ptr<FixtureRecorder> recorder)
        : inner_(std::move(inner)), recorder_(std::move(recorder)) {}
    std::string model_name() const override { return inner_->model_name(); }
    std::string complete(const MllmRequest& request) override
    {
        std::string response = inner_->complete(request);
        recorder_->append(mllm_record(request, response));
        return response;
    }

private:
    std::shared_ptr<MllmClient> inner_;
    std::shared_ptr<FixtureRecorder> recorder_;
};

class RecordingTag2MaskClient final : public Tag2MaskClient {
public:
    RecordingTag2MaskClient(std::shared_ptr<Tag2MaskClient> inner, std::shared_ptr<FixtureRecorder> recorder)
        : inner_(std::move(inner)), recorder_(std::move(recorder)) {}

    std::vector<InstanceMask> detect(const ImageTensor& image, const std::string& tag,
                                     const Tag2MaskOptions& options) override
    {
        auto found = inner_->detect(image, tag, options);
        const std::string digest = localize_digest(encode_image_png(image), tag);
        nlohmann::json instances = nlohmann::json::array();
        for (std::size_t i = 0; i < found.size(); ++i)
            instances.push_back({{"mask", recorder_->store_mask(digest.substr(0, 16) + "_" + std::to_string(i),
                                                                found[i].mask)},
                                 {"score", found[i].score}});
        recorder_->append({{"digest", digest}, {"kind", "localize"}, {"tag", tag}, {"instances", instances}});
        return found;
    }

    BinaryMask segment(const ImageTensor& image, const BinaryMask& initial,
                       std::span<const PromptEvent> events) override
    {
        BinaryMask mask = inner_->segment(image, initial, events);
        const std::string digest = segment_digest(encode_image_png(image), initial, events);
        recorder_->append({{"digest", digest}, {"kind", "segment"},
                           {"mask", recorder_->store_mask(digest.substr(0, 16), mask)}});
        return mask;
    }

    bool concurrent_safe() const override { return inner_->concurrent_safe(); }

private:
    std::shared_ptr<Tag2MaskClient> inner_;
    std::shared_ptr<FixtureRecorder> recorder_;
};

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

namespace detail {

struct SplitUrl {
    std::string origin; // scheme://host[:port]
    std::string path;   // without trailing slash
};

inline SplitUrl split_url(const std::string& url)
{
    const auto scheme_end = url.find("://");
    require(scheme_end != std::string::npos, "endpoint URL needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    SplitUrl out;
    out.origin = url.substr(0, path_start);
    out.path = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!out.path.empty() && out.path.back() == '/')
        out.path.pop_back();
    return out;
}

inline nlohmann::json post_json(const std::string& endpoint, const std::string& route, const nlohmann::json& body,
                                int timeout_seconds, const httplib::Headers& headers = {})
{
    const SplitUrl url = split_url(endpoint);
    httplib::Client cli(url.origin);
    cli.set_connection_timeout(timeout_seconds, 0);
    cli.set_read_timeout(timeout_seconds, 0);
    cli.set_write_timeout(timeout_seconds, 0);
    auto res = cli.Post(url.path + route, headers, body.dump(), "application/json");
    if (!res)
        fail(ErrorCode::client_transport, "request to " + endpoint + route + " failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        fail(ErrorCode::client_transport,
             endpoint + route + " answered HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("response is not JSON: ") + e.what(), res->body);
    }
}

inline std::string png_data_url(const Bytes& png) { return "data:image/png;base64," + base64_encode(png); }

} // namespace detail

struct MllmClientConfig {
    std::string endpoint;                  // e.g. https://host/v1
    std::string model_name;
    std::string route = "/chat/completions";
    std::string api_key_env = "ERASE_MLLM_API_KEY";
    int timeout_seconds = 120;
};

/// OpenAI-compatible chat completion endpoint.
class HttpMllmClient final : public MllmClient {
public:
    explicit HttpMllmClient(MllmClientConfig config) : config_(std::move(config))
    {
        require(!config_.endpoint.empty(), "MLLM endpoint is empty");
    }

    std::string model_name() const override { return config_.model_name; }

    std::string complete(const MllmRequest& request) override
    {
        nlohmann::json content = nlohmann::json::array();
        content.push_back({{"type", "text"}, {"text", request.prompt}});
        for (const auto& png : request.images)
            content.push_back({{"type", "image_url"}, {"image_url", {{"url", detail::png_data_url(png)}}}});
        const nlohmann::json body{{"model", config_.model_name},
                                  {"temperature", 0},
                                  {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
        httplib::Headers headers;
        if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);
        const auto reply = detail::post_json(config_.endpoint, config_.route, body, config_.timeout_seconds, headers);
        try {
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ParseError("chat completion reply lacks choices[0].message.content", reply.dump());
        }
    }

private:
    MllmClientConfig config_;
};

/// Generic grounding service: POST /localize and POST /segment with base64 PNG payloads.
class HttpTag2MaskClient final : public Tag2MaskClient {
public:
    explicit HttpTag2MaskClient(std::string endpoint, int timeout_seconds = 60)
        : endpoint_(std::move(endpoint)), timeout_(timeout_seconds) {}

    std::vector<InstanceMask> detect(const ImageTensor& image, const std::string& tag,
                                     const Tag2MaskOptions& options) override
    {
        const nlohmann::json body{{"image_png_b64", base64_encode(encode_image_png(image))},
                                  {"tag", tag},
                                  {"box_threshold", options.box_threshold},
                                  {"mask_threshold", options.mask_threshold}};
        const auto reply = detail::post_json(endpoint_, "/localize", body, timeout_);
        std::vector<InstanceMask> out;
        try {
            for (const auto& inst : reply.at("instances")) {
                InstanceMask m;
                m.mask = decode_soft_mask_png(base64_decode(inst.at("mask_png_b64").get<std::string>()),
                                              options.mask_threshold);
                m.score = inst.value("score", 1.0);
                out.push_back(std::move(m));
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed localization reply: ") + e.what(), reply.dump());
        }
        return out;
    }

    BinaryMask segment(const ImageTensor& image, const BinaryMask& initial,
                       std::span<const PromptEvent> events) override
    {
        nlohmann::json ev = nlohmann::json::array();
        for (const auto& e : events)
            ev.push_back(e);
        const nlohmann::json body{{"image_png_b64", base64_encode(encode_image_png(image))},
                                  {"initial_mask_png_b64", base64_encode(encode_mask_png(initial))},
                                  {"prompts", ev}};
        const auto reply = detail::post_json(endpoint_, "/segment", body, timeout_);
        try {
            return decode_mask_png(base64_decode(reply.at("mask_png_b64").get<std::string>()));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed segmentation reply: ") + e.what(), reply.dump());
        }
    }

private:
    std::string endpoint_;
    int timeout_;
};

// ---------------------------------------------------------------------------
// Local prompt segmenter
// ---------------------------------------------------------------------------

/// Colour-similarity region growing for point and box prompts; no text grounding.
///   include point: flood fill of pixels within `tolerance` of the clicked colour
///   exclude point: removes the mask component under the click
///   include box:   flood fill seeded at the box centre, clipped to the box
///   exclude box:   clears the box
class ColorRegionSegmenter final : public Tag2MaskClient {
public:
    explicit ColorRegionSegmenter(double tolerance = 0.08) : tolerance_(tolerance) {}

    std::vector<InstanceMask> detect(const ImageTensor&, const std::string&, const Tag2MaskOptions&) override
    {
        fail(ErrorCode::invalid_input, "the local prompt segmenter cannot ground text tags");
    }

    BinaryMask segment(const ImageTensor& image, const BinaryMask& initial,
                       std::span<const PromptEvent> events) override
    {
        require(initial.height() == image.height() && initial.width() == image.width(),
                "initial mask does not match the image");
        BinaryMask mask = initial;
        for (const auto& e : events) {
            e.validate(image.height(), image.width());
            const bool include = e.polarity == PromptEvent::Polarity::include;
            if (e.kind == PromptEvent::Kind::point) {
                if (include)
                    mask |= grow(image, e.x, e.y, Box{0, 0, image.width() - 1, image.height() - 1});
                else if (mask.at(e.y, e.x))
                    mask.subtract(component(mask, e.x, e.y));
            } else if (e.kind == PromptEvent::Kind::bbox) {
                if (include) {
                    mask |= grow(image, (e.box.x0 + e.box.x1) / 2, (e.box.y0 + e.box.y1) / 2, e.box);
                } else {
                    for (int y = e.box.y0; y <= e.box.y1; ++y)
                        for (int x = e.box.x0; x <= e.box.x1; ++x)
                            mask.set(y, x, false);
                }
            }
        }
        return mask;
    }

private:
    template <typename Accept>
    static BinaryMask flood(int height, int width, int sx, int sy, const Box& clip, Accept accept)
    {
        BinaryMask out(height, width);
        std::deque<std::pair<int, int>> queue{{sx, sy}};
        out.set(sy, sx, true);
        while (!queue.empty()) {
            const auto [x, y] = queue.front();
            queue.pop_front();
            constexpr int dx[] = {1, -1, 0, 0};
            constexpr int dy[] = {0, 0, 1, -1};
            for (int k = 0; k < 4; ++k) {
                const int nx = x + dx[k], ny = y + dy[k];
                if (nx < clip.x0 || nx > clip.x1 || ny < clip.y0 || ny > clip.y1 || out.at(ny, nx) || !accept(nx, ny))
                    continue;
                out.set(ny, nx, true);
                queue.emplace_back(nx, ny);
            }
        }
        return out;
    }

    BinaryMask grow(const ImageTensor& image, int sx, int sy, const Box& clip) const
    {
        return flood(image.height(), image.width(), sx, sy, clip, [&](int x, int y) {
            for (int c = 0; c < image.channels(); ++c)
                if (std::abs(image.at(y, x, c) - image.at(sy, sx, c)) > tolerance_)
                    return false;
            return true;
        });
    }

    static BinaryMask component(const BinaryMask& mask, int sx, int sy)
    {
        return flood(mask.height(), mask.width(), sx, sy, Box{0, 0, mask.width() - 1, mask.height() - 1},
                     [&](int x, int y) { return mask.at(y, x); });
    }

    double tolerance_;
};

} // namespace eraselora
