#pragma once

// Session-based HTTP API for interactive removal: upload an image and target mask, refine the
// non-target mask with point/box prompts, edit tags, run one adaptation job at a time and
// fetch the result.
//
//   POST /sessions                      create from base64 JSON or multipart upload
//   GET  /sessions/{id}                 session overview
//   POST /sessions/{id}/prompts         one event or {"events": [...]}
//   GET  /sessions/{id}/mask            non-target mask (JSON, or PNG with ?format=png)
//   PUT  /sessions/{id}/tags            {"background": [...], "non_target": [...]}
//   GET  /sessions/{id}/tags
//   POST /sessions/{id}/jobs            TtaConfig overrides; 409 while a job runs
//   GET  /sessions/{id}/jobs/current    status, iteration, latest losses, trace tail
//   GET  /sessions/{id}/result          result image, digest and metrics
//   POST /sessions/{id}/snapshot        writes the session to the snapshot directory
//
// Errors are {"error": {"code": ..., "message": ...}}.

#include <atomic>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "eraselora/clients.hpp"
#include "eraselora/pipeline.hpp"
#include "eraselora/png_io.hpp"
#include "eraselora/shim.hpp"

#include <Eigen/Dense> // ahead of httplib: <resolv.h> defines _res
#include "httplib.h"
#include "json.hpp"

namespace eraselora {

struct ServiceOptions {
    BackboneFactory backbone;                // one instance per job
    std::shared_ptr<Tag2MaskClient> segmenter;
    TtaConfig job_defaults;                  // overridden per job by the request body
    std::optional<std::filesystem::path> snapshot_dir;
    std::size_t trace_tail = 50;
};

enum class JobStatus { idle, running, done, failed };

inline std::string to_string(JobStatus s)
{
    switch (s) {
    case JobStatus::idle: return "idle";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
    }
    return "idle";
}

struct Session {
    std::string id;
    ImageTensor image;
    BinaryMask target_mask;
    BinaryMask non_target_mask;
    TagReport tags;
    std::vector<PromptEvent> history;
    std::mutex prompt_mutex; // serializes prompt edits in arrival order

    // guarded by state_mutex
    mutable std::mutex state_mutex;
    int job_number = 0;
    JobStatus status = JobStatus::idle;
    int iteration = 0;
    int iterations = 0;
    std::optional<LossBreakdown> latest;
    std::deque<double> trace_tail;
    std::string error;
    std::optional<RemovalOutputs> result;
    TtaConfig job_config;
    std::thread worker;
};

class Service {
public:
    explicit Service(ServiceOptions options) : options_(std::move(options))
    {
        require(static_cast<bool>(options_.backbone), "service needs a backbone factory");
        if (!options_.segmenter)
            options_.segmenter = std::make_shared<ColorRegionSegmenter>();
        routes();
    }

    ~Service()
    {
        stop();
        cancel_ = true;
        std::lock_guard lock(store_mutex_);
        for (auto& [id, s] : sessions_)
            if (s->worker.joinable())
                s->worker.join();
    }

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    int bind(const std::string& host, int port)
    {
        if (port == 0)
            return server_.bind_to_any_port(host);
        require(server_.bind_to_port(host, port), "cannot bind service to " + host + ":" + std::to_string(port));
        return port;
    }
    void listen() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

    /// Blocks until the session's current job leaves the running state.
    void wait_for_job(const std::string& id)
    {
        auto s = find(id);
        std::thread t;
        {
            std::lock_guard lock(s->state_mutex);
            t.swap(s->worker);
        }
        if (t.joinable())
            t.join();
    }

private:
    using Handler = std::function<nlohmann::json(const httplib::Request&, httplib::Response&)>;

    struct Cancelled {};

    static int http_status(ErrorCode code)
    {
        switch (code) {
        case ErrorCode::invalid_input:
        case ErrorCode::degenerate_scene: return 422;
        case ErrorCode::not_found: return 404;
        case ErrorCode::conflict:
        case ErrorCode::already_merged: return 409;
        case ErrorCode::client_transport:
        case ErrorCode::client_parse: return 502;
        case ErrorCode::numerical_abort: return 500;
        }
        return 500;
    }

    static void error_reply(httplib::Response& res, int status, std::string_view code, const std::string& message)
    {
        res.status = status;
        res.set_content(nlohmann::json{{"error", {{"code", code}, {"message", message}}}}.dump(), "application/json");
    }

    /// Wraps a handler: JSON result on success, structured error otherwise.
    static httplib::Server::Handler wrap(Handler h)
    {
        return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                nlohmann::json body = h(req, res);
                if (!body.is_null())
                    res.set_content(body.dump(), "application/json");
            } catch (const Error& e) {
                error_reply(res, http_status(e.code()), to_string(e.code()), e.what());
            } catch (const nlohmann::json::exception& e) {
                error_reply(res, 422, "invalid_input", e.what());
            } catch (const std::exception& e) {
                error_reply(res, 500, "internal", e.what());
            }
        };
    }

    static nlohmann::json parse_body(const httplib::Request& req)
    {
        try {
            return req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::invalid_input, std::string("request body is not JSON: ") + e.what());
        }
    }

    std::shared_ptr<Session> find(const std::string& id) const
    {
        std::lock_guard lock(store_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end())
            fail(ErrorCode::not_found, "no session '" + id + "'");
        return it->second;
    }

    static Bytes upload(const httplib::Request& req, const nlohmann::json& body, const std::string& field)
    {
        if (req.is_multipart_form_data()) {
            if (!req.has_file(field))
                fail(ErrorCode::invalid_input, "multipart upload lacks '" + field + "'");
            const std::string& c = req.get_file_value(field).content;
            return Bytes(c.begin(), c.end());
        }
        const std::string key = field + "_png_b64";
        if (!body.contains(key) || !body[key].is_string())
            fail(ErrorCode::invalid_input, "request lacks base64 field '" + key + "'");
        return base64_decode(body[key].get<std::string>());
    }

    static nlohmann::json mask_json(const BinaryMask& m)
    {
        return {{"mask_png_b64", base64_encode(encode_mask_png(m))}, {"area", m.area()}, {"height", m.height()},
                {"width", m.width()}};
    }

    static nlohmann::json tags_json(const TagReport& t)
    {
        nlohmann::json warnings = nlohmann::json::array();
        if (t.background_tags.empty())
            warnings.push_back("empty_background: puzzle terms will be skipped");
        return {{"target", t.target_tag}, {"non_target", t.non_target_tags}, {"background", t.background_tags},
                {"warnings", warnings}};
    }

    nlohmann::json job_json(const Session& s) const
    {
        std::lock_guard lock(s.state_mutex);
        nlohmann::json j{{"job", s.job_number},      {"status", to_string(s.status)}, {"iteration", s.iteration},
                         {"iterations", s.iterations}, {"trace_tail", s.trace_tail}};
        j["losses"] = s.latest ? nlohmann::json(*s.latest) : nlohmann::json(nullptr);
        if (!s.error.empty())
            j["error"] = s.error;
        return j;
    }

    nlohmann::json create_session(const httplib::Request& req)
    {
        const nlohmann::json body = req.is_multipart_form_data() ? nlohmann::json::object() : parse_body(req);
        auto s = std::make_shared<Session>();
        s->image = decode_image_png(upload(req, body, "image"));
        s->image.validate();
        s->target_mask = decode_mask_png(upload(req, body, "target_mask"));
        if (s->target_mask.height() != s->image.height() || s->target_mask.width() != s->image.width())
            fail(ErrorCode::invalid_input, "target mask and image differ in shape");
        if (s->target_mask.area() == 0)
            fail(ErrorCode::invalid_input, "target mask is empty");
        s->non_target_mask = BinaryMask(s->image.height(), s->image.width());
        if (req.is_multipart_form_data() ? req.has_file("non_target_mask") : body.contains("non_target_mask_png_b64")) {
            s->non_target_mask = decode_mask_png(upload(req, body, "non_target_mask"));
            if (s->non_target_mask.height() != s->image.height() || s->non_target_mask.width() != s->image.width())
                fail(ErrorCode::invalid_input, "non-target mask and image differ in shape");
        }
        std::string target = "target";
        if (req.is_multipart_form_data() && req.has_file("target_tag"))
            target = req.get_file_value("target_tag").content;
        else if (body.contains("target_tag"))
            target = body.at("target_tag").get<std::string>();
        s->tags.target_tag = target;
        s->tags.validate();
        {
            std::lock_guard lock(store_mutex_);
            char id[32];
            std::snprintf(id, sizeof(id), "s%04d", ++session_counter_);
            s->id = id;
            sessions_.emplace(s->id, s);
        }
        return {{"id", s->id}, {"height", s->image.height()}, {"width", s->image.width()}, {"status", "idle"}};
    }

    void apply_tag_edit(Session& s, const PromptEvent& e)
    {
        TagReport next = s.tags;
        auto& list = e.tag_list == "background" ? next.background_tags : next.non_target_tags;
        const std::string key = to_lower(e.tag);
        auto it = std::find_if(list.begin(), list.end(), [&](const auto& t) { return to_lower(t) == key; });
        if (e.polarity == PromptEvent::Polarity::include) {
            if (it == list.end())
                list.push_back(e.tag);
        } else if (it != list.end()) {
            list.erase(it);
        }
        next.validate();
        s.tags = std::move(next);
    }

    nlohmann::json apply_prompts(Session& s, const nlohmann::json& body)
    {
        std::vector<PromptEvent> events;
        if (body.contains("events")) {
            require(body["events"].is_array(), "'events' must be an array");
            for (const auto& e : body["events"])
                events.push_back(e.get<PromptEvent>());
        } else {
            events.push_back(body.get<PromptEvent>());
        }
        for (const auto& e : events)
            e.validate(s.image.height(), s.image.width());

        std::lock_guard lock(s.prompt_mutex);
        for (const auto& e : events) {
            if (e.kind == PromptEvent::Kind::tag_edit) {
                apply_tag_edit(s, e);
            } else {
                const std::vector<PromptEvent> one{e};
                BinaryMask next = options_.segmenter->segment(s.image, s.non_target_mask, one);
                if (next.height() != s.image.height() || next.width() != s.image.width())
                    fail(ErrorCode::client_parse, "segmenter returned a mask of the wrong shape");
                s.non_target_mask = std::move(next);
            }
            s.history.push_back(e);
        }
        nlohmann::json out = mask_json(s.non_target_mask);
        out["events_applied"] = events.size();
        out["history"] = s.history.size();
        out["tags"] = tags_json(s.tags);
        return out;
    }

    nlohmann::json launch_job(const std::shared_ptr<Session>& s, const nlohmann::json& body)
    {
        TtaConfig config = options_.job_defaults;
        apply_config_json(body, config);
        RemovalInputs in;
        {
            std::lock_guard prompt_lock(s->prompt_mutex);
            BinaryMask nt = s->non_target_mask;
            nt.subtract(s->target_mask);
            in = {s->image, build_label_map(s->target_mask, nt), s->tags.background_tags, std::nullopt, std::nullopt};
        }
        std::lock_guard lock(s->state_mutex);
        if (s->status == JobStatus::running)
            fail(ErrorCode::conflict, "a job is already running for session '" + s->id + "'");
        if (s->worker.joinable())
            s->worker.join();
        ++s->job_number;
        s->status = JobStatus::running;
        s->iteration = 0;
        s->iterations = config.iterations;
        s->latest.reset();
        s->trace_tail.clear();
        s->error.clear();
        s->result.reset();
        s->job_config = config;
        s->worker = std::thread([this, s, in = std::move(in), config] { run_job(s, in, config); });
        return {{"job", s->job_number}, {"status", "running"}, {"iterations", config.iterations}};
    }

    void run_job(const std::shared_ptr<Session>& s, const RemovalInputs& in, const TtaConfig& config)
    {
        try {
            auto backbone = options_.backbone();
            auto out = run_removal(*backbone, in, config, [&](const TtaStep& step) {
                if (cancel_)
                    throw Cancelled{};
                std::lock_guard lock(s->state_mutex);
                s->iteration = step.iteration;
                s->latest = step.losses;
                s->trace_tail.push_back(step.losses.l_total);
                while (s->trace_tail.size() > options_.trace_tail)
                    s->trace_tail.pop_front();
            });
            std::lock_guard lock(s->state_mutex);
            s->result = std::move(out);
            s->status = JobStatus::done;
        } catch (const Cancelled&) {
            std::lock_guard lock(s->state_mutex);
            s->status = JobStatus::failed;
            s->error = "cancelled: service shutting down";
        } catch (const std::exception& e) {
            std::lock_guard lock(s->state_mutex);
            s->status = JobStatus::failed;
            s->error = e.what();
        }
    }

    nlohmann::json result_json(const Session& s) const
    {
        std::lock_guard lock(s.state_mutex);
        if (s.status != JobStatus::done || !s.result)
            fail(s.status == JobStatus::running ? ErrorCode::conflict : ErrorCode::not_found,
                 "session '" + s.id + "' has no finished result (status " + to_string(s.status) + ")");
        const Bytes png = encode_image_png(s.result->result);
        return {{"job", s.job_number},
                {"image_png_b64", base64_encode(png)},
                {"result_sha256", sha256_hex(png)},
                {"metrics", s.result->summary.at("metrics")},
                {"summary", s.result->summary}};
    }

    nlohmann::json snapshot(const Session& s) const
    {
        if (!options_.snapshot_dir)
            fail(ErrorCode::conflict, "service was started without a snapshot directory");
        const auto dir = *options_.snapshot_dir / s.id;
        std::filesystem::create_directories(dir);
        write_image_png(dir / "image.png", s.image);
        write_mask_png(dir / "target_mask.png", s.target_mask);
        BinaryMask nt;
        nlohmann::json tags, history = nlohmann::json::array();
        {
            std::lock_guard lock(const_cast<Session&>(s).prompt_mutex);
            nt = s.non_target_mask;
            tags = tags_json(s.tags);
            for (const auto& e : s.history)
                history.push_back(e);
        }
        write_mask_png(dir / "non_target_mask.png", nt);
        nt.subtract(s.target_mask);
        write_label_png(dir / "labels.png", build_label_map(s.target_mask, nt));
        write_file_text(dir / "session.json",
                        nlohmann::json{{"id", s.id}, {"tags", tags}, {"prompts", history}, {"job", job_json(s)}}.dump(2) + "\n");
        {
            std::lock_guard lock(s.state_mutex);
            if (s.result)
                write_run_outputs(dir / "run", *s.result);
        }
        return {{"path", dir.string()}};
    }

    void routes()
    {
        const std::string id = R"(/sessions/([A-Za-z0-9_-]+))";
        server_.Post("/sessions", wrap([this](const httplib::Request& req, httplib::Response&) { return create_session(req); }));
        server_.Get(id, wrap([this](const httplib::Request& req, httplib::Response&) {
                        auto s = find(req.matches[1]);
                        nlohmann::json j{{"id", s->id}, {"height", s->image.height()}, {"width", s->image.width()}};
                        {
                            std::lock_guard lock(s->prompt_mutex);
                            j["tags"] = tags_json(s->tags);
                            j["non_target_area"] = s->non_target_mask.area();
                            j["prompts"] = s->history.size();
                        }
                        j["job"] = job_json(*s);
                        return j;
                    }));
        server_.Post(id + "/prompts", wrap([this](const httplib::Request& req, httplib::Response&) {
                         auto s = find(req.matches[1]);
                         return apply_prompts(*s, parse_body(req));
                     }));
        server_.Get(id + "/mask", wrap([this](const httplib::Request& req, httplib::Response& res) -> nlohmann::json {
                        auto s = find(req.matches[1]);
                        BinaryMask m;
                        {
                            std::lock_guard lock(s->prompt_mutex);
                            m = s->non_target_mask;
                        }
                        if (req.get_param_value("format") == "png") {
                            const Bytes png = encode_mask_png(m);
                            res.set_content(std::string(png.begin(), png.end()), "image/png");
                            return nullptr;
                        }
                        return mask_json(m);
                    }));
        server_.Put(id + "/tags", wrap([this](const httplib::Request& req, httplib::Response&) {
                        auto s = find(req.matches[1]);
                        const auto body = parse_body(req);
                        std::lock_guard lock(s->prompt_mutex);
                        TagReport next = s->tags;
                        next.background_tags = body.value("background", std::vector<std::string>{});
                        next.non_target_tags = body.value("non_target", std::vector<std::string>{});
                        if (body.contains("target"))
                            next.target_tag = body.at("target").get<std::string>();
                        next.validate();
                        s->tags = std::move(next);
                        return tags_json(s->tags);
                    }));
        server_.Get(id + "/tags", wrap([this](const httplib::Request& req, httplib::Response&) {
                        auto s = find(req.matches[1]);
                        std::lock_guard lock(s->prompt_mutex);
                        return tags_json(s->tags);
                    }));
        server_.Post(id + "/jobs", wrap([this](const httplib::Request& req, httplib::Response& res) {
                         auto s = find(req.matches[1]);
                         res.status = 202;
                         return launch_job(s, parse_body(req));
                     }));
        server_.Get(id + "/jobs/current", wrap([this](const httplib::Request& req, httplib::Response&) { return job_json(*find(req.matches[1])); }));
        server_.Get(id + "/result", wrap([this](const httplib::Request& req, httplib::Response&) { return result_json(*find(req.matches[1])); }));
        server_.Post(id + "/snapshot", wrap([this](const httplib::Request& req, httplib::Response&) { return snapshot(*find(req.matches[1])); }));
        server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty())
                error_reply(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such route");
        });
    }

    ServiceOptions options_;
    httplib::Server server_;
    mutable std::mutex store_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    int session_counter_ = 0;
    std::atomic<bool> cancel_{false};
};

} // namespace eraselora
