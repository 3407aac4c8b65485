#pragma once

// Remote backbone over HTTP. One POST /rpc per call; request and response bodies are
//
//   u32 LE control length | control JSON | tensor archive (float32, see tensor_archive.hpp)
//
// The server is stateless: every call carries the adapters and merged deltas it needs,
// and `backward` replays the forward pass before differentiating it.

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "eraselora/backbone.hpp"
#include "eraselora/lora_state.hpp"
#include "eraselora/tensor_archive.hpp"

#include <Eigen/Dense> // ahead of httplib: <resolv.h> defines _res
#include "httplib.h"
#include "json.hpp"

namespace eraselora {

namespace shim {

struct Message {
    nlohmann::json control;
    std::vector<NamedTensor> tensors;

    const NamedTensor& tensor(const std::string& name) const
    {
        for (const auto& t : tensors)
            if (t.name == name)
                return t;
        fail(ErrorCode::invalid_input, "shim message lacks tensor '" + name + "'");
    }
};

inline std::string encode_message(const Message& m)
{
    const std::string control = m.control.dump();
    Bytes out;
    detail::put_u32(out, static_cast<std::uint32_t>(control.size()));
    out.insert(out.end(), control.begin(), control.end());
    const Bytes archive = encode_tensor_archive(m.tensors);
    out.insert(out.end(), archive.begin(), archive.end());
    return std::string(out.begin(), out.end());
}

inline Message decode_message(const std::string& body)
{
    const Bytes bytes(body.begin(), body.end());
    detail::ByteReader in(bytes);
    const std::uint32_t n = in.u32();
    Message m;
    try {
        m.control = nlohmann::json::parse(in.str(n));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::invalid_input, std::string("shim control block is not JSON: ") + e.what());
    }
    m.tensors = decode_tensor_archive(Bytes(bytes.begin() + static_cast<std::ptrdiff_t>(in.position()), bytes.end()));
    return m;
}

inline NamedTensor image_tensor(const std::string& name, const ImageTensor& img)
{
    NamedTensor t{name,
                  {static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width()),
                   static_cast<std::uint32_t>(img.channels())},
                  {}};
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                t.data.push_back(img.at(y, x, c));
    return t;
}

inline ImageTensor to_image(const NamedTensor& t)
{
    require(t.shape.size() == 3, "tensor '" + t.name + "' is not an image");
    ImageTensor img(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
    std::size_t k = 0;
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                img.at(y, x, c) = t.data[k++];
    return img;
}

/// Latent as [h, w, c] over its (index x channel) matrix.
inline NamedTensor latent_tensor(const std::string& name, const LatentTensor& z)
{
    NamedTensor t = NamedTensor::from_matrix(name, z.values);
    t.shape = {static_cast<std::uint32_t>(z.height), static_cast<std::uint32_t>(z.width),
               static_cast<std::uint32_t>(z.channels)};
    return t;
}

inline LatentTensor to_latent(const NamedTensor& t)
{
    require(t.shape.size() == 3, "tensor '" + t.name + "' is not a latent");
    LatentTensor z(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
    NamedTensor flat = t;
    flat.shape = {static_cast<std::uint32_t>(z.values.rows()), static_cast<std::uint32_t>(z.values.cols())};
    z.values = flat.to_matrix();
    return z;
}

/// Adapters (as down/up/scale triples) and merged deltas appended to a message.
inline void put_adapters(Message& m, const LoraState* live, const std::vector<LoraState>& merged)
{
    m.control["adapters"] = live != nullptr;
    if (live)
        for (auto& t : live->tensors())
            m.tensors.push_back(std::move(t));
    m.control["merged"] = merged.size();
    for (std::size_t i = 0; i < merged.size(); ++i)
        for (const auto& a : merged[i].adapters)
            m.tensors.push_back(NamedTensor::from_matrix("merged" + std::to_string(i) + "." + a.name, a.delta()));
}

} // namespace shim

/// DiffusionBackbone whose computation happens in a shim server.
class ShimBackbone final : public DiffusionBackbone {
public:
    /// `address` is host:port or a full http:// URL.
    explicit ShimBackbone(std::string address, int timeout_seconds = 300)
        : client_(address.find("://") == std::string::npos ? "http://" + address : address)
    {
        client_.set_read_timeout(timeout_seconds, 0);
        client_.set_write_timeout(timeout_seconds, 0);
        const auto info = call({{"op", "describe"}}).control;
        try {
            shape_ = {info.at("latent").at(0).get<int>(), info.at("latent").at(1).get<int>(),
                      info.at("latent").at(2).get<int>()};
            schedule_ = std::make_unique<NoiseSchedule>(info.at("schedule_steps").get<int>());
            for (const auto& p : info.at("projections"))
                projections_.push_back({p.at("name").get<std::string>(), p.at("rows").get<int>(), p.at("cols").get<int>()});
            name_ = info.value("name", "remote");
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::client_parse, std::string("malformed shim describe reply: ") + e.what());
        }
    }

    const std::string& remote_name() const noexcept { return name_; }

    LatentShape latent_shape() const override { return shape_; }
    const NoiseSchedule& schedule() const override { return *schedule_; }

    LatentTensor encode(const ImageTensor& image) const override
    {
        return shim::to_latent(call({{"op", "encode"}}, {shim::image_tensor("image", image)}).tensor("latent"));
    }

    ImageTensor decode(const LatentTensor& latent) const override
    {
        return shim::to_image(call({{"op", "decode"}}, {shim::latent_tensor("latent", latent)}).tensor("image"));
    }

    int token_id(std::string_view tag) const override
    {
        std::lock_guard lock(token_mutex_);
        const std::string key(tag);
        if (auto it = tokens_.find(key); it != tokens_.end())
            return it->second;
        const int id = call({{"op", "token"}, {"tag", key}}).control.at("id").get<int>();
        tokens_.emplace(key, id);
        return id;
    }

    std::vector<ProjectionInfo> attention_projections() const override { return projections_; }

    void attach_adapters(LoraState* adapters) override { adapters_ = adapters; }

    DenoiseOutput denoise_step(const LatentTensor& z_t, int t, std::span<const int> cond) override
    {
        last_ = step_message("denoise", z_t, t, cond);
        const auto reply = call_message(last_);
        DenoiseOutput out;
        out.z0_hat = shim::to_latent(reply.tensor("z0_hat"));
        out.raw_attention = reply.tensor("attention").to_matrix();
        return out;
    }

    void backward(const Eigen::MatrixXd& grad_z0_hat, const Eigen::MatrixXd& grad_raw_attention) override
    {
        require(!last_.control.is_null(), "backward called before denoise_step");
        shim::Message m = last_;
        m.control["op"] = "backward";
        m.tensors.push_back(NamedTensor::from_matrix("grad_z0_hat", grad_z0_hat));
        if (grad_raw_attention.size() > 0)
            m.tensors.push_back(NamedTensor::from_matrix("grad_attention", grad_raw_attention));
        const auto reply = call_message(m);
        if (!adapters_ || adapters_->merged)
            return;
        for (auto& a : adapters_->adapters) {
            a.grad_down += reply.tensor(a.name + ".grad_down").to_matrix();
            a.grad_up += reply.tensor(a.name + ".grad_up").to_matrix();
        }
    }

    void merge_into_base(const LoraState& adapters) override { merged_.push_back(adapters); }

    /// A single tensor named after the server's checksum of its frozen weights.
    std::vector<NamedTensor> base_parameters() const override
    {
        const auto reply = call({{"op", "checksum"}});
        return {NamedTensor{"remote:" + reply.control.at("checksum").get<std::string>(), {0}, {}}};
    }

private:
    shim::Message step_message(const char* op, const LatentTensor& z_t, int t, std::span<const int> cond) const
    {
        shim::Message m;
        m.control = {{"op", op}, {"t", t}, {"cond", std::vector<int>(cond.begin(), cond.end())}};
        m.tensors.push_back(shim::latent_tensor("z_t", z_t));
        shim::put_adapters(m, adapters_ && !adapters_->merged ? adapters_ : nullptr, merged_);
        return m;
    }

    shim::Message call(const nlohmann::json& control, std::vector<NamedTensor> tensors = {}) const
    {
        return call_message({control, std::move(tensors)});
    }

    shim::Message call_message(const shim::Message& m) const
    {
        std::lock_guard lock(client_mutex_);
        auto res = client_.Post("/rpc", shim::encode_message(m), "application/octet-stream");
        if (!res)
            fail(ErrorCode::client_transport, "shim request failed: " + httplib::to_string(res.error()));
        if (res->status != 200)
            fail(ErrorCode::client_transport,
                 "shim answered HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
        return shim::decode_message(res->body);
    }

    mutable httplib::Client client_;
    mutable std::mutex client_mutex_;
    mutable std::mutex token_mutex_;
    mutable std::map<std::string, int> tokens_;
    LatentShape shape_{};
    std::unique_ptr<NoiseSchedule> schedule_;
    std::vector<ProjectionInfo> projections_;
    std::string name_;
    LoraState* adapters_ = nullptr;
    std::vector<LoraState> merged_;
    shim::Message last_;
};

using BackboneFactory = std::function<std::unique_ptr<DiffusionBackbone>()>;

/// Serves any in-process backbone over the shim protocol. Each request gets a fresh backbone.
class ShimServer {
public:
    ShimServer(BackboneFactory factory, std::string name) : factory_(std::move(factory)), name_(std::move(name))
    {
        server_.Post("/rpc", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                res.set_content(shim::encode_message(handle(shim::decode_message(req.body))), "application/octet-stream");
            } catch (const Error& e) {
                res.status = e.code() == ErrorCode::invalid_input ? 422 : 500;
                res.set_content(nlohmann::json{{"error", {{"code", to_string(e.code())}, {"message", e.what()}}}}.dump(),
                                "application/json");
            } catch (const std::exception& e) {
                res.status = 500;
                res.set_content(nlohmann::json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump(),
                                "application/json");
            }
        });
    }

    int bind(const std::string& host, int port)
    {
        if (port == 0)
            return server_.bind_to_any_port(host);
        require(server_.bind_to_port(host, port), "cannot bind shim server to " + host + ":" + std::to_string(port));
        return port;
    }
    void listen() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

private:
    shim::Message handle(const shim::Message& m)
    {
        const std::string op = m.control.value("op", "");
        auto backbone = factory_();
        shim::Message out;
        if (op == "describe") {
            nlohmann::json projections = nlohmann::json::array();
            for (const auto& p : backbone->attention_projections())
                projections.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
            const auto s = backbone->latent_shape();
            out.control = {{"name", name_},
                           {"latent", {s.height, s.width, s.channels}},
                           {"schedule_steps", backbone->schedule().steps()},
                           {"projections", projections}};
        } else if (op == "encode") {
            out.tensors.push_back(shim::latent_tensor("latent", backbone->encode(shim::to_image(m.tensor("image")))));
        } else if (op == "decode") {
            out.tensors.push_back(shim::image_tensor("image", backbone->decode(shim::to_latent(m.tensor("latent")))));
        } else if (op == "token") {
            out.control = {{"id", backbone->token_id(m.control.at("tag").get<std::string>())}};
        } else if (op == "checksum") {
            out.control = {{"checksum", parameter_checksum(backbone->base_parameters())}};
        } else if (op == "denoise" || op == "backward") {
            apply_merged(*backbone, m);
            LoraState live;
            if (m.control.value("adapters", false)) {
                std::vector<NamedTensor> triples;
                for (const auto& t : m.tensors)
                    if (t.name.find(".lora_") != std::string::npos || t.name.ends_with(".scale"))
                        triples.push_back(t);
                live = LoraState::deserialize(encode_tensor_archive(triples));
                backbone->attach_adapters(&live);
            }
            const auto cond = m.control.at("cond").get<std::vector<int>>();
            const DenoiseOutput fwd = backbone->denoise_step(shim::to_latent(m.tensor("z_t")), m.control.at("t").get<int>(), cond);
            if (op == "denoise") {
                out.tensors.push_back(shim::latent_tensor("z0_hat", fwd.z0_hat));
                out.tensors.push_back(NamedTensor::from_matrix("attention", fwd.raw_attention));
            } else {
                Eigen::MatrixXd grad_attention;
                for (const auto& t : m.tensors)
                    if (t.name == "grad_attention")
                        grad_attention = t.to_matrix();
                live.zero_grad();
                backbone->backward(m.tensor("grad_z0_hat").to_matrix(), grad_attention);
                for (const auto& a : live.adapters) {
                    out.tensors.push_back(NamedTensor::from_matrix(a.name + ".grad_down", a.grad_down));
                    out.tensors.push_back(NamedTensor::from_matrix(a.name + ".grad_up", a.grad_up));
                }
            }
            backbone->attach_adapters(nullptr);
        } else {
            fail(ErrorCode::invalid_input, "unknown shim op '" + op + "'");
        }
        return out;
    }

    /// Each merged delta D becomes a full-rank adapter (up = D, down = I).
    static void apply_merged(DiffusionBackbone& backbone, const shim::Message& m)
    {
        const std::size_t n = m.control.value("merged", std::size_t{0});
        for (std::size_t i = 0; i < n; ++i) {
            LoraState delta;
            const std::string prefix = "merged" + std::to_string(i) + ".";
            for (const auto& t : m.tensors) {
                if (t.name.rfind(prefix, 0) != 0)
                    continue;
                LoraAdapter a;
                a.name = t.name.substr(prefix.size());
                a.up = t.to_matrix();
                a.down = Eigen::MatrixXd::Identity(a.up.cols(), a.up.cols());
                a.scale = 1.0;
                delta.adapters.push_back(std::move(a));
            }
            backbone.merge_into_base(delta);
        }
    }

    BackboneFactory factory_;
    std::string name_;
    httplib::Server server_;
};

} // namespace eraselora
