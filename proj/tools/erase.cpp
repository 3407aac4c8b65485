// erase: command-line entry point for the removal pipeline.
//
// Exit codes: 0 success, 2 external client failure, 3 invalid input, 4 numerical abort.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "eraselora/bfe.hpp"
#include "eraselora/clients.hpp"
#include "eraselora/harness.hpp"
#include "eraselora/judge.hpp"
#include "eraselora/pipeline.hpp"
#include "eraselora/scene.hpp"
#include "eraselora/scene_fixtures.hpp"
#include "eraselora/service.hpp"
#include "eraselora/shim.hpp"
#include "eraselora/toy_backbone.hpp"

#ifndef ERASELORA_PROMPT_DIR
#define ERASELORA_PROMPT_DIR "prompts"
#endif

namespace fs = std::filesystem;
using namespace eraselora;

namespace {

constexpr int kExitClient = 2;
constexpr int kExitInput = 3;
constexpr int kExitNumeric = 4;

int exit_code(ErrorCode code)
{
    switch (code) {
    case ErrorCode::client_transport:
    case ErrorCode::client_parse: return kExitClient;
    case ErrorCode::numerical_abort: return kExitNumeric;
    default: return kExitInput;
    }
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty())
                out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

template <typename T>
std::vector<T> split_numbers(const std::string& s)
{
    std::vector<T> out;
    for (const auto& item : split_list(s)) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            require(used == item.size() && v >= 0, "'" + item + "' is not a non-negative integer");
            out.push_back(static_cast<T>(v));
        } catch (const std::logic_error&) {
            fail(ErrorCode::invalid_input, "'" + item + "' is not a non-negative integer");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptation settings: defaults < config file < flags
// ---------------------------------------------------------------------------

struct TuningFlags {
    std::string config_file;
    std::string backbone = "toy";
    std::uint64_t seed = 0;
    int rank = 0, iters = 0, sampling_steps = 0;
    double lambda = 0, tau = 0, strength = 0, lr = 0;
    std::vector<std::pair<CLI::Option*, std::string>> set;

    void attach(CLI::App* app, bool with_backbone = true)
    {
        app->add_option("--config", config_file, "Config file (JSON object or key = value lines)")->check(CLI::ExistingFile);
        set.emplace_back(app->add_option("--seed", seed, "Random seed"), "seed");
        set.emplace_back(app->add_option("--rank", rank, "LoRA rank (default 32)"), "rank");
        set.emplace_back(app->add_option("--iters", iters, "Adaptation iterations (default 500)"), "iterations");
        set.emplace_back(app->add_option("--lambda", lambda, "Weight of the puzzle terms (default 0.2)"), "lambda");
        set.emplace_back(app->add_option("--tau", tau, "Attention softmax temperature (default 100)"), "tau");
        set.emplace_back(app->add_option("--strength", strength, "Sampling strength in (0, 1] (default 0.8)"), "strength");
        set.emplace_back(app->add_option("--lr", lr, "Learning rate (default 1e-2 on toy, 1e-4 otherwise)"), "learning_rate");
        set.emplace_back(app->add_option("--sampling-steps", sampling_steps, "Denoising steps (default 20)"),
                         "sampling_steps");
        if (with_backbone)
            app->add_option("--backbone", backbone, "toy or shim:<host:port>");
    }

    nlohmann::json flag_json() const
    {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [opt, key] : set) {
            if (opt->count() == 0)
                continue;
            if (key == "seed")
                j[key] = seed;
            else if (key == "rank")
                j[key] = rank;
            else if (key == "iterations")
                j[key] = iters;
            else if (key == "sampling_steps")
                j[key] = sampling_steps;
            else if (key == "lambda")
                j[key] = lambda;
            else if (key == "tau")
                j[key] = tau;
            else if (key == "strength")
                j[key] = strength;
            else
                j[key] = lr;
        }
        return j;
    }

    TtaConfig resolve() const
    {
        TtaConfig config;
        if (backbone == "toy")
            config.learning_rate = 1e-2;
        if (!config_file.empty())
            apply_config_json(load_config_file(config_file), config);
        apply_config_json(flag_json(), config);
        return config;
    }

    BackboneFactory factory() const
    {
        if (backbone == "toy")
            return [] { return std::make_unique<ToyBackbone>(); };
        if (backbone.rfind("shim:", 0) == 0 && backbone.size() > 5) {
            const std::string address = backbone.substr(5);
            return [address] { return std::make_unique<ShimBackbone>(address); };
        }
        fail(ErrorCode::invalid_input, "unknown backbone '" + backbone + "' (expected toy or shim:<address>)");
    }
};

// ---------------------------------------------------------------------------
// External clients: fixture replay, live HTTP, optional recording
// ---------------------------------------------------------------------------

struct ClientFlags {
    std::string fixtures, record, mllm_endpoint, mllm_model, grounding_endpoint;

    void attach(CLI::App* app, bool grounding = true)
    {
        app->add_option("--fixtures", fixtures, "Replay recorded client traffic from this fixtures.jsonl")
            ->check(CLI::ExistingFile);
        app->add_option("--record", record, "Record live client traffic into this fixtures.jsonl");
        app->add_option("--mllm-endpoint", mllm_endpoint, "OpenAI-compatible chat endpoint (https://host/v1)");
        app->add_option("--mllm-model", mllm_model, "Model name sent to the chat endpoint");
        if (grounding)
            app->add_option("--grounding-endpoint", grounding_endpoint, "Grounding service with /localize and /segment");
    }

    std::shared_ptr<FixtureStore> store() const
    {
        return fixtures.empty() ? nullptr : std::make_shared<FixtureStore>(fixtures);
    }

    std::shared_ptr<FixtureRecorder> recorder() const
    {
        return record.empty() ? nullptr : std::make_shared<FixtureRecorder>(record);
    }

    std::shared_ptr<MllmClient> mllm(const std::shared_ptr<FixtureStore>& store,
                                     const std::shared_ptr<FixtureRecorder>& recorder) const
    {
        if (store)
            return std::make_shared<FixtureMllmClient>(store);
        require(!mllm_endpoint.empty(), "no MLLM configured: pass --fixtures or --mllm-endpoint");
        std::shared_ptr<MllmClient> live = std::make_shared<HttpMllmClient>(MllmClientConfig{mllm_endpoint, mllm_model});
        return recorder ? std::make_shared<RecordingMllmClient>(live, recorder) : live;
    }

    std::shared_ptr<Tag2MaskClient> tag2mask(const std::shared_ptr<FixtureStore>& store,
                                             const std::shared_ptr<FixtureRecorder>& recorder) const
    {
        if (store)
            return std::make_shared<FixtureTag2MaskClient>(store);
        require(!grounding_endpoint.empty(), "no grounding service configured: pass --fixtures or --grounding-endpoint");
        std::shared_ptr<Tag2MaskClient> live = std::make_shared<HttpTag2MaskClient>(grounding_endpoint);
        return recorder ? std::make_shared<RecordingTag2MaskClient>(live, recorder) : live;
    }
};

std::string default_prompt(const char* name) { return (fs::path(ERASELORA_PROMPT_DIR) / name).string(); }

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct BfeCommand {
    std::string image, mask, out, prompt = default_prompt("bfe_prompt.txt");
    std::uint64_t seed = 0;
    bool sequential = false;
    ClientFlags clients;

    void attach(CLI::App* app)
    {
        app->add_option("--image", image, "Input image (PNG)")->required();
        app->add_option("--mask", mask, "Binary target mask (PNG)")->required();
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--prompt", prompt, "Classification prompt template");
        app->add_option("--seed", seed, "Accepted for uniformity; extraction is deterministic");
        app->add_flag("--sequential", sequential, "Localize tags one at a time");
        clients.attach(app);
    }

    int run() const
    {
        for (const auto& p : {image, mask, prompt})
            require(fs::exists(p), "file not found: " + p);
        const ImageTensor img = read_image_png(image);
        const BinaryMask target = read_mask_png(mask);
        require(target.height() == img.height() && target.width() == img.width(), "mask and image differ in shape");
        const auto store = clients.store();
        const auto recorder = clients.recorder();
        auto mllm = clients.mllm(store, recorder);
        auto t2m = clients.tag2mask(store, recorder);
        BfeOptions options;
        options.prompt_template = load_prompt_template(prompt);
        options.parallel_localization = !sequential;
        const BfeResult result = run_bfe(*mllm, *t2m, img, target, options);
        write_bfe_result(out, result);
        print_json({{"status", result.status()},
                    {"warnings", result.warnings},
                    {"background_tags", result.background_tags},
                    {"out", out}});
        return 0;
    }
};

struct RunCommand {
    std::string image, mask, bfe, tags, out, reuse, ground_truth;
    bool quiet = false;
    TuningFlags tuning;
    CLI::Option* tags_opt = nullptr;

    void attach(CLI::App* app)
    {
        app->add_option("--image", image, "Input image (PNG)")->required();
        auto* m = app->add_option("--mask", mask, "Three-label mask PNG (0 target, 1 non-target, 2 background)");
        auto* b = app->add_option("--bfe", bfe, "Directory (or bfe.json) written by `erase bfe`");
        m->excludes(b);
        tags_opt = app->add_option("--background-tags", tags, "Comma-separated background tags");
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--reuse-adapter", reuse, "Skip adaptation and reuse a saved lora.bin");
        app->add_option("--ground-truth", ground_truth, "Paired clean background for PSNR/SSIM");
        app->add_flag("--quiet", quiet, "No progress on stderr");
        tuning.attach(app);
    }

    int run() const
    {
        require(!mask.empty() || !bfe.empty(), "pass --mask or --bfe");
        require(fs::exists(image), "file not found: " + image);
        RemovalInputs in;
        in.image = read_image_png(image);
        if (!bfe.empty()) {
            const BfeResult r = read_bfe_result(bfe);
            in.labels = r.label_map;
            in.background_tags = r.background_tags;
        } else {
            require(fs::exists(mask), "file not found: " + mask);
            in.labels = read_label_png(mask);
        }
        if (tags_opt->count() > 0)
            in.background_tags = split_list(tags);
        if (!reuse.empty()) {
            require(fs::exists(reuse), "file not found: " + reuse);
            in.reuse_adapters = LoraState::deserialize(read_file_bytes(reuse));
        }
        if (!ground_truth.empty()) {
            require(fs::exists(ground_truth), "file not found: " + ground_truth);
            in.ground_truth = read_image_png(ground_truth);
        }
        const TtaConfig config = tuning.resolve();
        auto backbone = tuning.factory()();
        const int every = std::max(1, config.iterations / 10);
        try {
            const RemovalOutputs result = run_removal(*backbone, in, config, [&](const TtaStep& s) {
                if (!quiet && (s.iteration % every == 0 || s.iteration == config.iterations))
                    std::fprintf(stderr, "iter %d/%d  l_total %.6f  l_recon %.6f  l_puzzle %.6f\n", s.iteration,
                                 config.iterations, s.losses.l_total, s.losses.l_recon, s.losses.l_puzzle);
            });
            write_run_outputs(out, result);
            print_json({{"out", out},
                        {"result_sha256", result.summary["result_sha256"]},
                        {"metrics", result.summary["metrics"]}});
        } catch (const TtaAbort& e) {
            fs::create_directories(out);
            write_file_text(fs::path(out) / "trace.jsonl", e.trace().to_jsonl());
            throw;
        }
        return 0;
    }
};

struct EvalCommand {
    std::string manifest, pred, out;
    std::uint64_t seed = 0;

    void attach(CLI::App* app)
    {
        app->add_option("--manifest", manifest, "JSON-lines manifest (sample_id, image, label_mask, ...)")->required();
        app->add_option("--pred", pred, "Directory of <sample_id>.png predictions");
        app->add_option("--out", out, "Directory for metrics.csv and metrics.json")->required();
        app->add_option("--seed", seed, "Accepted for uniformity; evaluation is deterministic");
    }

    int run() const
    {
        require(fs::exists(manifest), "file not found: " + manifest);
        const auto entries = ingest_manifest(manifest);
        std::optional<fs::path> pred_dir;
        if (!pred.empty())
            pred_dir = pred;
        const MetricsReport report = evaluate_manifest(entries, pred_dir);
        report.write(out);
        std::size_t bad = 0;
        for (const auto& r : report.rows)
            if (r.status != "ok") {
                ++bad;
                std::fprintf(stderr, "%s: %s%s%s\n", r.sample_id.c_str(), r.status.c_str(), r.detail.empty() ? "" : ": ",
                             r.detail.c_str());
            }
        print_json({{"rows", report.rows.size()}, {"not_ok", bad}, {"out", out}});
        return bad == 0 ? 0 : kExitInput;
    }
};

struct SweepCommand {
    std::string out, ranks = "32", iters = "500", scenes = "0";
    int workers = 1;
    TuningFlags tuning;

    void attach(CLI::App* app)
    {
        app->add_option("--out", out, "Experiment directory (rerunning resumes it)")->required();
        app->add_option("--ranks", ranks, "Comma-separated ranks");
        app->add_option("--iters-list", iters, "Comma-separated iteration counts");
        app->add_option("--scenes", scenes, "Comma-separated synthetic scene seeds");
        app->add_option("--workers", workers, "Cells run in parallel")->check(CLI::PositiveNumber);
        tuning.attach(app, false);
    }

    int run() const
    {
        const ExperimentPlan plan =
            make_sweep(tuning.resolve(), split_numbers<int>(ranks), split_numbers<int>(iters), split_numbers<std::uint64_t>(scenes));
        const auto summary = run_experiment(plan, out, workers, [](const ExperimentCell& c) {
            std::fprintf(stderr, "cell %s done\n", c.name.c_str());
        });
        print_json({{"cells", plan.cells.size()},
                    {"run", summary.cells_run},
                    {"skipped", summary.cells_skipped},
                    {"report", summary.report.string()}});
        return 0;
    }
};

volatile std::sig_atomic_t g_stop = 0;

template <typename Server>
int serve_until_signal(Server& server, const std::string& host, int port, const char* what)
{
    const int bound = server.bind(host, port);
    std::thread t([&] { server.listen(); });
    server.wait_until_ready();
    std::fprintf(stderr, "%s listening on http://%s:%d\n", what, host.c_str(), bound);
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    while (!g_stop)
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    t.join();
    return 0;
}

struct ServeCommand {
    std::string host = "127.0.0.1", snapshots, segment_fixtures;
    int port = 8080;
    TuningFlags tuning;

    void attach(CLI::App* app)
    {
        app->add_option("--host", host, "Bind address");
        app->add_option("--port", port, "Port (0 picks a free one)");
        app->add_option("--snapshot-dir", snapshots, "Where POST /sessions/{id}/snapshot writes");
        app->add_option("--fixtures", segment_fixtures, "Replay prompt segmentation from this fixtures.jsonl")
            ->check(CLI::ExistingFile);
        tuning.attach(app);
    }

    int run() const
    {
        ServiceOptions options;
        options.backbone = tuning.factory();
        options.job_defaults = tuning.resolve();
        if (!segment_fixtures.empty())
            options.segmenter = std::make_shared<FixtureTag2MaskClient>(std::make_shared<FixtureStore>(segment_fixtures));
        if (!snapshots.empty())
            options.snapshot_dir = snapshots;
        Service service(std::move(options));
        return serve_until_signal(service, host, port, "service");
    }
};

struct ShimServeCommand {
    std::string host = "127.0.0.1";
    int port = 8090;

    void attach(CLI::App* app)
    {
        app->add_option("--host", host, "Bind address");
        app->add_option("--port", port, "Port (0 picks a free one)");
    }

    int run() const
    {
        ShimServer server([] { return std::make_unique<ToyBackbone>(); }, "toy");
        return serve_until_signal(server, host, port, "toy shim");
    }
};

struct SceneCommand {
    std::uint64_t seed = 0;
    int size = 64;
    std::string out, prompt = default_prompt("bfe_prompt.txt");

    void attach(CLI::App* app)
    {
        app->add_option("--seed", seed, "Scene seed");
        app->add_option("--size", size, "Image side in pixels")->check(CLI::Range(32, 512));
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--prompt", prompt, "Classification prompt the fixtures are recorded for");
    }

    int run() const
    {
        const SyntheticScene scene = generate_scene(seed, size);
        const SceneFiles files = write_scene_files(scene, out, load_prompt_template(prompt));
        print_json({{"image", files.image.string()},
                    {"target_mask", files.target_mask.string()},
                    {"labels", files.labels.string()},
                    {"ground_truth", files.ground_truth.string()},
                    {"fixtures", files.fixtures.string()},
                    {"background_tags", scene.tags.background_tags}});
        return 0;
    }
};

struct JudgeCommand {
    std::string image, result, target, out, prompt = default_prompt("judge_prompt.txt");
    std::uint64_t seed = 0;
    ClientFlags clients;

    void attach(CLI::App* app)
    {
        app->add_option("--image", image, "Original image (PNG)")->required();
        app->add_option("--result", result, "Removal result (PNG)")->required();
        app->add_option("--target", target, "Name of the removed object")->required();
        app->add_option("--out", out, "Write the verdict JSON here as well");
        app->add_option("--prompt", prompt, "Judge prompt template");
        app->add_option("--seed", seed, "Accepted for uniformity; the judge runs at temperature 0");
        clients.attach(app, false);
    }

    int run() const
    {
        for (const auto& p : {image, result, prompt})
            require(fs::exists(p), "file not found: " + p);
        const auto store = clients.store();
        auto mllm = clients.mllm(store, clients.recorder());
        const JudgeVerdict v =
            judge_removal(*mllm, read_image_png(image), read_image_png(result), target, load_prompt_template(prompt));
        const nlohmann::json j{{"success", v.success}, {"score", v.score}};
        if (!out.empty())
            write_file_text(out, j.dump(2) + "\n");
        print_json(j);
        return 0;
    }
};

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Background-aware object removal: tag extraction, test-time LoRA adaptation, evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "erase 0.1.0");

    BfeCommand bfe;
    RunCommand run;
    EvalCommand eval;
    SweepCommand sweep;
    ServeCommand serve;
    ShimServeCommand shim_serve;
    SceneCommand scene;
    JudgeCommand judge;
    bfe.attach(app.add_subcommand("bfe", "Classify tags and build the three-label mask"));
    run.attach(app.add_subcommand("run", "Adapt on one image and sample the removal"));
    eval.attach(app.add_subcommand("eval", "Score predictions listed in a manifest"));
    sweep.attach(app.add_subcommand("sweep", "Rank x iteration sweep over synthetic scenes"));
    serve.attach(app.add_subcommand("serve", "Session HTTP API for interactive removal"));
    shim_serve.attach(app.add_subcommand("shim-serve", "Serve the toy backbone over the shim protocol"));
    scene.attach(app.add_subcommand("scene", "Write a synthetic scene with recorded client fixtures"));
    judge.attach(app.add_subcommand("judge", "Ask a multimodal judge whether the removal succeeded"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    }

    try {
        if (app.got_subcommand("bfe"))
            return bfe.run();
        if (app.got_subcommand("run"))
            return run.run();
        if (app.got_subcommand("eval"))
            return eval.run();
        if (app.got_subcommand("sweep"))
            return sweep.run();
        if (app.got_subcommand("serve"))
            return serve.run();
        if (app.got_subcommand("shim-serve"))
            return shim_serve.run();
        if (app.got_subcommand("scene"))
            return scene.run();
        if (app.got_subcommand("judge"))
            return judge.run();
    } catch (const Error& e) {
        std::fprintf(stderr, "erase: %s: %s\n", std::string(to_string(e.code())).c_str(), e.what());
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "erase: %s\n", e.what());
        return kExitInput;
    }
    return kExitInput;
}
