#pragma once

// Benchmark harness: manifest ingestion, per-sample metric reports and resumable
// rank/iteration sweeps over synthetic scenes.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "eraselora/digest.hpp"
#include "eraselora/metrics.hpp"
#include "eraselora/pipeline.hpp"
#include "eraselora/png_io.hpp"
#include "eraselora/scene.hpp"
#include "eraselora/toy_backbone.hpp"

namespace eraselora {

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Reads a JSON-lines manifest. Paths are relative to the manifest's directory; every
/// referenced file must exist and every label mask must decode to values in {0,1,2}.
inline std::vector<SampleManifestEntry> ingest_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        fail(ErrorCode::invalid_input, "cannot open manifest " + path.string());
    const std::filesystem::path base = path.parent_path();
    std::vector<SampleManifestEntry> out;
    std::set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::invalid_input, where + e.what());
        }
        auto text = [&](const char* key, bool required) -> std::optional<std::string> {
            if (!j.contains(key)) {
                if (required)
                    fail(ErrorCode::invalid_input, where + "missing key '" + key + "'");
                return std::nullopt;
            }
            if (!j[key].is_string() || j[key].get<std::string>().empty())
                fail(ErrorCode::invalid_input, where + "'" + key + "' must be a non-empty string");
            return j[key].get<std::string>();
        };
        auto existing = [&](const std::string& rel) {
            const std::filesystem::path p = base / rel;
            if (!std::filesystem::exists(p))
                fail(ErrorCode::invalid_input, where + "file not found: " + p.string());
            return p;
        };
        require(j.is_object(), where + "manifest rows must be JSON objects");
        SampleManifestEntry e;
        e.sample_id = *text("sample_id", true);
        if (!seen.insert(e.sample_id).second)
            fail(ErrorCode::invalid_input, where + "duplicate sample_id '" + e.sample_id + "'");
        e.image_path = existing(*text("image", true));
        e.label_mask_path = existing(*text("label_mask", true));
        if (auto r = text("result", false))
            e.result_path = base / *r;
        if (auto g = text("ground_truth", false))
            e.ground_truth_path = existing(*g);
        try {
            const LabelMap labels = read_label_png(e.label_mask_path);
            const auto header = detail::peek_png_header(read_file_bytes(e.image_path));
            require(static_cast<int>(header.height) == labels.height() &&
                        static_cast<int>(header.width) == labels.width(),
                    "label mask and image differ in size");
        } catch (const Error& err) {
            fail(ErrorCode::invalid_input, where + err.what());
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::string sample_id;
    std::string status = "ok"; // ok | absent | error
    std::string detail;
    double bg_sim = 0.0;
    double fg_sim = 0.0;
    double bg_pres = 0.0;
    std::optional<double> psnr;
    std::optional<double> ssim;
    std::optional<double> lpips;
};

namespace detail {

inline std::string format_metric(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::string format_metric(const std::optional<double>& v) { return v ? format_metric(*v) : ""; }

inline nlohmann::json metric_json(const std::optional<double>& v)
{
    if (!v)
        return nullptr;
    if (std::isinf(*v))
        return *v > 0 ? "inf" : "-inf";
    return *v;
}

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos)
        return s;
    std::string q = "\"";
    for (char c : s)
        q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

} // namespace detail

struct MetricsReport {
    std::vector<MetricsRow> rows;

    /// Mean over rows with status ok; a paired column is averaged over the rows that have it.
    MetricsRow mean_row() const
    {
        MetricsRow m;
        m.sample_id = "mean";
        std::size_t n = 0;
        double psnr = 0, ssim = 0, lpips = 0;
        std::size_t np = 0, ns = 0, nl = 0;
        for (const auto& r : rows) {
            if (r.status != "ok")
                continue;
            ++n;
            m.bg_sim += r.bg_sim;
            m.fg_sim += r.fg_sim;
            m.bg_pres += r.bg_pres;
            if (r.psnr)
                psnr += *r.psnr, ++np;
            if (r.ssim)
                ssim += *r.ssim, ++ns;
            if (r.lpips)
                lpips += *r.lpips, ++nl;
        }
        if (n == 0) {
            m.status = "empty";
            return m;
        }
        m.bg_sim /= static_cast<double>(n);
        m.fg_sim /= static_cast<double>(n);
        m.bg_pres /= static_cast<double>(n);
        if (np)
            m.psnr = psnr / static_cast<double>(np);
        if (ns)
            m.ssim = ssim / static_cast<double>(ns);
        if (nl)
            m.lpips = lpips / static_cast<double>(nl);
        return m;
    }

    bool all_ok() const
    {
        return std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.status == "ok"; });
    }

    std::string to_csv() const
    {
        std::string out = "sample_id,BG Sim.,FG Sim.,BG Pres.,PSNR,SSIM,LPIPS,status\n";
        auto emit = [&](const MetricsRow& r) {
            const bool ok = r.status == "ok" || r.sample_id == "mean";
            out += detail::csv_field(r.sample_id) + "," + (ok ? detail::format_metric(r.bg_sim) : "") + "," +
                   (ok ? detail::format_metric(r.fg_sim) : "") + "," + (ok ? detail::format_metric(r.bg_pres) : "") +
                   "," + detail::format_metric(r.psnr) + "," + detail::format_metric(r.ssim) + "," +
                   detail::format_metric(r.lpips) + "," + r.status + "\n";
        };
        for (const auto& r : rows)
            emit(r);
        emit(mean_row());
        return out;
    }

    nlohmann::json to_json() const
    {
        auto row = [](const MetricsRow& r) {
            nlohmann::json j{{"sample_id", r.sample_id}, {"status", r.status}};
            if (!r.detail.empty())
                j["detail"] = r.detail;
            if (r.status == "ok" || r.sample_id == "mean") {
                j["bg_sim"] = r.bg_sim;
                j["fg_sim"] = r.fg_sim;
                j["bg_pres"] = r.bg_pres;
            }
            j["psnr"] = detail::metric_json(r.psnr);
            j["ssim"] = detail::metric_json(r.ssim);
            j["lpips"] = detail::metric_json(r.lpips);
            return j;
        };
        nlohmann::json rows_json = nlohmann::json::array();
        for (const auto& r : rows)
            rows_json.push_back(row(r));
        return {{"rows", rows_json}, {"mean", row(mean_row())}};
    }

    void write(const std::filesystem::path& dir, const std::string& stem = "metrics") const
    {
        std::filesystem::create_directories(dir);
        write_file_text(dir / (stem + ".csv"), to_csv());
        write_file_text(dir / (stem + ".json"), to_json().dump(2) + "\n");
    }
};

struct EvaluationOptions {
    const FeatureExtractor* extractor = nullptr; // toy histogram extractor when null
    const PerceptualMetric* perceptual = nullptr;
};

inline MetricsRow evaluate_sample(const std::string& sample_id, const ImageTensor& input, const ImageTensor& output,
                                  const LabelMap& labels, const ImageTensor* ground_truth,
                                  const EvaluationOptions& options = {})
{
    const ToyHistogramExtractor fallback;
    const FeatureExtractor& f = options.extractor ? *options.extractor : fallback;
    require(input.same_shape(output), "prediction for '" + sample_id + "' differs in shape from its input");
    const RegionSets regions = RegionSets::from_labels(labels);
    MetricsRow r;
    r.sample_id = sample_id;
    r.bg_sim = bg_sim(f, input, output, regions);
    r.fg_sim = fg_sim_weighted(r.bg_sim, f, input, output, regions);
    r.bg_pres = bg_pres(input, output, regions);
    if (ground_truth) {
        const auto p = paired_metrics(output, *ground_truth, regions, options.perceptual);
        r.psnr = p.psnr;
        r.ssim = p.ssim;
        r.lpips = p.lpips;
    }
    return r;
}

/// The prediction is the row's `result` path when given, else <pred_dir>/<sample_id>.png.
inline MetricsReport evaluate_manifest(const std::vector<SampleManifestEntry>& entries,
                                       const std::optional<std::filesystem::path>& pred_dir,
                                       const EvaluationOptions& options = {})
{
    MetricsReport report;
    for (const auto& e : entries) {
        std::optional<std::filesystem::path> pred = e.result_path;
        if (!pred && pred_dir)
            pred = *pred_dir / (e.sample_id + ".png");
        if (!pred || !std::filesystem::exists(*pred)) {
            MetricsRow r;
            r.sample_id = e.sample_id;
            r.status = "absent";
            r.detail = pred ? "missing " + pred->string() : "no prediction path";
            report.rows.push_back(r);
            continue;
        }
        try {
            const ImageTensor input = read_image_png(e.image_path);
            const ImageTensor output = read_image_png(*pred);
            const LabelMap labels = read_label_png(e.label_mask_path);
            std::optional<ImageTensor> gt;
            if (e.ground_truth_path)
                gt = read_image_png(*e.ground_truth_path);
            report.rows.push_back(evaluate_sample(e.sample_id, input, output, labels, gt ? &*gt : nullptr, options));
        } catch (const Error& err) {
            MetricsRow r;
            r.sample_id = e.sample_id;
            r.status = "error";
            r.detail = err.what();
            report.rows.push_back(r);
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ExperimentCell {
    std::string name;
    TtaConfig config;
    std::vector<std::uint64_t> scene_seeds;

    std::string digest() const
    {
        const nlohmann::json j{{"backbone", "toy"}, {"config", config}, {"scenes", scene_seeds}};
        return sha256_hex(std::string_view(j.dump())).substr(0, 16);
    }
    std::string directory_name() const { return name + "-" + digest(); }
};

struct ExperimentPlan {
    std::vector<ExperimentCell> cells;
};

/// One cell per (rank, iterations) pair, ranks outermost.
inline ExperimentPlan make_sweep(const TtaConfig& base, const std::vector<int>& ranks,
                                 const std::vector<int>& iterations, const std::vector<std::uint64_t>& scene_seeds)
{
    require(!ranks.empty() && !iterations.empty() && !scene_seeds.empty(), "sweep axes must be non-empty");
    ExperimentPlan plan;
    for (int r : ranks)
        for (int it : iterations) {
            ExperimentCell c;
            c.config = base;
            c.config.rank = r;
            c.config.iterations = it;
            c.config.validate();
            c.name = "r" + std::to_string(r) + "-i" + std::to_string(it);
            c.scene_seeds = scene_seeds;
            plan.cells.push_back(std::move(c));
        }
    return plan;
}

struct ExperimentSummary {
    std::size_t cells_run = 0;
    std::size_t cells_skipped = 0;
    std::filesystem::path report;
};

/// Runs one cell into `dir`: metrics.{csv,json}, one trace per scene, then done.json last.
inline void run_cell(const ExperimentCell& cell, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    MetricsReport report;
    for (std::uint64_t seed : cell.scene_seeds) {
        const SyntheticScene scene = generate_scene(seed);
        ToyBackbone backbone;
        RemovalInputs in{scene.image, scene.labels, scene.tags.background_tags, std::nullopt, std::nullopt};
        TtaConfig cfg = cell.config;
        const RemovalOutputs out = run_removal(backbone, in, cfg);
        const std::string id = "scene-" + std::to_string(seed);
        write_file_text(dir / ("trace_" + id + ".jsonl"), out.trace.to_jsonl());
        report.rows.push_back(evaluate_sample(id, scene.image, out.result, scene.labels, &scene.ground_truth));
    }
    report.write(dir);
    write_file_text(dir / "done.json", nlohmann::json{{"digest", cell.digest()}}.dump() + "\n");
}

inline bool cell_done(const ExperimentCell& cell, const std::filesystem::path& dir)
{
    const auto marker = dir / "done.json";
    if (!std::filesystem::exists(marker))
        return false;
    try {
        return nlohmann::json::parse(read_text_file(marker)).value("digest", "") == cell.digest();
    } catch (const nlohmann::json::exception&) {
        return false;
    }
}

/// Runs pending cells on `workers` threads, then writes report.csv with one mean row per
/// cell in plan order. Cells whose done marker matches their digest are skipped.
inline ExperimentSummary run_experiment(const ExperimentPlan& plan, const std::filesystem::path& out_dir,
                                        int workers = 1,
                                        const std::function<void(const ExperimentCell&)>& on_cell_done = {})
{
    require(!plan.cells.empty(), "experiment plan has no cells");
    require(workers >= 1, "worker count must be at least 1");
    std::filesystem::create_directories(out_dir / "cells");
    ExperimentSummary summary;
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < plan.cells.size(); ++i) {
        if (cell_done(plan.cells[i], out_dir / "cells" / plan.cells[i].directory_name()))
            ++summary.cells_skipped;
        else
            pending.push_back(i);
    }

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex, callback_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= pending.size())
                return;
            const auto& cell = plan.cells[pending[k]];
            try {
                run_cell(cell, out_dir / "cells" / cell.directory_name());
                if (on_cell_done) {
                    std::lock_guard lock(callback_mutex);
                    on_cell_done(cell);
                }
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error)
                    first_error = std::current_exception();
            }
        }
    };
    const int n = std::min<int>(workers, static_cast<int>(std::max<std::size_t>(pending.size(), 1)));
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i)
        pool.emplace_back(worker);
    for (auto& t : pool)
        t.join();
    if (first_error)
        std::rethrow_exception(first_error);
    summary.cells_run = pending.size();

    std::string csv = "cell,rank,iterations,BG Sim.,FG Sim.,BG Pres.,PSNR,SSIM\n";
    for (const auto& cell : plan.cells) {
        const auto j = nlohmann::json::parse(read_text_file(out_dir / "cells" / cell.directory_name() / "metrics.json"));
        const auto& m = j.at("mean");
        auto num = [](const nlohmann::json& v) {
            if (v.is_null())
                return std::string();
            if (v.is_string())
                return v.get<std::string>();
            return detail::format_metric(v.get<double>());
        };
        csv += cell.name + "," + std::to_string(cell.config.rank) + "," + std::to_string(cell.config.iterations) + "," +
               num(m.at("bg_sim")) + "," + num(m.at("fg_sim")) + "," + num(m.at("bg_pres")) + "," + num(m.at("psnr")) +
               "," + num(m.at("ssim")) + "\n";
    }
    summary.report = out_dir / "report.csv";
    write_file_text(summary.report, csv);
    return summary;
}

} // namespace eraselora
