#include <gtest/gtest.h>

#include <filesystem>

#include "eraselora/harness.hpp"
#include "eraselora/pipeline.hpp"

using namespace eraselora;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("eraselora_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

TtaConfig quick_config()
{
    TtaConfig c;
    c.iterations = 3;
    c.rank = 2;
    c.learning_rate = 1e-2;
    c.sampling_steps = 4;
    return c;
}

/// Writes scene `seed` as <dir>/<id>_{image,labels,gt}.png and returns its manifest line.
std::string add_sample(const fs::path& dir, const std::string& id, std::uint64_t seed)
{
    const auto s = generate_scene(seed);
    write_image_png(dir / (id + "_image.png"), s.image);
    write_label_png(dir / (id + "_labels.png"), s.labels);
    write_image_png(dir / (id + "_gt.png"), s.ground_truth);
    return nlohmann::json{{"sample_id", id},
                          {"image", id + "_image.png"},
                          {"label_mask", id + "_labels.png"},
                          {"ground_truth", id + "_gt.png"}}
        .dump();
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

} // namespace

TEST(ConfigJson, OverridesOnlyGivenKeys)
{
    TtaConfig c;
    apply_config_json(nlohmann::json::parse(R"({"rank":8,"lambda":0.5})"), c);
    EXPECT_EQ(c.rank, 8);
    EXPECT_EQ(c.lambda, 0.5);
    EXPECT_EQ(c.iterations, 500);
    EXPECT_EQ(c.tau, 100.0);
    EXPECT_THROW(apply_config_json(nlohmann::json::parse(R"({"rnak":8})"), c), Error);
    EXPECT_THROW(apply_config_json(nlohmann::json::parse(R"({"rank":"eight"})"), c), Error);
    EXPECT_THROW(apply_config_json(nlohmann::json::parse(R"({"rank":0})"), c), Error);
}

TEST(RunRemoval, FixedSeedGivesIdenticalOutputs)
{
    const auto scene = generate_scene(0);
    const RemovalInputs in{scene.image, scene.labels, scene.tags.background_tags, std::nullopt, std::nullopt};
    ToyBackbone a, b;
    const auto x = run_removal(a, in, quick_config());
    const auto y = run_removal(b, in, quick_config());
    EXPECT_EQ(x.summary.dump(), y.summary.dump());
    EXPECT_EQ(x.trace.to_jsonl(), y.trace.to_jsonl());
    EXPECT_EQ(x.summary["iterations_run"], 3);
    EXPECT_FALSE(x.summary.contains("wall_clock_seconds"));
}

TEST(RunRemoval, ReusedAdaptersSkipAdaptationAndReproduceTheResult)
{
    const auto scene = generate_scene(1);
    RemovalInputs in{scene.image, scene.labels, scene.tags.background_tags, std::nullopt, std::nullopt};
    ToyBackbone a;
    const auto first = run_removal(a, in, quick_config());
    in.reuse_adapters = LoraState::deserialize(first.adapters.serialize());
    ToyBackbone b;
    const auto again = run_removal(b, in, quick_config());
    EXPECT_TRUE(again.trace.steps.empty());
    EXPECT_EQ(again.summary["reused_adapters"], true);
    // adapters round-trip through float32, so pixels agree to quantisation
    EXPECT_GT(psnr_over(first.result, again.result, BinaryMask(64, 64, 1)), 50.0);
}

TEST(RunRemoval, WritesTheFourRunFiles)
{
    const auto scene = generate_scene(2);
    ToyBackbone bb;
    const auto out = run_removal(bb, {scene.image, scene.labels, scene.tags.background_tags, std::nullopt, std::nullopt},
                                 quick_config());
    const auto dir = scratch("run_files");
    write_run_outputs(dir, out);
    for (const char* f : {"result.png", "trace.jsonl", "lora.bin", "summary.json"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    EXPECT_EQ(read_image_png(dir / "result.png").height(), 64);
    EXPECT_EQ(LoraState::deserialize(read_file_bytes(dir / "lora.bin")).adapters.size(), 8u);
}

TEST(RunRemoval, LabelMapMustMatchImage)
{
    const auto scene = generate_scene(3);
    ToyBackbone bb;
    EXPECT_THROW(run_removal(bb, {scene.image, LabelMap(32, 32), {}, std::nullopt, std::nullopt}, quick_config()), Error);
}

TEST(IngestManifest, EmptyFileGivesNoEntries)
{
    const auto dir = scratch("empty");
    write_file_text(dir / "m.jsonl", "");
    EXPECT_TRUE(ingest_manifest(dir / "m.jsonl").empty());
}

TEST(IngestManifest, ThreeRowsComeBackInFileOrder)
{
    const auto dir = scratch("three");
    std::string text;
    for (const auto& [id, seed] : std::vector<std::pair<std::string, int>>{{"c", 1}, {"a", 2}, {"b", 3}})
        text += add_sample(dir, id, static_cast<std::uint64_t>(seed)) + "\n";
    write_file_text(dir / "m.jsonl", text);
    const auto entries = ingest_manifest(dir / "m.jsonl");
    ASSERT_EQ(entries.size(), 3u);
    EXPECT_EQ(entries[0].sample_id, "c");
    EXPECT_EQ(entries[1].sample_id, "a");
    EXPECT_EQ(entries[2].sample_id, "b");
    EXPECT_EQ(entries[1].image_path, dir / "a_image.png");
    EXPECT_TRUE(entries[2].ground_truth_path.has_value());
}

TEST(IngestManifest, MaskValueThreeIsRejected)
{
    const auto dir = scratch("bad_mask");
    Bytes pixels(64 * 64, 2);
    pixels[100] = 3;
    write_file_bytes(dir / "labels.png", detail::encode_png(pixels.data(), 64, 64, PNG_FORMAT_GRAY));
    write_image_png(dir / "image.png", ImageTensor(64, 64, 3));
    write_file_text(dir / "m.jsonl", R"({"sample_id":"x","image":"image.png","label_mask":"labels.png"})" "\n");
    try {
        ingest_manifest(dir / "m.jsonl");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_input);
        EXPECT_NE(std::string(e.what()).find(":1:"), std::string::npos);
    }
}

TEST(IngestManifest, DuplicateIdsAndMissingFilesAreRejected)
{
    const auto dir = scratch("dups");
    const auto row = add_sample(dir, "s", 4);
    write_file_text(dir / "dup.jsonl", row + "\n" + row + "\n");
    EXPECT_THROW(ingest_manifest(dir / "dup.jsonl"), Error);
    write_file_text(dir / "missing.jsonl", R"({"sample_id":"x","image":"nope.png","label_mask":"s_labels.png"})" "\n");
    EXPECT_THROW(ingest_manifest(dir / "missing.jsonl"), Error);
    write_file_text(dir / "nokey.jsonl", R"({"sample_id":"x","image":"s_image.png"})" "\n");
    EXPECT_THROW(ingest_manifest(dir / "nokey.jsonl"), Error);
}

TEST(EvaluateManifest, PredictionEqualToInputPreservesBackgroundExactly)
{
    const auto dir = scratch("identity");
    std::string text;
    for (int i = 0; i < 2; ++i)
        text += add_sample(dir, "s" + std::to_string(i), static_cast<std::uint64_t>(i)) + "\n";
    write_file_text(dir / "m.jsonl", text);
    fs::create_directories(dir / "pred");
    for (int i = 0; i < 2; ++i)
        fs::copy_file(dir / ("s" + std::to_string(i) + "_image.png"), dir / "pred" / ("s" + std::to_string(i) + ".png"));
    const auto report = evaluate_manifest(ingest_manifest(dir / "m.jsonl"), dir / "pred");
    ASSERT_EQ(report.rows.size(), 2u);
    for (const auto& r : report.rows) {
        EXPECT_EQ(r.status, "ok");
        EXPECT_NEAR(r.bg_pres, 1.0, 1e-12);
        EXPECT_TRUE(r.psnr.has_value());
    }
}

TEST(EvaluateManifest, MissingPredictionIsFlaggedAbsent)
{
    const auto dir = scratch("absent");
    write_file_text(dir / "m.jsonl", add_sample(dir, "only", 5) + "\n");
    const auto report = evaluate_manifest(ingest_manifest(dir / "m.jsonl"), dir / "pred");
    ASSERT_EQ(report.rows.size(), 1u);
    EXPECT_EQ(report.rows[0].status, "absent");
    EXPECT_FALSE(report.all_ok());
    const auto csv = report.to_csv();
    EXPECT_NE(csv.find("only,,,,,,,absent"), std::string::npos);
}

TEST(MetricsReport, MeanRowIsTheArithmeticMeanOfOkRows)
{
    MetricsReport r;
    r.rows.push_back({"a", "ok", "", 0.2, 0.1, 0.9, 20.0, 0.5, std::nullopt});
    r.rows.push_back({"b", "ok", "", 0.6, 0.3, 0.7, 30.0, 0.7, std::nullopt});
    r.rows.push_back({"c", "absent", "", 9.0, 9.0, 9.0, std::nullopt, std::nullopt, std::nullopt});
    const auto m = r.mean_row();
    EXPECT_DOUBLE_EQ(m.bg_sim, (0.2 + 0.6) / 2);
    EXPECT_DOUBLE_EQ(m.fg_sim, (0.1 + 0.3) / 2);
    EXPECT_DOUBLE_EQ(m.bg_pres, (0.9 + 0.7) / 2);
    EXPECT_DOUBLE_EQ(*m.psnr, 25.0);
    EXPECT_DOUBLE_EQ(*m.ssim, 0.6);
    EXPECT_FALSE(m.lpips.has_value());
}

TEST(MetricsReport, CsvCarriesPaperHeadersAndInfinity)
{
    MetricsReport r;
    r.rows.push_back({"x", "ok", "", 1.0, 0.0, 1.0, std::numeric_limits<double>::infinity(), 1.0, std::nullopt});
    const auto csv = r.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "sample_id,BG Sim.,FG Sim.,BG Pres.,PSNR,SSIM,LPIPS,status");
    EXPECT_NE(csv.find("x,1.000000,0.000000,1.000000,inf,1.000000,,ok"), std::string::npos);
    EXPECT_EQ(r.to_json()["rows"][0]["psnr"], "inf");
    EXPECT_TRUE(r.to_json()["rows"][0]["lpips"].is_null());
}

TEST(Experiment, SingleCellEmitsMetricsAndTraceThenSkipsOnRerun)
{
    const auto dir = scratch("one_cell");
    const auto plan = make_sweep(quick_config(), {2}, {3}, {0});
    const auto first = run_experiment(plan, dir);
    EXPECT_EQ(first.cells_run, 1u);
    const auto cell_dir = dir / "cells" / plan.cells[0].directory_name();
    EXPECT_TRUE(fs::exists(cell_dir / "metrics.csv"));
    EXPECT_TRUE(fs::exists(cell_dir / "metrics.json"));
    EXPECT_TRUE(fs::exists(cell_dir / "trace_scene-0.jsonl"));
    const auto second = run_experiment(plan, dir);
    EXPECT_EQ(second.cells_run, 0u);
    EXPECT_EQ(second.cells_skipped, 1u);
}

TEST(Experiment, TwoByTwoSweepEmitsFourCells)
{
    const auto dir = scratch("two_by_two");
    const auto plan = make_sweep(quick_config(), {1, 2}, {2, 3}, {0});
    ASSERT_EQ(plan.cells.size(), 4u);
    run_experiment(plan, dir, 2);
    std::size_t cells = 0;
    for (const auto& e : fs::directory_iterator(dir / "cells"))
        cells += e.is_directory() ? 1 : 0;
    EXPECT_EQ(cells, 4u);
    const auto report = slurp(dir / "report.csv");
    EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 5);
    EXPECT_EQ(report.find("r1-i2"), report.find('\n') + 1);
}

TEST(Experiment, InterruptedThenResumedReportMatchesUninterrupted)
{
    const auto plan = make_sweep(quick_config(), {1, 2}, {2, 3}, {0, 1});
    const auto straight = scratch("straight"), resumed = scratch("resumed");
    run_experiment(plan, straight, 2);

    ExperimentPlan partial;
    partial.cells = {plan.cells[0], plan.cells[2]};
    run_experiment(partial, resumed);
    const auto summary = run_experiment(plan, resumed, 2);
    EXPECT_EQ(summary.cells_skipped, 2u);
    EXPECT_EQ(summary.cells_run, 2u);
    EXPECT_EQ(slurp(straight / "report.csv"), slurp(resumed / "report.csv"));
    for (const auto& c : plan.cells)
        EXPECT_EQ(slurp(straight / "cells" / c.directory_name() / "metrics.csv"),
                  slurp(resumed / "cells" / c.directory_name() / "metrics.csv"));
}

TEST(Experiment, ChangedConfigInvalidatesTheDoneMarker)
{
    const auto dir = scratch("invalidate");
    auto plan = make_sweep(quick_config(), {2}, {2}, {0});
    run_experiment(plan, dir);
    const auto old_dir = dir / "cells" / plan.cells[0].directory_name();
    write_file_text(old_dir / "done.json", R"({"digest":"stale"})" "\n");
    EXPECT_EQ(run_experiment(plan, dir).cells_run, 1u);
}
