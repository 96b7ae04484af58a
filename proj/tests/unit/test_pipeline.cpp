#include <doctest.h>

#include <filesystem>
#include <map>

#include "taskspace/common.hpp"
#include "taskspace/pipeline.hpp"
#include "taskspace/report.hpp"

using namespace taskspace;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p.string();
}

/// A configuration small enough for unit tests: 4 paradigms of 16 pairs,
/// one-layer model, one epoch.
RunConfig mini_config(const std::string& dir, std::uint64_t seed = 9) {
    RunConfig c = RunConfig::defaults();
    c.seed = seed;
    c.out_dir = dir;
    c.suite.phenomena = 2;
    c.suite.paradigms_per = 2;
    c.suite.pairs_per = 16;
    c.corpus_sentences = 240;
    c.model.n_layers = 1;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ffn = 32;
    c.model.context_length = 24;
    c.model.dropout_rate = 0.1;
    c.pretrain.batch_size = 16;
    c.pretrain.lr = 2e-3;
    c.pretrain.epochs = 2;
    c.pretrain.checkpoint_epochs = {0, 1, 2};
    c.probe.lr = 0.05;
    c.probe.epsilon = 1e-6;
    c.probe.max_steps = 3;
    return c;
}

std::map<std::string, std::vector<std::byte>> snapshot_files(const std::string& dir,
                                                             const std::string& ext) {
    std::map<std::string, std::vector<std::byte>> out;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ext)
            out[fs::relative(entry.path(), dir).string()] = read_binary_file(entry.path().string());
    return out;
}

}  // namespace

TEST_CASE("run config parsing and validation") {
    SUBCASE("seed is mandatory") {
        try {
            RunConfig::from_json(R"({"jobs": 1})");
            FAIL("expected config error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::config_error);
            CHECK(std::string(e.what()).find("seed") != std::string::npos);
        }
    }
    SUBCASE("wrong field types name the path") {
        try {
            RunConfig::from_json(R"({"seed": 1, "model": {"d_model": "wide"}})");
            FAIL("expected config error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::config_error);
            CHECK(std::string(e.what()).find("model.d_model") != std::string::npos);
        }
    }
    SUBCASE("values land in the right places") {
        RunConfig c = RunConfig::from_json(
            R"({"seed": 7, "out_dir": "x", "corpus": {"pairs_per": 123},
                "probe": {"epsilon": 0.5}, "pretrain": {"epochs": 3}})");
        CHECK(c.seed == 7);
        CHECK(c.out_dir == "x");
        CHECK(c.suite.pairs_per == 123);
        CHECK(c.probe.epsilon == 0.5);
        CHECK(c.pretrain.epochs == 3);
    }
    SUBCASE("hash is stable and sensitive") {
        RunConfig a = RunConfig::from_json(R"({"seed": 7})");
        RunConfig b = RunConfig::from_json(R"({"seed": 7})");
        RunConfig c = RunConfig::from_json(R"({"seed": 8})");
        CHECK(a.hash() == b.hash());
        CHECK(a.hash() != c.hash());
    }
    SUBCASE("unresolvable ingest path fails validation") {
        CHECK_THROWS_AS(
            RunConfig::from_json(R"({"seed":1,"corpus":{"ingest_path":"/nope/missing"}})"),
            Error);
    }
    SUBCASE("run_command maps error codes to exit codes") {
        CHECK(run_command([]() -> int { fail(Errc::config_error, "x"); }) == kExitConfig);
        CHECK(run_command([]() -> int { fail(Errc::missing_artifact, "x"); }) ==
              kExitMissingArtifact);
        CHECK(run_command([]() -> int { fail(Errc::io_error, "x"); }) == kExitFailure);
        CHECK(run_command([]() -> int { return 0; }) == 0);
    }
}

TEST_CASE("generate emits the suite and reruns are hash-identical") {
    RunConfig config = mini_config(fresh_dir("pipe_gen"));
    REQUIRE(cmd_generate(config) == kExitOk);
    CHECK(fs::exists(fs::path(suite_dir(config)) / "manifest.json"));
    TaskSuite suite = load_suite(config);
    CHECK(suite.paradigms.size() == 4);

    auto first = snapshot_files(suite_dir(config), ".jsonl");
    REQUIRE(cmd_generate(config) == kExitOk);
    CHECK(snapshot_files(suite_dir(config), ".jsonl") == first);
}

TEST_CASE("pretrain writes scheduled checkpoints and a per-step loss log") {
    RunConfig config = mini_config(fresh_dir("pipe_pre"));
    REQUIRE(cmd_generate(config) == kExitOk);
    REQUIRE(cmd_pretrain(config) == kExitOk);

    auto epochs = list_checkpoint_epochs(config);
    CHECK(epochs == std::vector<std::int64_t>{0, 1, 2});
    const std::string loss_csv =
        read_text_file((fs::path(checkpoints_dir(config)) / "loss.csv").string());
    // 216 train sentences (240 - 10% valid), batch 16 -> 14 steps/epoch, 2 epochs
    std::size_t rows = 0;
    for (char ch : loss_csv)
        if (ch == '\n') ++rows;
    CHECK(rows == 1 + 28);

    SUBCASE("checkpoints load and carry the epoch") {
        LmCheckpoint ckpt = load_checkpoint(checkpoint_path(config, 2));
        CHECK(ckpt.epoch == 2);
        CHECK(ckpt.config.vocab_size == static_cast<int>(load_suite(config).vocab.size()));
    }
    SUBCASE("schedule [0] yields the init checkpoint only") {
        RunConfig c0 = mini_config(fresh_dir("pipe_pre0"));
        c0.pretrain.epochs = 0;
        c0.pretrain.checkpoint_epochs = {0};
        REQUIRE(cmd_generate(c0) == kExitOk);
        REQUIRE(cmd_pretrain(c0) == kExitOk);
        CHECK(list_checkpoint_epochs(c0) == std::vector<std::int64_t>{0});
    }
    SUBCASE("pretraining without a suite is a missing artifact") {
        RunConfig c1 = mini_config(fresh_dir("pipe_pre_missing"));
        CHECK(run_command([&] { return cmd_pretrain(c1); }) == kExitMissingArtifact);
    }
}

TEST_CASE("probe writes TTS, records and gradient dumps") {
    RunConfig config = mini_config(fresh_dir("pipe_probe"));
    REQUIRE(cmd_generate(config) == kExitOk);
    REQUIRE(cmd_pretrain(config) == kExitOk);

    SUBCASE("selector final probes the last checkpoint") {
        REQUIRE(cmd_probe(config, "final", false) == kExitOk);
        const std::string dir = probe_dir(config, 2);
        CHECK(fs::exists(fs::path(dir) / "tts.csv"));
        CHECK(fs::exists(fs::path(dir) / "records.csv"));
        CHECK(fs::exists(fs::path(dir) / "probe_manifest.json"));
        TaskSpace tts = read_space_csv((fs::path(dir) / "tts.csv").string(), "transfer");
        CHECK(tts.size() == 4);
        // gradient dumps, one per task
        std::size_t dumps = 0;
        for (const auto& e : fs::directory_iterator(fs::path(dir) / "grads")) {
            ++dumps;
            (void)e;
        }
        CHECK(dumps == 4);
    }
    SUBCASE("selector all probes every checkpoint gradient-only") {
        REQUIRE(cmd_probe(config, "all", true) == kExitOk);
        for (std::int64_t e : {0, 1, 2}) {
            CHECK(fs::is_directory(fs::path(probe_dir(config, e)) / "grads"));
            CHECK_FALSE(fs::exists(fs::path(probe_dir(config, e)) / "tts.csv"));
        }
    }
    SUBCASE("numeric selector picks one epoch; bad selectors are config errors") {
        REQUIRE(cmd_probe(config, "1", true) == kExitOk);
        CHECK(fs::is_directory(probe_dir(config, 1)));
        CHECK(run_command([&] { return cmd_probe(config, "nope", true); }) == kExitConfig);
        CHECK(run_command([&] { return cmd_probe(config, "9", true); }) == kExitMissingArtifact);
    }
    SUBCASE("a degenerate task makes the probe partial (exit 3)") {
        // append a paradigm whose pairs are identical: empty subspace, row fails
        TaskSuite suite = load_suite(config);
        std::string rec;
        const std::string sent = suite.vocab.detokenize(suite.paradigms[0].pairs[0].good);
        for (int i = 0; i < 8; ++i)
            rec += R"({"UID":"zz_degenerate","linguistics_term":"x","sentence_good":")" + sent +
                   R"(","sentence_bad":")" + sent + R"("})" "\n";
        write_text_file((fs::path(suite_dir(config)) / "zz_degenerate.jsonl").string(), rec);
        CHECK(run_command([&] { return cmd_probe(config, "final", false); }) ==
              kExitPartialProbe);
    }
}

TEST_CASE("analyze and report build spaces, correlations and heatmaps") {
    RunConfig config = mini_config(fresh_dir("pipe_analyze"));
    REQUIRE(cmd_generate(config) == kExitOk);
    REQUIRE(cmd_pretrain(config) == kExitOk);
    REQUIRE(cmd_probe(config, "all", true) == kExitOk);
    REQUIRE(cmd_probe(config, "final", false) == kExitOk);
    REQUIRE(cmd_analyze(config) == kExitOk);

    const fs::path adir = analysis_dir(config);
    for (const char* name : {"gts_jsim", "gts_cs", "gts_jxc", "hyp_phenomenon", "nvo", "wd"})
        CHECK(fs::exists(adir / (std::string(name) + ".csv")));
    CHECK(fs::exists(adir / "correlations.csv"));
    CHECK(fs::exists(adir / "series.csv"));
    CHECK(fs::exists(adir / "sparsity.csv"));
    CHECK(fs::exists(adir / "within_phenomenon.csv"));

    SUBCASE("correlation table has the nine comparisons") {
        const std::string text = read_text_file((adir / "correlations.csv").string());
        std::size_t rows = 0;
        for (char ch : text)
            if (ch == '\n') ++rows;
        CHECK(rows == 1 + 9);
    }
    SUBCASE("heatmaps exist with N^2 cells each") {
        const std::string svg =
            read_text_file((adir / "heatmaps" / "gts_cs.svg").string());
        std::size_t rects = 0;
        for (std::size_t at = svg.find("<rect"); at != std::string::npos;
             at = svg.find("<rect", at + 1))
            ++rects;
        CHECK(rects == 1 + 16);  // background + 4x4 cells
    }
    SUBCASE("series has one row per probed epoch") {
        const std::string text = read_text_file((adir / "series.csv").string());
        std::size_t rows = 0;
        for (char ch : text)
            if (ch == '\n') ++rows;
        CHECK(rows == 1 + 3);
    }
    SUBCASE("report renders and references the artifacts") {
        REQUIRE(cmd_report(config) == kExitOk);
        const std::string md =
            read_text_file((fs::path(report_dir(config)) / "report.md").string());
        CHECK(md.find("Space correlations") != std::string::npos);
        CHECK(md.find("gts_cs.svg") != std::string::npos);
    }
    SUBCASE("analyze without probes is a missing artifact") {
        RunConfig c1 = mini_config(fresh_dir("pipe_analyze_missing"));
        REQUIRE(cmd_generate(c1) == kExitOk);
        CHECK(run_command([&] { return cmd_analyze(c1); }) == kExitMissingArtifact);
    }
    SUBCASE("report without analysis is a missing artifact") {
        RunConfig c1 = mini_config(fresh_dir("pipe_report_missing"));
        CHECK(run_command([&] { return cmd_report(c1); }) == kExitMissingArtifact);
    }
}

TEST_CASE("the pipeline is deterministic end to end at mini scale") {
    RunConfig a = mini_config(fresh_dir("pipe_det_a"), 77);
    RunConfig b = mini_config(fresh_dir("pipe_det_b"), 77);
    for (RunConfig* c : {&a, &b}) {
        REQUIRE(cmd_generate(*c) == kExitOk);
        REQUIRE(cmd_pretrain(*c) == kExitOk);
        REQUIRE(cmd_probe(*c, "final", false) == kExitOk);
        REQUIRE(cmd_analyze(*c) == kExitOk);
    }
    auto csv_a = snapshot_files(a.out_dir, ".csv");
    auto csv_b = snapshot_files(b.out_dir, ".csv");
    REQUIRE_FALSE(csv_a.empty());
    REQUIRE(csv_a.size() == csv_b.size());
    for (const auto& [rel, bytes] : csv_a) CHECK(bytes == csv_b.at(rel));
    auto svg_a = snapshot_files(a.out_dir, ".svg");
    auto svg_b = snapshot_files(b.out_dir, ".svg");
    REQUIRE_FALSE(svg_a.empty());
    for (const auto& [rel, bytes] : svg_a) CHECK(bytes == svg_b.at(rel));
}
