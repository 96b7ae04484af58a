#include <doctest.h>

#include <cmath>

#include "taskspace/common.hpp"
#include "taskspace/probing.hpp"

using namespace taskspace;

namespace {

struct ProbeFixture {
    TaskSuite suite;
    LmCheckpoint ckpt;

    explicit ProbeFixture(std::uint64_t seed = 4, int pairs = 20) {
        SuiteSpec spec;
        spec.phenomena = 2;
        spec.paradigms_per = 2;
        spec.pairs_per = pairs;
        suite = generate_suite(seed, spec);
        LmConfig config;
        config.n_layers = 1;
        config.d_model = 16;
        config.n_heads = 2;
        config.d_ffn = 32;
        config.vocab_size = static_cast<int>(suite.vocab.size());
        config.context_length = 24;
        config.dropout_rate = 0.0;
        ckpt.config = config;
        ckpt.params = init_params(config, seed);
        ckpt.init_seed = seed;
    }

    ProbeHyper hyper() const {
        ProbeHyper h;
        h.ftgd.lr = 0.05;
        h.ftgd.epsilon = 1e-6;
        h.ftgd.max_steps = 3;
        return h;
    }
};

Paradigm degenerate_paradigm(const TaskSuite& suite) {
    Paradigm p;
    p.id = "degenerate";
    p.phenomenon = suite.paradigms[0].phenomenon;
    const TokenSeq s = suite.paradigms[0].pairs[0].good;
    for (int i = 0; i < 8; ++i) p.pairs.push_back({s, s});  // g_delta == 0
    p.train_idx = {0, 1, 2, 3, 4, 5};
    p.eval_idx = {6, 7};
    return p;
}

}  // namespace

TEST_CASE("normalize_transfer matches the footnote formula") {
    CHECK(normalize_transfer(0.6, 0.8) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(normalize_transfer(0.6, 0.3) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(normalize_transfer(0.7, 0.7) == 0.0);
    CHECK(normalize_transfer(0.0, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(normalize_transfer(0.5, 0.0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(normalize_transfer(1.0, 1.0) == 0.0);
    CHECK(normalize_transfer(0.0, 0.0) == 0.0);
    CHECK_THROWS_AS(normalize_transfer(-0.1, 0.5), Error);
    CHECK_THROWS_AS(normalize_transfer(0.5, 1.2), Error);
}

TEST_CASE("transfer_probe assembles the full matrix in suite order") {
    ProbeFixture fx;
    TransferProbeResult r = transfer_probe(fx.ckpt, fx.suite, fx.hyper());
    const std::size_t n = fx.suite.paradigms.size();

    CHECK(r.tts.task_ids == fx.suite.task_ids());
    CHECK(r.tts.metric == "transfer");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            REQUIRE_FALSE(r.tts.missing(i, j));
            CHECK(r.tts.at(i, j) >= -1.0);
            CHECK(r.tts.at(i, j) <= 1.0);
        }

    SUBCASE("eval1 equals a fresh evaluation of the untouched checkpoint") {
        for (std::size_t j = 0; j < n; ++j) {
            EvalResult fresh = pair_accuracy(fx.ckpt, fx.suite.paradigms[j].eval_pairs(),
                                             fx.suite.paradigms[j].id);
            CHECK(r.manifest.eval1[j] == fresh.accuracy);
        }
    }
    SUBCASE("bookkeeping: N tuning runs, N + N^2 evaluations") {
        CHECK(r.manifest.tuning_runs == n);
        CHECK(r.manifest.evaluations == n + n * n);
    }
    SUBCASE("records carry pre/post and the normalized value") {
        REQUIRE(r.records.size() == n * n);
        for (const TransferRecord& rec : r.records)
            CHECK(rec.normalized ==
                  doctest::Approx(normalize_transfer(rec.pre_acc, rec.post_acc)).epsilon(1e-15));
    }
    SUBCASE("step-0 gradients are retained per source task") {
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(r.gradients.diffs[i].has_value());
            CHECK(r.gradients.diffs[i]->paradigm_id == fx.suite.paradigms[i].id);
        }
    }
}

TEST_CASE("transfer_probe rows are independent of execution order") {
    ProbeFixture fx;
    ProbeHyper sequential = fx.hyper();
    ProbeHyper parallel = fx.hyper();
    parallel.jobs = 3;
    TransferProbeResult a = transfer_probe(fx.ckpt, fx.suite, sequential);
    TransferProbeResult b = transfer_probe(fx.ckpt, fx.suite, parallel);
    CHECK(a.tts.cells == b.tts.cells);
}

TEST_CASE("permuting task order permutes TTS rows and columns") {
    ProbeFixture fx;
    TransferProbeResult base = transfer_probe(fx.ckpt, fx.suite, fx.hyper());

    TaskSuite permuted = fx.suite;
    std::vector<std::size_t> perm = {2, 0, 3, 1};
    permuted.paradigms.clear();
    for (std::size_t i : perm) permuted.paradigms.push_back(fx.suite.paradigms[i]);
    TransferProbeResult moved = transfer_probe(fx.ckpt, permuted, fx.hyper());

    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < perm.size(); ++j)
            CHECK(moved.tts.at(i, j) == base.tts.at(perm[i], perm[j]));
}

TEST_CASE("a failing task marks its row missing and the run continues") {
    ProbeFixture fx;
    TaskSuite suite = fx.suite;
    suite.paradigms.insert(suite.paradigms.begin() + 1, degenerate_paradigm(fx.suite));
    TransferProbeResult r = transfer_probe(fx.ckpt, suite, fx.hyper());
    const std::size_t n = suite.paradigms.size();

    for (std::size_t j = 0; j < n; ++j) CHECK(r.tts.missing(1, j));
    CHECK_FALSE(r.tts.missing(0, 0));
    CHECK_FALSE(r.gradients.diffs[1].has_value());
    REQUIRE(r.manifest.runs.size() == n);
    CHECK(r.manifest.runs[1].failed);
    CHECK(r.manifest.runs[1].error.find("subspace") != std::string::npos);
    CHECK(r.manifest.tuning_runs == n - 1);
}

TEST_CASE("gradient_probe emits one differential per task without touching params") {
    ProbeFixture fx;
    const std::uint64_t before = fx.ckpt.hash();
    GradientProbeResult a = gradient_probe(fx.ckpt, fx.suite, 1e-6);
    CHECK(fx.ckpt.hash() == before);
    CHECK(a.gradients.diffs.size() == fx.suite.paradigms.size());
    for (const auto& d : a.gradients.diffs) CHECK(d.has_value());
    CHECK(a.skipped.empty());

    SUBCASE("re-running is bit-identical") {
        GradientProbeResult b = gradient_probe(fx.ckpt, fx.suite, 1e-6);
        for (std::size_t i = 0; i < a.gradients.diffs.size(); ++i) {
            CHECK(a.gradients.diffs[i]->indices == b.gradients.diffs[i]->indices);
            CHECK(a.gradients.diffs[i]->values == b.gradients.diffs[i]->values);
        }
    }
    SUBCASE("empty subspaces are skipped with a record") {
        GradientProbeResult skipped = gradient_probe(fx.ckpt, fx.suite, 1e6);
        CHECK(skipped.skipped.size() == fx.suite.paradigms.size());
        for (const auto& d : skipped.gradients.diffs) CHECK_FALSE(d.has_value());
    }
}
