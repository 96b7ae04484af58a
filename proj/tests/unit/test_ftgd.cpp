#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "taskspace/common.hpp"
#include "taskspace/ftgd.hpp"
#include "taskspace/rng.hpp"

using namespace taskspace;
namespace fs = std::filesystem;

namespace {

GradientDifferential fake_differential(GradientVector delta) {
    GradientVector zeros(delta.size(), 0.0);
    return make_differential(std::move(delta), std::move(zeros), "fake", 0);
}

/// Tiny model + paradigm pair for real tuning runs.
struct Fixture {
    TaskSuite suite;
    LmCheckpoint ckpt;

    explicit Fixture(std::uint64_t seed = 3, int pairs = 24) {
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
};

}  // namespace

TEST_CASE("gradient differential is the elementwise difference") {
    GradientDifferential gd =
        make_differential({0.5, 0.0011, 0.0}, {0.2, 0.0002, 0.0}, "p", 7);
    CHECK(gd.g_delta[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(gd.g_delta[1] == doctest::Approx(0.0009).epsilon(1e-12));
    CHECK(gd.g_delta[2] == 0.0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(gd.g_delta[i] == gd.g_plus[i] - gd.g_minus[i]);
    CHECK(gd.paradigm_id == "p");
    CHECK(gd.checkpoint_hash == 7);
    CHECK_THROWS_AS(make_differential({1.0}, {1.0, 2.0}, "p", 0), Error);
}

TEST_CASE("identical good and bad batches give an exactly zero differential") {
    Fixture fx;
    Paradigm degenerate;
    degenerate.id = "degenerate";
    degenerate.phenomenon = "x";
    const TokenSeq s = fx.suite.paradigms[0].pairs[0].good;
    for (int i = 0; i < 4; ++i) degenerate.pairs.push_back({s, s});
    degenerate.train_idx = {0, 1, 2};
    degenerate.eval_idx = {3};
    LmModel model(fx.ckpt.config);
    GradientDifferential gd = gradient_differential(model, fx.ckpt.params, degenerate, 0);
    for (double v : gd.g_delta) CHECK(v == 0.0);
}

TEST_CASE("differentials are linear over concatenated batches") {
    Fixture fx;
    LmModel model(fx.ckpt.config);
    // two tiny batches of equal-length pairs, then their concatenation
    const Paradigm& src = fx.suite.paradigms[0];
    Paradigm a, b, both;
    a.id = b.id = both.id = "slice";
    for (std::size_t i = 0; i < 4; ++i) a.pairs.push_back(src.pairs[i]);
    for (std::size_t i = 4; i < 10; ++i) b.pairs.push_back(src.pairs[i]);
    for (std::size_t i = 0; i < 10; ++i) both.pairs.push_back(src.pairs[i]);
    a.train_idx = {0, 1, 2, 3};
    b.train_idx = {0, 1, 2, 3, 4, 5};
    for (std::size_t i = 0; i < 10; ++i) both.train_idx.push_back(i);

    GradientDifferential ga = gradient_differential(model, fx.ckpt.params, a, 0);
    GradientDifferential gb = gradient_differential(model, fx.ckpt.params, b, 0);
    GradientDifferential gc = gradient_differential(model, fx.ckpt.params, both, 0);

    // token counts: every pair in one paradigm shares a template length
    const double ta = 4.0, tb = 6.0;  // in units of per-pair tokens (equal length)
    for (std::size_t i = 0; i < gc.g_delta.size(); ++i) {
        const double expected = (ta * ga.g_delta[i] + tb * gb.g_delta[i]) / (ta + tb);
        CHECK(gc.g_delta[i] == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("subspace selection is a strict threshold") {
    GradientDifferential gd = fake_differential({0.3, 0.0009, 0.0});
    ParamSubspace sub = select_subspace(gd, 1e-3);
    CHECK(sub.indices == std::vector<std::size_t>{0});
    CHECK(sub.epsilon == 1e-3);
    CHECK(sub.paradigm_id == "fake");

    SUBCASE("epsilon -> 0+ keeps every nonzero coordinate") {
        ParamSubspace all = select_subspace(gd, 1e-300);
        CHECK(all.indices == std::vector<std::size_t>{0, 1});
    }
    SUBCASE("|g_delta| == epsilon exactly is excluded") {
        GradientDifferential exact = fake_differential({0.25, 0.5});
        ParamSubspace s = select_subspace(exact, 0.25);
        CHECK(s.indices == std::vector<std::size_t>{1});
    }
    SUBCASE("non-positive epsilon is invalid") {
        CHECK_THROWS_AS(select_subspace(gd, 0.0), Error);
        CHECK_THROWS_AS(select_subspace(gd, -1.0), Error);
    }
    SUBCASE("empty subspace advises a smaller epsilon") {
        try {
            select_subspace(gd, 10.0);
            FAIL("expected empty subspace");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::empty_subspace);
            CHECK(std::string(e.what()).find("smaller epsilon") != std::string::npos);
        }
    }
}

TEST_CASE("subspace and mass fractions shrink as epsilon grows") {
    Rng rng(8);
    GradientVector delta(500);
    for (double& v : delta) v = rng.normal(0.0, 0.01);
    GradientDifferential gd = fake_differential(std::move(delta));
    std::vector<double> epsilons = {1e-5, 1e-4, 1e-3, 1e-2};
    std::vector<std::size_t> sizes;
    std::vector<double> masses, params;
    for (double eps : epsilons) {
        ParamSubspace sub = select_subspace(gd, eps);
        GradientMassStats stats = gradient_mass_stats(gd, sub);
        sizes.push_back(sub.indices.size());
        masses.push_back(stats.mass_fraction);
        params.push_back(stats.param_fraction);
        // monotonicity: larger-epsilon subspace is contained in smaller's
        ParamSubspace wider = select_subspace(gd, eps / 10.0);
        CHECK(std::includes(wider.indices.begin(), wider.indices.end(), sub.indices.begin(),
                            sub.indices.end()));
    }
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        CHECK(sizes[i + 1] <= sizes[i]);
        CHECK(masses[i + 1] <= masses[i]);
        CHECK(params[i + 1] <= params[i]);
    }
}

TEST_CASE("gradient mass stats match hand arithmetic") {
    GradientDifferential gd = fake_differential({0.5, 0.0009, 0.3});
    ParamSubspace sub = select_subspace(gd, 1e-3);
    CHECK(sub.indices == std::vector<std::size_t>{0, 2});
    GradientMassStats stats = gradient_mass_stats(gd, sub);
    CHECK(stats.param_fraction == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(stats.mass_fraction == doctest::Approx(0.8 / 0.8009).epsilon(1e-12));

    SUBCASE("the full index set carries all the mass") {
        ParamSubspace full;
        full.indices = {0, 1, 2};
        CHECK(gradient_mass_stats(gd, full).mass_fraction == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("histogram counts every coordinate once") {
        std::size_t total = 0;
        for (const auto& bin : stats.histogram) total += bin.count;
        CHECK(total == 3);
    }
    SUBCASE("an all-zero differential is an error") {
        GradientDifferential zero = fake_differential({0.0, 0.0});
        ParamSubspace s;
        CHECK_THROWS_AS(gradient_mass_stats(zero, s), Error);
    }
}

TEST_CASE("stopping rule: mean of the last five") {
    SUBCASE("spec example: equal to the mean stops") {
        CHECK(stopping_rule({0.60, 0.61, 0.62, 0.63, 0.64}, 0.62));
    }
    SUBCASE("above the mean continues") {
        CHECK_FALSE(stopping_rule({0.60, 0.61, 0.62, 0.63, 0.64}, 0.70));
    }
    SUBCASE("fewer than five recorded steps always continues") {
        CHECK_FALSE(stopping_rule({0.9, 0.9, 0.9}, 0.0));
        CHECK_FALSE(stopping_rule({}, 0.0));
    }
    SUBCASE("exact dyadic case") {
        std::vector<double> h = {0.5, 0.625, 0.75, 0.625, 0.5};  // mean exactly 0.6
        CHECK(stopping_rule(h, 0.6));
        CHECK(stopping_rule(h, 0.59375));
        CHECK_FALSE(stopping_rule(h, 0.625));
    }
    SUBCASE("only the last five entries matter") {
        CHECK(stopping_rule({99.0, 0.5, 0.5, 0.5, 0.5, 0.5}, 0.5));
    }
}

TEST_CASE("masked sgd touches only the subspace") {
    std::vector<double> params = {1.0, 1.0, 1.0};
    masked_sgd_step(params, {0.5, 2.0, 0.1}, {0, 2}, 0.1);
    CHECK(params[0] == doctest::Approx(0.95).epsilon(1e-12));
    CHECK(params[1] == 1.0);
    CHECK(params[2] == doctest::Approx(0.99).epsilon(1e-12));
    CHECK_THROWS_AS(masked_sgd_step(params, {1.0}, {0}, 0.1), Error);
    std::vector<double> bad_grads = {std::nan(""), 0.0, 0.0};
    CHECK_THROWS_AS(masked_sgd_step(params, bad_grads, {0}, 0.1), Error);
}

TEST_CASE("ftgd_tune with lr=0 is the identity with a flat log") {
    Fixture fx;
    FtgdHyper hyper;
    hyper.lr = 0.0;
    hyper.epsilon = 1e-7;
    FtgdResult r = ftgd_tune(fx.ckpt, fx.suite.paradigms[0], hyper);
    CHECK(r.tuned.params == fx.ckpt.params);
    for (double acc : r.log.step_accuracy) CHECK(acc == r.log.pre_accuracy);
    // flat accuracy trips the convergence rule right after the warm-up
    CHECK(r.log.stop_reason == "converged");
    CHECK(r.log.steps == 6);
}

TEST_CASE("ftgd_tune changes only subspace parameters and is deterministic") {
    Fixture fx;
    FtgdHyper hyper;
    hyper.lr = 0.05;
    hyper.epsilon = 1e-6;
    hyper.max_steps = 4;

    FtgdResult a = ftgd_tune(fx.ckpt, fx.suite.paradigms[0], hyper);
    FtgdResult b = ftgd_tune(fx.ckpt, fx.suite.paradigms[0], hyper);
    CHECK(a.tuned.params == b.tuned.params);  // bit-identical
    CHECK(a.log.step_accuracy == b.log.step_accuracy);

    std::set<std::size_t> allowed(a.initial_subspace.indices.begin(),
                                  a.initial_subspace.indices.end());
    for (std::size_t i = 0; i < a.tuned.params.size(); ++i) {
        if (a.tuned.params[i] != fx.ckpt.params[i]) CHECK(allowed.count(i) == 1);
    }
    CHECK(a.log.steps <= hyper.max_steps);
    CHECK(a.initial_differential.checkpoint_hash == fx.ckpt.hash());
}

TEST_CASE("swapping good and bad negates the differential bitwise") {
    Fixture fx;
    LmModel model(fx.ckpt.config);
    const Paradigm& p = fx.suite.paradigms[1];
    Paradigm swapped = p;
    for (MinimalPair& pair : swapped.pairs) std::swap(pair.good, pair.bad);
    GradientDifferential gd = gradient_differential(model, fx.ckpt.params, p, 0);
    GradientDifferential rev = gradient_differential(model, fx.ckpt.params, swapped, 0);
    for (std::size_t i = 0; i < gd.g_delta.size(); ++i) {
        CHECK(rev.g_delta[i] == -gd.g_delta[i]);
        CHECK(rev.g_plus[i] == gd.g_minus[i]);  // same batch, same bits
    }
}

TEST_CASE("full-gradient tuning: one step equals sgd_step with g+") {
    Fixture fx;
    FtgdHyper hyper;
    hyper.lr = 0.05;
    hyper.max_steps = 1;
    FullGradResult r = full_gradient_tune(fx.ckpt, fx.suite.paradigms[0], hyper);

    LmModel model(fx.ckpt.config);
    LmModel::GradAccum acc =
        model.accumulate_gradient(fx.ckpt.params, fx.suite.paradigms[0].train_good(), true);
    GradientVector g = acc.grad_sum;
    for (double& v : g) v /= static_cast<double>(acc.tokens);
    std::vector<double> expect = fx.ckpt.params;
    sgd_step(expect, g, hyper.lr);
    CHECK(r.tuned.params == expect);
    CHECK(r.log.stop_reason == "max_steps");

    SUBCASE("lr=0 is the identity") {
        FtgdHyper zero = hyper;
        zero.lr = 0.0;
        CHECK(full_gradient_tune(fx.ckpt, fx.suite.paradigms[0], zero).tuned.params ==
              fx.ckpt.params);
    }
}

TEST_CASE("tuning requires both splits") {
    Fixture fx;
    Paradigm no_eval = fx.suite.paradigms[0];
    no_eval.eval_idx.clear();
    FtgdHyper hyper;
    CHECK_THROWS_AS(ftgd_tune(fx.ckpt, no_eval, hyper), Error);
}

TEST_CASE("per-step reselection is available as an ablation") {
    Fixture fx;
    FtgdHyper frozen;
    frozen.lr = 0.1;
    frozen.epsilon = 1e-6;
    frozen.max_steps = 3;
    FtgdHyper reselect = frozen;
    reselect.reselect_each_step = true;
    FtgdResult a = ftgd_tune(fx.ckpt, fx.suite.paradigms[0], frozen);
    FtgdResult b = ftgd_tune(fx.ckpt, fx.suite.paradigms[0], reselect);
    CHECK(a.initial_subspace.indices == b.initial_subspace.indices);  // step 0 shared
}

TEST_CASE("sparse differential dumps round-trip") {
    Fixture fx;
    LmModel model(fx.ckpt.config);
    GradientDifferential gd =
        gradient_differential(model, fx.ckpt.params, fx.suite.paradigms[0], fx.ckpt.hash());
    ParamSubspace sub = select_subspace(gd, 1e-6);
    SparseDifferential sd = sparsify(gd, sub);
    CHECK(sd.indices.size() == sub.indices.size());
    CHECK(sd.total_params == gd.g_delta.size());

    const std::string path = (fs::temp_directory_path() / "probe.gdiff").string();
    save_sparse_differential(sd, path);
    SparseDifferential back = load_sparse_differential(path);
    CHECK(back.paradigm_id == sd.paradigm_id);
    CHECK(back.checkpoint_hash == sd.checkpoint_hash);
    CHECK(back.epsilon == sd.epsilon);
    CHECK(back.total_params == sd.total_params);
    CHECK(back.total_l1 == sd.total_l1);
    CHECK(back.indices == sd.indices);
    CHECK(back.values == sd.values);
}
