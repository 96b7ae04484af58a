#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "taskspace/common.hpp"
#include "taskspace/model.hpp"

using namespace taskspace;
namespace fs = std::filesystem;

namespace {

LmConfig tiny_config(int vocab = 16) {
    LmConfig c;
    c.n_layers = 1;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ffn = 32;
    c.vocab_size = vocab;
    c.context_length = 16;
    c.dropout_rate = 0.0;
    return c;
}

LmCheckpoint zero_checkpoint(const LmConfig& config) {
    LmCheckpoint ckpt;
    ckpt.config = config;
    ckpt.params.assign(static_cast<std::size_t>(param_count(config)), 0.0);
    return ckpt;
}

LmCheckpoint random_checkpoint(const LmConfig& config, std::uint64_t seed) {
    LmCheckpoint ckpt;
    ckpt.config = config;
    ckpt.params = init_params(config, seed);
    ckpt.init_seed = seed;
    ckpt.rng_state = Rng(seed).serialize();
    return ckpt;
}

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("param_count matches the closed form") {
    LmConfig c;
    c.vocab_size = 64;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ffn = 128;
    c.context_length = 32;
    c.tie_embeddings = true;
    CHECK(param_count(c) == 28544);
    CHECK(ParamLayout::build(c).total == 28544);

    SUBCASE("untied adds the output head") {
        c.tie_embeddings = false;
        CHECK(param_count(c) == 28544 + 64 * 32);
    }
    SUBCASE("zero layers leaves embeddings, positions and the final norm") {
        c.n_layers = 0;
        CHECK(param_count(c) == 64 * 32 + 32 * 32 + 2 * 32);
    }
    SUBCASE("doubling d_model quadruples attention weights") {
        LmConfig wide = c;
        wide.d_model = 64;
        wide.n_heads = 4;
        auto attention_params = [](const LmConfig& cfg) {
            return static_cast<long>(cfg.n_layers) * (4L * cfg.d_model * cfg.d_model);
        };
        CHECK(attention_params(wide) == 4 * attention_params(c));
    }
}

TEST_CASE("config validation rejects bad extents") {
    LmConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny_config();
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny_config();
    c.vocab_size = 0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("layout is stable and names map to fixed offsets") {
    LmConfig c = tiny_config();
    ParamLayout a = ParamLayout::build(c);
    ParamLayout b = ParamLayout::build(c);
    REQUIRE(a.entries.size() == b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].name == b.entries[i].name);
        CHECK(a.entries[i].offset == b.entries[i].offset);
    }
    CHECK(a.find("wte").offset == 0);
    CHECK(a.find("layer0.attn.wq").size == 16 * 16);
    CHECK_THROWS_AS(a.find("nope"), Error);
}

TEST_CASE("init_params is deterministic with unit gains and zero biases") {
    LmConfig c = tiny_config();
    auto p1 = init_params(c, 9);
    auto p2 = init_params(c, 9);
    auto p3 = init_params(c, 10);
    CHECK(p1 == p2);
    CHECK(p1 != p3);
    ParamLayout layout = ParamLayout::build(c);
    const auto& gain = layout.find("layer0.ln1.gain");
    const auto& bias = layout.find("layer0.ln1.bias");
    for (std::size_t i = 0; i < gain.size; ++i) CHECK(p1[gain.offset + i] == 1.0);
    for (std::size_t i = 0; i < bias.size; ++i) CHECK(p1[bias.offset + i] == 0.0);
}

TEST_CASE("zero parameters give uniform predictions") {
    LmCheckpoint ckpt = zero_checkpoint(tiny_config(4));
    SUBCASE("single-token sentence scores -ln V") {
        CHECK(sentence_logprob(ckpt, {3}) == doctest::Approx(-std::log(4.0)).epsilon(1e-14));
    }
    SUBCASE("perplexity is V") {
        std::vector<TokenSeq> corpus = {{3, 3}, {0, 3, 2}};
        CHECK(perplexity(ckpt, corpus) == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("logprob is never positive") {
        LmCheckpoint r = random_checkpoint(tiny_config(), 3);
        CHECK(sentence_logprob(r, {5, 9, 2, 11}) <= 0.0);
    }
}

TEST_CASE("a handcrafted deterministic predictor reaches perplexity 1") {
    LmConfig c;
    c.n_layers = 0;
    c.d_model = 1;
    c.n_heads = 1;
    c.d_ffn = 1;
    c.vocab_size = 3;
    c.context_length = 8;
    c.dropout_rate = 0.0;
    LmCheckpoint ckpt = zero_checkpoint(c);
    ParamLayout layout = ParamLayout::build(c);
    // final-norm output is exactly lnf.bias (single-column rows have zero
    // variance); logits = bias . wte^T
    ckpt.params[layout.find("lnf.bias").offset] = 1.0;
    ckpt.params[layout.find("wte").offset + 2] = 1000.0;  // row of token 2 (EOS)
    std::vector<TokenSeq> corpus = {{2, 2, 2}};
    CHECK(perplexity(ckpt, corpus) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("perplexity is monotone in mean NLL") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(8), 17);
    LmModel model(ckpt.config);
    std::vector<TokenSeq> base = {{3, 4, 5}};
    std::vector<TokenSeq> both = {{3, 4, 5}, {7, 7, 7, 7}};
    const double nll_base = model.mean_nll(ckpt.params, base);
    const double nll_both = model.mean_nll(ckpt.params, both);
    if (nll_both > nll_base) {
        CHECK(perplexity(ckpt, both) > perplexity(ckpt, base));
    } else {
        CHECK(perplexity(ckpt, both) <= perplexity(ckpt, base));
    }
}

TEST_CASE("pair accuracy follows the forced-choice rule") {
    // zero params => logprob == -len * ln V: shorter sentences win, equal
    // lengths tie, and ties count incorrect
    LmCheckpoint ckpt = zero_checkpoint(tiny_config(4));
    std::vector<TokenPair> pairs;
    pairs.push_back({{3, 3}, {3, 3, 3}});
    pairs.push_back({{3, 3}, {2, 2}});  // exact tie
    pairs.push_back({{0, 1}, {0, 1, 2}});
    pairs.push_back({{2}, {3, 1}});
    EvalResult r = pair_accuracy(ckpt, pairs, "toy");
    CHECK(r.n_pairs == 4);
    CHECK(r.accuracy == doctest::Approx(0.75));
    CHECK(r.correct == std::vector<bool>{true, false, true, true});
    CHECK(r.task_id == "toy");
    CHECK_THROWS_AS(pair_accuracy(ckpt, {}, "empty"), Error);
}

TEST_CASE("sentence_logprob equals naive per-position re-scoring") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(12), 5);
    LmModel model(ckpt.config);
    TokenSeq s = {4, 7, 2, 9, 11, 3};
    const double fast = sentence_logprob(ckpt, s);
    double slow = 0.0;
    for (std::size_t t = 0; t < s.size(); ++t) {
        TokenSeq prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(t) + 1);
        std::vector<TokenSeq> one = {prefix};
        Tensor logits = model.forward_logits(ckpt.params, model.build_batch(one, false));
        const std::size_t row = logits.rows() - 1;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < logits.cols(); ++v) m = std::max(m, logits.at(row, v));
        double sum = 0.0;
        for (std::size_t v = 0; v < logits.cols(); ++v) sum += std::exp(logits.at(row, v) - m);
        slow += logits.at(row, static_cast<std::size_t>(s[t])) - (m + std::log(sum));
    }
    CHECK(fast == doctest::Approx(slow).epsilon(1e-10));
}

TEST_CASE("causality: future tokens do not affect earlier logits") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(12), 21);
    LmModel model(ckpt.config);
    std::vector<TokenSeq> a = {{4, 7, 2, 9}};
    std::vector<TokenSeq> b = {{4, 7, 2, 5}};
    Tensor la = model.forward_logits(ckpt.params, model.build_batch(a, true));
    Tensor lb = model.forward_logits(ckpt.params, model.build_batch(b, true));
    // inputs differ only at the final position; all earlier rows are bit-equal
    REQUIRE(la.rows() == lb.rows());
    for (std::size_t r = 0; r + 1 < la.rows(); ++r)
        for (std::size_t v = 0; v < la.cols(); ++v) CHECK(la.at(r, v) == lb.at(r, v));
}

TEST_CASE("token ids outside the vocabulary are rejected") {
    LmCheckpoint ckpt = zero_checkpoint(tiny_config(4));
    CHECK_THROWS_AS(sentence_logprob(ckpt, {9}), Error);
    LmModel model(ckpt.config);
    std::vector<TokenSeq> too_long = {TokenSeq(40, 1)};
    CHECK_THROWS_AS(model.build_batch(too_long, false), Error);
}

TEST_CASE("evaluation never mutates parameters") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(8), 33);
    const std::uint64_t before = ckpt.hash();
    std::vector<TokenPair> pairs = {{{3, 4}, {4, 3}}};
    pair_accuracy(ckpt, pairs, "t");
    std::vector<TokenSeq> corpus = {{1, 2, 3}};
    perplexity(ckpt, corpus);
    sentence_logprob(ckpt, {5, 6});
    CHECK(ckpt.hash() == before);
}

TEST_CASE("untrained model sits at chance on random-label pairs") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(32), 1234);
    Rng rng(77);
    std::vector<TokenPair> pairs;
    for (int i = 0; i < 1000; ++i) {
        TokenSeq x, y;
        const std::size_t len = 4 + rng.below(5);
        for (std::size_t k = 0; k < len; ++k)
            x.push_back(static_cast<std::int32_t>(rng.below(32)));
        for (std::size_t k = 0; k < len; ++k)
            y.push_back(static_cast<std::int32_t>(rng.below(32)));
        pairs.push_back({x, y});
    }
    EvalResult r = pair_accuracy(ckpt, pairs, "random");
    CHECK(r.accuracy > 0.45);
    CHECK(r.accuracy < 0.55);
}

TEST_CASE("sgd_step follows the update rule") {
    std::vector<double> params = {1.0, 1.0};
    sgd_step(params, {0.5, -0.5}, 0.1);
    CHECK(params[0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(params[1] == doctest::Approx(1.05).epsilon(1e-15));
    sgd_step(params, {0.0, 0.0}, 0.1);
    CHECK(params[0] == doctest::Approx(0.95).epsilon(1e-15));
    std::vector<double> bad = {std::nan("")};
    std::vector<double> p1 = {1.0};
    CHECK_THROWS_AS(sgd_step(p1, bad, 0.1), Error);
}

TEST_CASE("adam first step moves by roughly lr") {
    std::vector<double> params = {0.0};
    AdamState state;
    adam_step(params, {1.0}, state, 0.01);
    // bias correction makes m_hat / sqrt(v_hat) ~= 1 at t=1
    CHECK(std::abs(params[0] + 0.01) < 1e-9);
    CHECK(state.t == 1);

    SUBCASE("zero gradient leaves parameters unchanged") {
        std::vector<double> p2 = {0.5};
        AdamState s2;
        adam_step(p2, {0.0}, s2, 0.01);
        CHECK(p2[0] == 0.5);
    }
    SUBCASE("non-finite gradient errors") {
        std::vector<double> p2 = {0.5};
        AdamState s2;
        std::vector<double> g = {std::numeric_limits<double>::infinity()};
        CHECK_THROWS_AS(adam_step(p2, g, s2, 0.01), Error);
    }
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(8), 5);
    ckpt.epoch = 3;
    AdamState adam;
    adam.m.assign(ckpt.params.size(), 0.125);
    adam.v.assign(ckpt.params.size(), 0.25);
    adam.t = 17;
    ckpt.adam = adam;

    const std::string p1 = tmp_path("ck_a.ckpt");
    const std::string p2 = tmp_path("ck_b.ckpt");
    save_checkpoint(ckpt, p1);
    LmCheckpoint loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);
    CHECK(read_binary_file(p1) == read_binary_file(p2));
    CHECK(loaded.params == ckpt.params);
    CHECK(loaded.epoch == 3);
    CHECK(loaded.rng_state == ckpt.rng_state);
    REQUIRE(loaded.adam.has_value());
    CHECK(loaded.adam->t == 17);
    CHECK(loaded.adam->m == adam.m);
    CHECK(loaded.hash() == ckpt.hash());
}

TEST_CASE("checkpoint corruption yields distinct errors") {
    LmCheckpoint ckpt = random_checkpoint(tiny_config(8), 6);
    const std::string path = tmp_path("ck_corrupt.ckpt");
    save_checkpoint(ckpt, path);
    auto bytes = read_binary_file(path);

    SUBCASE("corrupted trailing bytes fail the checksum") {
        auto bad = bytes;
        bad[bad.size() - 6] ^= std::byte{0xff};
        write_binary_file(path, bad);
        try {
            load_checkpoint(path);
            FAIL("expected checksum error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ckpt_checksum);
        }
    }
    SUBCASE("truncation is detected") {
        auto bad = bytes;
        bad.resize(bad.size() / 2);
        write_binary_file(path, bad);
        try {
            load_checkpoint(path);
            FAIL("expected truncation error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ckpt_truncated);
        }
    }
    SUBCASE("bad magic reads as a version problem") {
        auto bad = bytes;
        bad[0] = std::byte{'X'};
        write_binary_file(path, bad);
        try {
            load_checkpoint(path);
            FAIL("expected version error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ckpt_version_mismatch);
        }
    }
}

TEST_CASE("config-only checkpoint loads as a fresh initialization") {
    LmConfig c = tiny_config(8);
    LmCheckpoint ckpt;
    ckpt.config = c;
    ckpt.init_seed = 42;
    const std::string path = tmp_path("ck_config_only.ckpt");
    save_checkpoint(ckpt, path);
    LmCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.params == init_params(c, 42));
}

TEST_CASE("pretrain honors the schedule and the seed") {
    LmConfig c = tiny_config(8);
    std::vector<TokenSeq> corpus = {{3, 4, 5}, {5, 4, 3}, {3, 3, 3}, {4, 5, 4}};
    PretrainHyper hyper;
    hyper.batch_size = 2;
    hyper.lr = 1e-3;
    hyper.seed = 7;

    SUBCASE("epochs=0 returns the initialization checkpoint only") {
        hyper.epochs = 0;
        hyper.checkpoint_epochs = {0};
        PretrainResult r = pretrain(c, corpus, hyper);
        REQUIRE(r.checkpoints.size() == 1);
        CHECK(r.checkpoints[0].epoch == 0);
        CHECK(r.checkpoints[0].params == init_params(c, 7));
        CHECK(r.step_losses.empty());
    }
    SUBCASE("same seed twice gives bit-identical parameters") {
        hyper.epochs = 2;
        hyper.checkpoint_epochs = {2};
        PretrainResult a = pretrain(c, corpus, hyper);
        PretrainResult b = pretrain(c, corpus, hyper);
        CHECK(a.checkpoints.back().params == b.checkpoints.back().params);
        CHECK(a.step_losses == b.step_losses);
    }
    SUBCASE("resume from a mid-series checkpoint reproduces the run bit-exactly") {
        hyper.epochs = 4;
        hyper.checkpoint_epochs = {2, 4};
        PretrainResult straight = pretrain(c, corpus, hyper);
        REQUIRE(straight.checkpoints.size() == 2);
        PretrainResult resumed = pretrain(c, corpus, hyper, &straight.checkpoints[0]);
        REQUIRE(resumed.checkpoints.size() == 1);
        CHECK(resumed.checkpoints[0].epoch == 4);
        CHECK(resumed.checkpoints[0].params == straight.checkpoints[1].params);
        CHECK(resumed.checkpoints[0].rng_state == straight.checkpoints[1].rng_state);
    }
}

TEST_CASE("pretraining memorizes a single repeated sentence") {
    LmConfig c = tiny_config(8);
    c.dropout_rate = 0.0;
    std::vector<TokenSeq> corpus(16, TokenSeq{3, 5, 4, 6, 3, 7});
    PretrainHyper hyper;
    hyper.batch_size = 8;
    hyper.lr = 3e-3;
    hyper.epochs = 100;  // 2 steps per epoch -> 200 steps
    hyper.seed = 11;
    hyper.checkpoint_epochs = {100};
    PretrainResult r = pretrain(c, corpus, hyper);
    REQUIRE(r.step_losses.size() == 200);
    CHECK(r.step_losses.back() < 0.1);

    // smoothed over 50 steps the loss curve is non-increasing
    std::vector<double> smooth;
    for (std::size_t i = 0; i + 50 <= r.step_losses.size(); ++i) {
        double m = 0.0;
        for (std::size_t k = i; k < i + 50; ++k) m += r.step_losses[k];
        smooth.push_back(m / 50.0);
    }
    for (std::size_t i = 0; i + 1 < smooth.size(); ++i) CHECK(smooth[i + 1] <= smooth[i] + 1e-9);
}

TEST_CASE("divergent training aborts with the last good state") {
    LmConfig c = tiny_config(8);
    c.dropout_rate = 0.0;
    std::vector<TokenSeq> corpus(8, TokenSeq{3, 5, 4, 6});
    PretrainHyper hyper;
    hyper.batch_size = 4;
    hyper.lr = 1e300;  // overflow in the second step's projections
    hyper.epochs = 50;
    hyper.seed = 2;
    hyper.checkpoint_epochs = {50};
    PretrainResult r = pretrain(c, corpus, hyper);
    CHECK(r.diverged);
    REQUIRE_FALSE(r.checkpoints.empty());
    for (double v : r.checkpoints.back().params) CHECK(std::isfinite(v));
}
