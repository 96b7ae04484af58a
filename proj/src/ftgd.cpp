#include "taskspace/ftgd.hpp"

#include <algorithm>
#include <cmath>

#include "taskspace/binio.hpp"
#include "taskspace/common.hpp"

namespace taskspace {

GradientDifferential make_differential(GradientVector g_plus, GradientVector g_minus,
                                       std::string paradigm_id, std::uint64_t checkpoint_hash) {
    if (g_plus.size() != g_minus.size())
        fail(Errc::shape_mismatch, "make_differential: g+ and g- sizes differ");
    GradientDifferential gd;
    gd.g_delta.resize(g_plus.size());
    for (std::size_t i = 0; i < g_plus.size(); ++i) gd.g_delta[i] = g_plus[i] - g_minus[i];
    gd.g_plus = std::move(g_plus);
    gd.g_minus = std::move(g_minus);
    gd.paradigm_id = std::move(paradigm_id);
    gd.checkpoint_hash = checkpoint_hash;
    return gd;
}

namespace {

GradientVector mean_token_gradient(const LmModel& model, const std::vector<double>& params,
                                   std::span<const TokenSeq> sentences) {
    LmModel::GradAccum acc = model.accumulate_gradient(params, sentences, true);
    GradientVector g = std::move(acc.grad_sum);
    for (double& v : g) v /= static_cast<double>(acc.tokens);
    return g;
}

}  // namespace

GradientDifferential gradient_differential(const LmModel& model,
                                           const std::vector<double>& params,
                                           const Paradigm& paradigm,
                                           std::uint64_t checkpoint_hash) {
    if (paradigm.train_idx.empty())
        fail(Errc::empty_input, "gradient_differential: paradigm " + paradigm.id +
                                    " has no train pairs");
    GradientVector g_plus = mean_token_gradient(model, params, paradigm.train_good());
    GradientVector g_minus = mean_token_gradient(model, params, paradigm.train_bad());
    return make_differential(std::move(g_plus), std::move(g_minus), paradigm.id, checkpoint_hash);
}

ParamSubspace select_subspace(const GradientDifferential& gd, double epsilon) {
    if (!(epsilon > 0.0)) fail(Errc::invalid_argument, "select_subspace: epsilon must be > 0");
    ParamSubspace sub;
    sub.epsilon = epsilon;
    sub.paradigm_id = gd.paradigm_id;
    for (std::size_t i = 0; i < gd.g_delta.size(); ++i)
        if (std::abs(gd.g_delta[i]) > epsilon) sub.indices.push_back(i);
    if (sub.indices.empty())
        fail(Errc::empty_subspace, "select_subspace: no |g_delta| exceeds epsilon=" +
                                       format_double(epsilon) + " for paradigm " +
                                       gd.paradigm_id + "; use a smaller epsilon");
    return sub;
}

GradientMassStats gradient_mass_stats(const GradientDifferential& gd, const ParamSubspace& sub) {
    const std::size_t n = gd.g_delta.size();
    double total_l1 = 0.0;
    for (double v : gd.g_delta) total_l1 += std::abs(v);
    if (total_l1 == 0.0)
        fail(Errc::all_zero_differential, "gradient_mass_stats: g_delta is identically zero");
    double sub_l1 = 0.0;
    for (std::size_t i : sub.indices) {
        if (i >= n) fail(Errc::invalid_argument, "gradient_mass_stats: subspace index out of range");
        sub_l1 += std::abs(gd.g_delta[i]);
    }
    GradientMassStats stats;
    stats.param_fraction = static_cast<double>(sub.indices.size()) / static_cast<double>(n);
    stats.mass_fraction = sub_l1 / total_l1;

    // decades from 1e-12 up to 1e+2, with one underflow bin at the bottom
    constexpr int kLowExp = -12, kHighExp = 2;
    stats.histogram.push_back({0.0, 1e-12, 0});
    for (int e = kLowExp; e < kHighExp; ++e)
        stats.histogram.push_back({std::pow(10.0, e), std::pow(10.0, e + 1), 0});
    for (double v : gd.g_delta) {
        const double a = std::abs(v);
        std::size_t bin = 0;
        if (a >= 1e-12) {
            const int e = std::clamp(static_cast<int>(std::floor(std::log10(a))), kLowExp,
                                     kHighExp - 1);
            bin = static_cast<std::size_t>(e - kLowExp) + 1;
        }
        stats.histogram[bin].count += 1;
    }
    return stats;
}

bool stopping_rule(const std::vector<double>& history, double current) {
    if (history.size() < 5) return false;
    double mean = 0.0;
    for (std::size_t i = history.size() - 5; i < history.size(); ++i) mean += history[i];
    mean /= 5.0;
    return current <= mean;
}

void masked_sgd_step(std::vector<double>& params, const GradientVector& grads,
                     const std::vector<std::size_t>& subspace, double lr) {
    if (params.size() != grads.size())
        fail(Errc::shape_mismatch, "masked_sgd_step: params/grads size mismatch");
    for (std::size_t i : subspace) {
        if (i >= params.size())
            fail(Errc::invalid_argument, "masked_sgd_step: subspace index out of range");
        if (!std::isfinite(grads[i])) fail(Errc::non_finite, "masked_sgd_step: non-finite gradient");
        params[i] -= lr * grads[i];
    }
}

namespace {

struct TuneLoop {
    const LmModel& model;
    const Paradigm& paradigm;
    const FtgdHyper& hyper;
    std::span<const TokenSeq> heldout;
    std::vector<TokenPair> eval_pairs;
    std::vector<TokenSeq> eval_sentences;

    explicit TuneLoop(const LmModel& m, const Paradigm& p, const FtgdHyper& h,
                      std::span<const TokenSeq> ho)
        : model(m), paradigm(p), hyper(h), heldout(ho) {
        if (p.train_idx.empty() || p.eval_idx.empty())
            fail(Errc::empty_input, "tune: paradigm " + p.id + " needs train and eval splits");
        if (h.max_steps < 0) fail(Errc::invalid_argument, "tune: max_steps must be >= 0");
        eval_pairs = p.eval_pairs();
        for (const TokenPair& pr : eval_pairs) {
            eval_sentences.push_back(pr.good);
            eval_sentences.push_back(pr.bad);
        }
    }

    double accuracy(const std::vector<double>& params) const {
        std::vector<double> lp = model.sentence_logprobs(params, eval_sentences);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < eval_pairs.size(); ++i)
            if (lp[2 * i] > lp[2 * i + 1]) ++correct;
        return static_cast<double>(correct) / static_cast<double>(eval_pairs.size());
    }

    double ppl(const std::vector<double>& params) const {
        return heldout.empty() ? 0.0 : std::exp(model.mean_nll(params, heldout));
    }

    /// Runs the shared tuning loop; `step` applies one update to params.
    template <typename StepFn>
    FtgdRunLog run(std::vector<double>& params, StepFn&& step) {
        FtgdRunLog log;
        log.pre_accuracy = accuracy(params);
        log.pre_perplexity = ppl(params);
        std::vector<double> history;
        log.stop_reason = "max_steps";
        for (int s = 1; s <= hyper.max_steps; ++s) {
            step(params, s);
            const double acc = accuracy(params);
            log.step_accuracy.push_back(acc);
            if (!heldout.empty()) log.step_perplexity.push_back(ppl(params));
            log.steps = s;
            const bool stop = stopping_rule(history, acc);
            history.push_back(acc);
            if (stop) {
                log.stop_reason = "converged";
                break;
            }
        }
        return log;
    }
};

LmCheckpoint tuned_checkpoint(const LmCheckpoint& base, std::vector<double> params) {
    LmCheckpoint out;
    out.config = base.config;
    out.params = std::move(params);
    out.rng_state = base.rng_state;
    out.init_seed = base.init_seed;
    out.epoch = base.epoch;
    return out;
}

}  // namespace

FtgdResult ftgd_tune(const LmCheckpoint& ckpt, const Paradigm& paradigm, const FtgdHyper& hyper,
                     std::span<const TokenSeq> heldout) {
    LmModel model(ckpt.config);
    TuneLoop loop(model, paradigm, hyper, heldout);
    const std::uint64_t base_hash = ckpt.hash();

    FtgdResult result;
    result.initial_differential = gradient_differential(model, ckpt.params, paradigm, base_hash);
    result.initial_subspace = select_subspace(result.initial_differential, hyper.epsilon);

    std::vector<double> params = ckpt.params;
    ParamSubspace active = result.initial_subspace;
    GradientDifferential scratch;
    result.log = loop.run(params, [&](std::vector<double>& p, int step) {
        const GradientDifferential* gd = &result.initial_differential;
        if (step > 1) {
            scratch = gradient_differential(model, p, paradigm, base_hash);
            gd = &scratch;
        }
        if (hyper.reselect_each_step && step > 1) active = select_subspace(*gd, hyper.epsilon);
        masked_sgd_step(p, gd->g_delta, active.indices, hyper.lr);
    });
    result.tuned = tuned_checkpoint(ckpt, std::move(params));
    return result;
}

FullGradResult full_gradient_tune(const LmCheckpoint& ckpt, const Paradigm& paradigm,
                                  const FtgdHyper& hyper, std::span<const TokenSeq> heldout) {
    LmModel model(ckpt.config);
    TuneLoop loop(model, paradigm, hyper, heldout);
    std::vector<TokenSeq> good = paradigm.train_good();

    FullGradResult result;
    std::vector<double> params = ckpt.params;
    result.log = loop.run(params, [&](std::vector<double>& p, int) {
        LmModel::GradAccum acc = model.accumulate_gradient(p, good, true);
        for (double& v : acc.grad_sum) v /= static_cast<double>(acc.tokens);
        sgd_step(p, acc.grad_sum, hyper.lr);
    });
    result.tuned = tuned_checkpoint(ckpt, std::move(params));
    return result;
}

SparseDifferential sparsify(const GradientDifferential& gd, const ParamSubspace& sub) {
    SparseDifferential sd;
    sd.paradigm_id = gd.paradigm_id;
    sd.checkpoint_hash = gd.checkpoint_hash;
    sd.epsilon = sub.epsilon;
    sd.total_params = gd.g_delta.size();
    for (double v : gd.g_delta) sd.total_l1 += std::abs(v);
    sd.indices = sub.indices;
    sd.values.reserve(sub.indices.size());
    for (std::size_t i : sub.indices) sd.values.push_back(gd.g_delta[i]);
    return sd;
}

namespace {
constexpr char kDiffMagic[8] = {'T', 'S', 'G', 'D', 'I', 'F', 'F', '1'};
}

void save_sparse_differential(const SparseDifferential& sd, const std::string& path) {
    BinWriter w;
    w.raw(kDiffMagic, sizeof kDiffMagic);
    w.u64(sd.checkpoint_hash);
    w.str(sd.paradigm_id);
    w.f64(sd.epsilon);
    w.u64(sd.total_params);
    w.f64(sd.total_l1);
    w.u64(sd.indices.size());
    for (std::size_t i = 0; i < sd.indices.size(); ++i) {
        w.u64(sd.indices[i]);
        w.f64(sd.values[i]);
    }
    write_binary_file(path, w.bytes());
}

SparseDifferential load_sparse_differential(const std::string& path) {
    const std::vector<std::byte> bytes = read_binary_file(path);
    BinReader r(bytes);
    if (r.bytes_str(sizeof kDiffMagic) != std::string(kDiffMagic, sizeof kDiffMagic))
        fail(Errc::io_error, "not a gradient differential dump: " + path);
    SparseDifferential sd;
    sd.checkpoint_hash = r.u64();
    sd.paradigm_id = r.str();
    sd.epsilon = r.f64();
    sd.total_params = r.u64();
    sd.total_l1 = r.f64();
    const std::uint64_t count = r.u64();
    sd.indices.reserve(count);
    sd.values.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        sd.indices.push_back(r.u64());
        sd.values.push_back(r.f64());
    }
    return sd;
}

}  // namespace taskspace
