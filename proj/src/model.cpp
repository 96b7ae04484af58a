#include "taskspace/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "taskspace/common.hpp"

namespace taskspace {

using json = nlohmann::json;

void LmConfig::validate() const {
    if (n_layers < 0) fail(Errc::config_error, "LmConfig: n_layers must be >= 0");
    if (d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 || context_length < 1)
        fail(Errc::config_error, "LmConfig: extents must be >= 1");
    if (d_model % n_heads != 0)
        fail(Errc::config_error, "LmConfig: d_model must be divisible by n_heads");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        fail(Errc::config_error, "LmConfig: dropout_rate must be in [0,1)");
}

std::string LmConfig::canonical_json() const {
    json j;
    j["context_length"] = context_length;
    j["d_ffn"] = d_ffn;
    j["d_model"] = d_model;
    j["dropout_rate"] = dropout_rate;
    j["n_heads"] = n_heads;
    j["n_layers"] = n_layers;
    j["tie_embeddings"] = tie_embeddings;
    j["vocab_size"] = vocab_size;
    return j.dump();
}

LmConfig LmConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    LmConfig c;
    c.context_length = j.at("context_length").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.vocab_size = j.at("vocab_size").get<int>();
    return c;
}

std::int64_t param_count(const LmConfig& c) {
    c.validate();
    const std::int64_t d = c.d_model, f = c.d_ffn, v = c.vocab_size;
    const std::int64_t per_layer = 4 * d * d + 4 * d   // attention projections + biases
                                   + 2 * d * f + f + d  // ffn
                                   + 2 * 2 * d;         // two layer norms
    std::int64_t total = v * d + c.context_length * d + c.n_layers * per_layer + 2 * d;
    if (!c.tie_embeddings) total += v * d;
    return total;
}

ParamLayout ParamLayout::build(const LmConfig& c) {
    c.validate();
    ParamLayout layout;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.d_ffn);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    auto push = [&layout](std::string name, std::vector<std::size_t> shape) {
        Entry e;
        e.name = std::move(name);
        e.shape = std::move(shape);
        e.size = 1;
        for (std::size_t extent : e.shape) e.size *= extent;
        e.offset = layout.total;
        layout.total += e.size;
        layout.entries.push_back(std::move(e));
    };
    push("wte", {v, d});
    push("wpe", {static_cast<std::size_t>(c.context_length), d});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string base = "layer" + std::to_string(l) + ".";
        push(base + "ln1.gain", {d});
        push(base + "ln1.bias", {d});
        push(base + "attn.wq", {d, d});
        push(base + "attn.bq", {d});
        push(base + "attn.wk", {d, d});
        push(base + "attn.bk", {d});
        push(base + "attn.wv", {d, d});
        push(base + "attn.bv", {d});
        push(base + "attn.wo", {d, d});
        push(base + "attn.bo", {d});
        push(base + "ln2.gain", {d});
        push(base + "ln2.bias", {d});
        push(base + "ffn.w1", {f, d});
        push(base + "ffn.b1", {f});
        push(base + "ffn.w2", {d, f});
        push(base + "ffn.b2", {d});
    }
    push("lnf.gain", {d});
    push("lnf.bias", {d});
    if (!c.tie_embeddings) push("head", {v, d});
    return layout;
}

const ParamLayout::Entry& ParamLayout::find(std::string_view name) const {
    for (const Entry& e : entries)
        if (e.name == name) return e;
    fail(Errc::invalid_argument, "ParamLayout: no parameter named " + std::string(name));
}

namespace {

enum class ParamKind { weight, bias, gain };

ParamKind kind_of(const std::string& name) {
    if (name.ends_with("gain")) return ParamKind::gain;
    if (name.ends_with("bias") || name.ends_with(".bq") || name.ends_with(".bk") ||
        name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") ||
        name.ends_with(".b2"))
        return ParamKind::bias;
    return ParamKind::weight;
}

constexpr double kInitStd = 0.02;

}  // namespace

std::vector<double> init_params(const LmConfig& config, std::uint64_t seed) {
    ParamLayout layout = ParamLayout::build(config);
    std::vector<double> params(layout.total, 0.0);
    Rng rng = Rng(seed).substream("init");
    for (const auto& e : layout.entries) {
        switch (kind_of(e.name)) {
            case ParamKind::gain:
                std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, 1.0);
                break;
            case ParamKind::bias:
                break;  // already zero
            case ParamKind::weight:
                for (std::size_t i = 0; i < e.size; ++i)
                    params[e.offset + i] = rng.normal(0.0, kInitStd);
                break;
        }
    }
    return params;
}

void sgd_step(std::vector<double>& params, const GradientVector& grads, double lr) {
    if (params.size() != grads.size())
        fail(Errc::shape_mismatch, "sgd_step: params/grads size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) fail(Errc::non_finite, "sgd_step: non-finite gradient");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

void adam_step(std::vector<double>& params, const GradientVector& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    if (params.size() != grads.size())
        fail(Errc::shape_mismatch, "adam_step: params/grads size mismatch");
    if (state.m.empty()) state.m.assign(params.size(), 0.0);
    if (state.v.empty()) state.v.assign(params.size(), 0.0);
    if (state.m.size() != params.size() || state.v.size() != params.size())
        fail(Errc::shape_mismatch, "adam_step: state size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) fail(Errc::non_finite, "adam_step: non-finite gradient");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        params[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + eps);
    }
}

std::uint64_t LmCheckpoint::hash() const {
    std::uint64_t h = fnv1a64(config.canonical_json());
    return fnv1a64(std::as_bytes(std::span<const double>(params)), h);
}

LmModel::LmModel(LmConfig config) : config_(std::move(config)) {
    config_.validate();
    layout_ = ParamLayout::build(config_);
}

LmModel::Batch LmModel::build_batch(std::span<const TokenSeq> sentences, bool append_eos) const {
    if (sentences.empty()) fail(Errc::empty_input, "build_batch: no sentences");
    Batch b;
    b.seg_offsets.push_back(0);
    for (const TokenSeq& s : sentences) {
        if (s.empty()) fail(Errc::empty_input, "build_batch: empty sentence");
        const std::size_t in_len = append_eos ? s.size() + 1 : s.size();
        if (in_len > static_cast<std::size_t>(config_.context_length))
            fail(Errc::invalid_argument,
                 "build_batch: sentence of length " + std::to_string(s.size()) +
                     " exceeds context " + std::to_string(config_.context_length));
        for (std::int32_t id : s)
            if (id < 0 || id >= config_.vocab_size)
                fail(Errc::token_out_of_range, "build_batch: token id " + std::to_string(id) +
                                                   " outside vocab " +
                                                   std::to_string(config_.vocab_size));
        b.inputs.push_back(kBosId);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) b.inputs.push_back(s[i]);
        if (append_eos) b.inputs.push_back(s.back());
        for (std::int32_t id : s) b.targets.push_back(id);
        if (append_eos) b.targets.push_back(kEosId);
        for (std::size_t i = 0; i < in_len; ++i)
            b.positions.push_back(static_cast<std::int32_t>(i));
        b.seg_offsets.push_back(static_cast<std::int32_t>(b.inputs.size()));
    }
    return b;
}

GradTape::Var LmModel::forward(GradTape& tape, const std::vector<double>& params,
                               const Batch& batch, Rng* dropout_rng,
                               std::vector<GradTape::Var>* param_vars) const {
    if (params.size() != layout_.total)
        fail(Errc::shape_mismatch, "forward: expected " + std::to_string(layout_.total) +
                                       " params, got " + std::to_string(params.size()));
    std::vector<GradTape::Var> pv;
    pv.reserve(layout_.entries.size());
    for (const auto& e : layout_.entries) {
        std::vector<double> slice(params.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                  params.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size));
        pv.push_back(tape.param(Tensor(e.shape, std::move(slice)), e.name));
    }
    auto P = [&](std::string_view name) -> GradTape::Var {
        for (std::size_t i = 0; i < layout_.entries.size(); ++i)
            if (layout_.entries[i].name == name) return pv[i];
        fail(Errc::invalid_argument, "forward: unknown parameter " + std::string(name));
    };

    const bool drop = dropout_rng != nullptr && config_.dropout_rate > 0.0;
    GradTape::Var x = tape.add(tape.gather_rows(P("wte"), batch.inputs),
                               tape.gather_rows(P("wpe"), batch.positions));
    if (drop) x = tape.dropout(x, config_.dropout_rate, *dropout_rng);
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string base = "layer" + std::to_string(l) + ".";
        GradTape::Var h = tape.layer_norm(x, P(base + "ln1.gain"), P(base + "ln1.bias"));
        GradTape::Var q = tape.add_row_bias(tape.matmul_nt(h, P(base + "attn.wq")),
                                            P(base + "attn.bq"));
        GradTape::Var k = tape.add_row_bias(tape.matmul_nt(h, P(base + "attn.wk")),
                                            P(base + "attn.bk"));
        GradTape::Var v = tape.add_row_bias(tape.matmul_nt(h, P(base + "attn.wv")),
                                            P(base + "attn.bv"));
        GradTape::Var a = tape.causal_attention(q, k, v, batch.seg_offsets, config_.n_heads);
        a = tape.add_row_bias(tape.matmul_nt(a, P(base + "attn.wo")), P(base + "attn.bo"));
        if (drop) a = tape.dropout(a, config_.dropout_rate, *dropout_rng);
        x = tape.add(x, a);
        GradTape::Var h2 = tape.layer_norm(x, P(base + "ln2.gain"), P(base + "ln2.bias"));
        GradTape::Var f = tape.add_row_bias(tape.matmul_nt(h2, P(base + "ffn.w1")),
                                            P(base + "ffn.b1"));
        f = tape.gelu(f);
        f = tape.add_row_bias(tape.matmul_nt(f, P(base + "ffn.w2")), P(base + "ffn.b2"));
        if (drop) f = tape.dropout(f, config_.dropout_rate, *dropout_rng);
        x = tape.add(x, f);
    }
    x = tape.layer_norm(x, P("lnf.gain"), P("lnf.bias"));
    GradTape::Var logits = tape.matmul_nt(x, config_.tie_embeddings ? P("wte") : P("head"));
    if (param_vars) *param_vars = std::move(pv);
    return logits;
}

GradTape::Var LmModel::loss(GradTape& tape, const std::vector<double>& params, const Batch& batch,
                            GradTape::Reduction reduction, Rng* dropout_rng,
                            std::vector<GradTape::Var>* param_vars) const {
    GradTape::Var logits = forward(tape, params, batch, dropout_rng, param_vars);
    return tape.cross_entropy(logits, batch.targets, reduction);
}

Tensor LmModel::forward_logits(const std::vector<double>& params, const Batch& batch) const {
    GradTape tape(false);
    GradTape::Var logits = forward(tape, params, batch, nullptr, nullptr);
    return tape.value(logits);
}

GradientVector collect_param_grads(const GradTape& tape,
                                   const std::vector<GradTape::Var>& param_vars,
                                   const ParamLayout& layout) {
    if (param_vars.size() != layout.entries.size())
        fail(Errc::shape_mismatch, "collect_param_grads: var/layout mismatch");
    GradientVector flat(layout.total, 0.0);
    for (std::size_t i = 0; i < param_vars.size(); ++i) {
        if (!tape.has_grad(param_vars[i])) continue;
        const Tensor& g = tape.grad(param_vars[i]);
        std::copy(g.data.begin(), g.data.end(),
                  flat.begin() + static_cast<std::ptrdiff_t>(layout.entries[i].offset));
    }
    return flat;
}

namespace {

constexpr std::size_t kChunkSentences = 256;

/// Per-sentence total logprob from logits of a scoring batch.
std::vector<double> segment_logprobs(const Tensor& logits, const LmModel::Batch& batch) {
    std::vector<double> out;
    const std::size_t vocab = logits.cols();
    for (std::size_t s = 0; s + 1 < batch.seg_offsets.size(); ++s) {
        double total = 0.0;
        for (auto r = static_cast<std::size_t>(batch.seg_offsets[s]);
             r < static_cast<std::size_t>(batch.seg_offsets[s + 1]); ++r) {
            const double* xr = logits.data.data() + r * vocab;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < vocab; ++c) m = std::max(m, xr[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < vocab; ++c) sum += std::exp(xr[c] - m);
            const double lse = m + std::log(sum);
            total += xr[static_cast<std::size_t>(batch.targets[r])] - lse;
        }
        out.push_back(total);
    }
    return out;
}

}  // namespace

LmModel::GradAccum LmModel::accumulate_gradient(const std::vector<double>& params,
                                                std::span<const TokenSeq> sentences,
                                                bool append_eos) const {
    if (sentences.empty()) fail(Errc::empty_input, "accumulate_gradient: no sentences");
    GradAccum acc;
    acc.grad_sum.assign(layout_.total, 0.0);
    for (std::size_t start = 0; start < sentences.size(); start += kChunkSentences) {
        const std::size_t count = std::min(kChunkSentences, sentences.size() - start);
        Batch batch = build_batch(sentences.subspan(start, count), append_eos);
        GradTape tape;
        std::vector<GradTape::Var> pv;
        GradTape::Var logits = forward(tape, params, batch, nullptr, &pv);
        GradTape::Var loss = tape.cross_entropy(logits, batch.targets, GradTape::Reduction::sum);
        tape.backward(loss);
        GradientVector g = collect_param_grads(tape, pv, layout_);
        for (std::size_t i = 0; i < g.size(); ++i) acc.grad_sum[i] += g[i];
        acc.tokens += batch.tokens();
        acc.nll_sum += tape.value(loss).data[0];
    }
    return acc;
}

std::vector<double> LmModel::sentence_logprobs(const std::vector<double>& params,
                                               std::span<const TokenSeq> sentences) const {
    if (sentences.empty()) fail(Errc::empty_input, "sentence_logprobs: no sentences");
    std::vector<double> out;
    out.reserve(sentences.size());
    for (std::size_t start = 0; start < sentences.size(); start += kChunkSentences) {
        const std::size_t count = std::min(kChunkSentences, sentences.size() - start);
        Batch batch = build_batch(sentences.subspan(start, count), false);
        Tensor logits = forward_logits(params, batch);
        for (double lp : segment_logprobs(logits, batch)) out.push_back(lp);
    }
    return out;
}

double LmModel::mean_nll(const std::vector<double>& params,
                         std::span<const TokenSeq> sentences) const {
    if (sentences.empty()) fail(Errc::empty_input, "mean_nll: no sentences");
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < sentences.size(); start += kChunkSentences) {
        const std::size_t count = std::min(kChunkSentences, sentences.size() - start);
        Batch batch = build_batch(sentences.subspan(start, count), true);
        Tensor logits = forward_logits(params, batch);
        for (double lp : segment_logprobs(logits, batch)) total -= lp;
        tokens += batch.tokens();
    }
    return total / static_cast<double>(tokens);
}

double sentence_logprob(const LmCheckpoint& ckpt, const TokenSeq& tokens) {
    LmModel model(ckpt.config);
    const TokenSeq sentences[] = {tokens};
    return model.sentence_logprobs(ckpt.params, sentences)[0];
}

EvalResult pair_accuracy(const LmCheckpoint& ckpt, std::span<const TokenPair> pairs,
                         std::string task_id) {
    if (pairs.empty()) fail(Errc::empty_input, "pair_accuracy: empty pair set");
    LmModel model(ckpt.config);
    std::vector<TokenSeq> sentences;
    sentences.reserve(pairs.size() * 2);
    for (const TokenPair& p : pairs) {
        sentences.push_back(p.good);
        sentences.push_back(p.bad);
    }
    std::vector<double> lp = model.sentence_logprobs(ckpt.params, sentences);
    EvalResult result;
    result.task_id = std::move(task_id);
    result.n_pairs = pairs.size();
    std::size_t n_correct = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const bool ok = lp[2 * i] > lp[2 * i + 1];  // ties are incorrect
        result.correct.push_back(ok);
        n_correct += ok ? 1 : 0;
    }
    result.accuracy = static_cast<double>(n_correct) / static_cast<double>(result.n_pairs);
    return result;
}

double perplexity(const LmCheckpoint& ckpt, std::span<const TokenSeq> corpus) {
    if (corpus.empty()) fail(Errc::empty_input, "perplexity: empty corpus");
    LmModel model(ckpt.config);
    return std::exp(model.mean_nll(ckpt.params, corpus));
}

PretrainResult pretrain(const LmConfig& config, std::span<const TokenSeq> sentences,
                        const PretrainHyper& hyper, const LmCheckpoint* resume_from) {
    config.validate();
    if (sentences.empty()) fail(Errc::empty_input, "pretrain: empty corpus");
    if (hyper.batch_size < 1) fail(Errc::config_error, "pretrain: batch_size must be >= 1");
    LmModel model(config);

    std::vector<int> schedule = hyper.checkpoint_epochs;
    if (schedule.empty()) schedule.push_back(hyper.epochs);
    auto scheduled = [&schedule](int e) {
        return std::find(schedule.begin(), schedule.end(), e) != schedule.end();
    };

    std::vector<double> params;
    AdamState adam;
    Rng train_rng;
    int start_epoch = 0;
    if (resume_from) {
        if (resume_from->config != config)
            fail(Errc::architecture_mismatch, "pretrain: resume checkpoint config differs");
        params = resume_from->params;
        if (resume_from->adam) adam = *resume_from->adam;
        train_rng = Rng::deserialize(resume_from->rng_state);
        start_epoch = static_cast<int>(resume_from->epoch);
    } else {
        params = init_params(config, hyper.seed);
        train_rng = Rng(hyper.seed).substream("train");
    }

    PretrainResult result;
    auto snapshot = [&](int epoch, const std::vector<double>& p) {
        LmCheckpoint ckpt;
        ckpt.config = config;
        ckpt.params = p;
        ckpt.adam = adam;
        ckpt.rng_state = train_rng.serialize();
        ckpt.init_seed = hyper.seed;
        ckpt.epoch = epoch;
        result.checkpoints.push_back(std::move(ckpt));
    };
    if (!resume_from && scheduled(0)) snapshot(0, params);

    std::vector<std::size_t> order(sentences.size());
    std::vector<TokenSeq> batch_sentences;
    std::vector<double> prev_params;
    for (int epoch = start_epoch + 1; epoch <= hyper.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        train_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(hyper.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(hyper.batch_size), order.size() - start);
            batch_sentences.clear();
            for (std::size_t i = 0; i < count; ++i)
                batch_sentences.push_back(sentences[order[start + i]]);
            LmModel::Batch batch = model.build_batch(batch_sentences, true);
            GradTape tape;
            std::vector<GradTape::Var> pv;
            GradTape::Var loss = model.loss(tape, params, batch, GradTape::Reduction::mean,
                                            &train_rng, &pv);
            const double loss_value = tape.value(loss).data[0];
            if (!std::isfinite(loss_value)) {
                log_warn("pretrain: loss diverged at epoch " + std::to_string(epoch) +
                         ", aborting with last good state");
                result.diverged = true;
                snapshot(epoch - 1, prev_params.empty() ? params : prev_params);
                return result;
            }
            result.step_losses.push_back(loss_value);
            tape.backward(loss);
            prev_params = params;
            GradientVector grads = collect_param_grads(tape, pv, model.layout());
            adam_step(params, grads, adam, hyper.lr);
        }
        if (scheduled(epoch)) snapshot(epoch, params);
    }
    return result;
}

}  // namespace taskspace
