#include "taskspace/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "taskspace/common.hpp"
#include "taskspace/ftgd.hpp"
#include "taskspace/report.hpp"

namespace taskspace {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class StageTimer {
public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    std::int64_t elapsed_ms() const {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void write_stage_manifest(const RunConfig& config, const std::string& stage,
                          const std::vector<std::string>& artifacts, std::int64_t wall_ms) {
    json m;
    m["config_hash"] = hex_u64(config.hash());
    m["seed"] = hex_u64(config.seed);
    m["stage"] = stage;
    m["tool_version"] = kToolVersion;
    m["wall_ms"] = wall_ms;
    json files = json::array();
    for (const std::string& path : artifacts) {
        json f;
        f["path"] = fs::relative(path, config.out_dir).string();
        const auto bytes = read_binary_file(path);
        f["crc32"] = crc32(bytes);
        files.push_back(f);
    }
    m["artifacts"] = files;
    write_text_file((fs::path(config.out_dir) / (stage + "_manifest.json")).string(),
                    m.dump(2) + "\n");
}

template <typename T>
T field(const json& j, const std::string& path, const char* key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(Errc::config_error, "config field " + path + "." + key + " has the wrong type");
    }
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.pretrain.epochs = 6;
    c.pretrain.checkpoint_epochs = {0, 1, 2, 3, 4, 5, 6};
    return c;
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(Errc::config_error, std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c = defaults();
    if (!j.contains("seed")) fail(Errc::config_error, "config field seed is required");
    c.seed = field<std::uint64_t>(j, "", "seed", 1);
    c.jobs = field<int>(j, "", "jobs", c.jobs);
    c.out_dir = field<std::string>(j, "", "out_dir", c.out_dir);
    if (j.contains("corpus")) {
        const json& jc = j["corpus"];
        c.suite.phenomena = field<int>(jc, "corpus", "phenomena", c.suite.phenomena);
        c.suite.paradigms_per = field<int>(jc, "corpus", "paradigms_per", c.suite.paradigms_per);
        c.suite.pairs_per = field<int>(jc, "corpus", "pairs_per", c.suite.pairs_per);
        c.ingest_path = field<std::string>(jc, "corpus", "ingest_path", c.ingest_path);
        c.corpus_sentences =
            field<std::size_t>(jc, "corpus", "sentences", c.corpus_sentences);
        c.valid_fraction = field<double>(jc, "corpus", "valid_fraction", c.valid_fraction);
        c.filler_fraction = field<double>(jc, "corpus", "filler_fraction", c.filler_fraction);
        c.heldout_sentences =
            field<std::size_t>(jc, "corpus", "heldout_sentences", c.heldout_sentences);
    }
    if (j.contains("model")) {
        const json& jm = j["model"];
        c.model.n_layers = field<int>(jm, "model", "n_layers", c.model.n_layers);
        c.model.d_model = field<int>(jm, "model", "d_model", c.model.d_model);
        c.model.n_heads = field<int>(jm, "model", "n_heads", c.model.n_heads);
        c.model.d_ffn = field<int>(jm, "model", "d_ffn", c.model.d_ffn);
        c.model.context_length =
            field<int>(jm, "model", "context_length", c.model.context_length);
        c.model.dropout_rate = field<double>(jm, "model", "dropout_rate", c.model.dropout_rate);
        c.model.tie_embeddings =
            field<bool>(jm, "model", "tie_embeddings", c.model.tie_embeddings);
    }
    if (j.contains("pretrain")) {
        const json& jp = j["pretrain"];
        c.pretrain.batch_size = field<int>(jp, "pretrain", "batch_size", c.pretrain.batch_size);
        c.pretrain.lr = field<double>(jp, "pretrain", "lr", c.pretrain.lr);
        c.pretrain.epochs = field<int>(jp, "pretrain", "epochs", c.pretrain.epochs);
        c.pretrain.checkpoint_epochs = field<std::vector<int>>(jp, "pretrain", "checkpoint_epochs",
                                                               c.pretrain.checkpoint_epochs);
    }
    if (j.contains("probe")) {
        const json& jp = j["probe"];
        c.probe.lr = field<double>(jp, "probe", "lr", c.probe.lr);
        c.probe.epsilon = field<double>(jp, "probe", "epsilon", c.probe.epsilon);
        c.probe.max_steps = field<int>(jp, "probe", "max_steps", c.probe.max_steps);
        c.probe.reselect_each_step =
            field<bool>(jp, "probe", "reselect_each_step", c.probe.reselect_each_step);
    }
    c.validate();
    return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    if (!fs::exists(path)) fail(Errc::config_error, "config file not found: " + path);
    return from_json(read_text_file(path));
}

std::string RunConfig::canonical_json() const {
    json j;
    j["seed"] = hex_u64(seed);
    j["jobs"] = jobs;
    j["out_dir"] = out_dir;
    j["corpus"] = {{"phenomena", suite.phenomena},
                   {"paradigms_per", suite.paradigms_per},
                   {"pairs_per", suite.pairs_per},
                   {"ingest_path", ingest_path},
                   {"sentences", corpus_sentences},
                   {"valid_fraction", valid_fraction},
                   {"filler_fraction", filler_fraction},
                   {"heldout_sentences", heldout_sentences}};
    j["model"] = json::parse(model.canonical_json());
    j["pretrain"] = {{"batch_size", pretrain.batch_size},
                     {"lr", pretrain.lr},
                     {"epochs", pretrain.epochs},
                     {"checkpoint_epochs", pretrain.checkpoint_epochs}};
    j["probe"] = {{"lr", probe.lr},
                  {"epsilon", probe.epsilon},
                  {"max_steps", probe.max_steps},
                  {"reselect_each_step", probe.reselect_each_step}};
    return j.dump();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_json()); }

void RunConfig::validate() const {
    if (out_dir.empty()) fail(Errc::config_error, "config field out_dir must not be empty");
    if (jobs < 0) fail(Errc::config_error, "config field jobs must be >= 0");
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0))
        fail(Errc::config_error, "config field corpus.valid_fraction must be in [0,1)");
    if (!(filler_fraction >= 0.0 && filler_fraction < 1.0))
        fail(Errc::config_error, "config field corpus.filler_fraction must be in [0,1)");
    if (corpus_sentences < 1)
        fail(Errc::config_error, "config field corpus.sentences must be >= 1");
    if (!ingest_path.empty() && !fs::exists(ingest_path))
        fail(Errc::config_error, "config field corpus.ingest_path does not resolve: " + ingest_path);
    if (pretrain.epochs < 0) fail(Errc::config_error, "config field pretrain.epochs must be >= 0");
    if (!(probe.epsilon > 0.0))
        fail(Errc::config_error, "config field probe.epsilon must be > 0");
    if (probe.max_steps < 0)
        fail(Errc::config_error, "config field probe.max_steps must be >= 0");
    LmConfig m = model;
    m.vocab_size = m.vocab_size > 0 ? m.vocab_size : 1;  // filled from suite later
    m.validate();
}

std::string suite_dir(const RunConfig& c) { return (fs::path(c.out_dir) / "suite").string(); }
std::string corpus_dir(const RunConfig& c) { return (fs::path(c.out_dir) / "corpus").string(); }
std::string checkpoints_dir(const RunConfig& c) {
    return (fs::path(c.out_dir) / "checkpoints").string();
}
std::string probe_dir(const RunConfig& c, std::int64_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04lld", static_cast<long long>(epoch));
    return (fs::path(c.out_dir) / "probe" / buf).string();
}
std::string analysis_dir(const RunConfig& c) { return (fs::path(c.out_dir) / "analysis").string(); }
std::string report_dir(const RunConfig& c) { return (fs::path(c.out_dir) / "report").string(); }

TaskSuite load_suite(const RunConfig& config) {
    const std::string dir = suite_dir(config);
    if (!fs::is_directory(dir))
        fail(Errc::missing_artifact, "suite not found at " + dir + "; run generate or ingest first");
    return ingest_blimp(dir);
}

std::string checkpoint_path(const RunConfig& config, std::int64_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04lld.ckpt", static_cast<long long>(epoch));
    return (fs::path(checkpoints_dir(config)) / buf).string();
}

std::vector<std::int64_t> list_checkpoint_epochs(const RunConfig& config) {
    std::vector<std::int64_t> epochs;
    const std::string dir = checkpoints_dir(config);
    if (!fs::is_directory(dir)) return epochs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("epoch_") && name.ends_with(".ckpt"))
            epochs.push_back(std::stoll(name.substr(6, name.size() - 6 - 5)));
    }
    std::sort(epochs.begin(), epochs.end());
    return epochs;
}

int run_command(const std::function<int()>& body) {
    try {
        return body();
    } catch (const Error& e) {
        log_warn(e.what());
        switch (e.code()) {
            case Errc::config_error: return kExitConfig;
            case Errc::missing_artifact: return kExitMissingArtifact;
            default: return kExitFailure;
        }
    } catch (const std::exception& e) {
        log_warn(std::string("unexpected error: ") + e.what());
        return kExitFailure;
    }
}

int cmd_generate(const RunConfig& config) {
    config.validate();
    StageTimer timer;
    TaskSuite suite = generate_suite(config.seed, config.suite);
    fs::create_directories(suite_dir(config));
    export_suite(suite, suite_dir(config));
    std::vector<std::string> artifacts;
    for (const auto& p : suite.paradigms)
        artifacts.push_back((fs::path(suite_dir(config)) / (p.id + ".jsonl")).string());
    artifacts.push_back((fs::path(suite_dir(config)) / "manifest.json").string());
    write_stage_manifest(config, "generate", artifacts, timer.elapsed_ms());
    log_info("generate: " + std::to_string(suite.paradigms.size()) + " paradigms -> " +
             suite_dir(config));
    return kExitOk;
}

int cmd_ingest(const RunConfig& config) {
    config.validate();
    if (config.ingest_path.empty())
        fail(Errc::config_error, "ingest: config field corpus.ingest_path is required");
    StageTimer timer;
    const std::size_t max_tokens =
        config.model.context_length > 1 ? static_cast<std::size_t>(config.model.context_length - 1)
                                        : 0;
    TaskSuite suite = ingest_blimp(config.ingest_path, max_tokens);
    fs::create_directories(suite_dir(config));
    export_suite(suite, suite_dir(config));
    std::vector<std::string> artifacts;
    for (const auto& p : suite.paradigms)
        artifacts.push_back((fs::path(suite_dir(config)) / (p.id + ".jsonl")).string());
    artifacts.push_back((fs::path(suite_dir(config)) / "manifest.json").string());
    write_stage_manifest(config, "ingest", artifacts, timer.elapsed_ms());
    return kExitOk;
}

namespace {

PretrainCorpus build_corpus(const RunConfig& config, const TaskSuite& suite) {
    return make_pretrain_corpus(suite, config.seed, config.corpus_sentences,
                                config.valid_fraction, config.filler_fraction);
}

LmConfig model_config_for(const RunConfig& config, const TaskSuite& suite) {
    LmConfig m = config.model;
    m.vocab_size = static_cast<int>(suite.vocab.size());
    m.validate();
    return m;
}

std::span<const TokenSeq> heldout_slice(const RunConfig& config, const PretrainCorpus& corpus) {
    const std::size_t n = std::min(config.heldout_sentences, corpus.valid.size());
    return std::span<const TokenSeq>(corpus.valid.data(), n);
}

}  // namespace

int cmd_pretrain(const RunConfig& config, const std::string& resume_path) {
    config.validate();
    StageTimer timer;
    TaskSuite suite = load_suite(config);
    PretrainCorpus corpus = build_corpus(config, suite);

    fs::create_directories(corpus_dir(config));
    std::string train_text, valid_text;
    for (const TokenSeq& s : corpus.train) train_text += suite.vocab.detokenize(s) + "\n";
    for (const TokenSeq& s : corpus.valid) valid_text += suite.vocab.detokenize(s) + "\n";
    write_text_file((fs::path(corpus_dir(config)) / "train.txt").string(), train_text);
    write_text_file((fs::path(corpus_dir(config)) / "valid.txt").string(), valid_text);

    const LmConfig model_config = model_config_for(config, suite);
    PretrainHyper hyper = config.pretrain;
    hyper.seed = config.seed;

    LmCheckpoint resume;
    const LmCheckpoint* resume_ptr = nullptr;
    if (!resume_path.empty()) {
        resume = load_checkpoint(resume_path);
        resume_ptr = &resume;
    }
    PretrainResult result = pretrain(model_config, corpus.train, hyper, resume_ptr);

    fs::create_directories(checkpoints_dir(config));
    std::vector<std::string> artifacts;
    for (const LmCheckpoint& ckpt : result.checkpoints) {
        const std::string path = checkpoint_path(config, ckpt.epoch);
        save_checkpoint(ckpt, path);
        artifacts.push_back(path);
    }
    std::string loss_csv = "step,loss\n";
    for (std::size_t i = 0; i < result.step_losses.size(); ++i)
        loss_csv += std::to_string(i + 1) + "," + format_double(result.step_losses[i]) + "\n";
    const std::string loss_path = (fs::path(checkpoints_dir(config)) / "loss.csv").string();
    write_text_file(loss_path, loss_csv);
    artifacts.push_back(loss_path);
    artifacts.push_back((fs::path(corpus_dir(config)) / "train.txt").string());
    artifacts.push_back((fs::path(corpus_dir(config)) / "valid.txt").string());
    write_stage_manifest(config, "pretrain", artifacts, timer.elapsed_ms());
    if (result.diverged) {
        log_warn("pretrain: diverged; partial artifacts written (" +
                 std::to_string(result.checkpoints.size()) + " checkpoints)");
        return kExitFailure;
    }
    return kExitOk;
}

namespace {

std::vector<std::int64_t> select_epochs(const RunConfig& config, const std::string& selector) {
    std::vector<std::int64_t> available = list_checkpoint_epochs(config);
    if (available.empty())
        fail(Errc::missing_artifact, "no checkpoints under " + checkpoints_dir(config));
    if (selector == "final") return {available.back()};
    if (selector == "all") return available;
    std::int64_t wanted = 0;
    try {
        wanted = std::stoll(selector);
    } catch (const std::exception&) {
        fail(Errc::config_error, "bad checkpoint selector: " + selector);
    }
    if (std::find(available.begin(), available.end(), wanted) == available.end())
        fail(Errc::missing_artifact, "no checkpoint for epoch " + std::to_string(wanted));
    return {wanted};
}

json run_log_json(const FtgdRunLog& log) {
    json j;
    j["pre_accuracy"] = log.pre_accuracy;
    j["pre_perplexity"] = log.pre_perplexity;
    j["step_accuracy"] = log.step_accuracy;
    j["step_perplexity"] = log.step_perplexity;
    j["stop_reason"] = log.stop_reason;
    j["steps"] = log.steps;
    return j;
}

}  // namespace

int cmd_probe(const RunConfig& config, const std::string& selector, bool gradient_only) {
    config.validate();
    StageTimer timer;
    TaskSuite suite = load_suite(config);
    PretrainCorpus corpus = build_corpus(config, suite);
    const std::span<const TokenSeq> heldout = heldout_slice(config, corpus);

    bool any_failed = false;
    bool any_ok = false;
    std::vector<std::string> artifacts;
    for (std::int64_t epoch : select_epochs(config, selector)) {
        LmCheckpoint ckpt = load_checkpoint(checkpoint_path(config, epoch));
        const std::string dir = probe_dir(config, epoch);
        fs::create_directories(fs::path(dir) / "grads");

        if (gradient_only) {
            GradientProbeResult probe = gradient_probe(ckpt, suite, config.probe.epsilon);
            json manifest;
            manifest["checkpoint_hash"] = hex_u64(ckpt.hash());
            manifest["epoch"] = epoch;
            manifest["epsilon"] = config.probe.epsilon;
            manifest["mode"] = "gradient_only";
            manifest["skipped"] = probe.skipped;
            manifest["task_ids"] = probe.gradients.task_ids;
            for (std::size_t i = 0; i < probe.gradients.diffs.size(); ++i) {
                if (!probe.gradients.diffs[i]) continue;
                const std::string path =
                    (fs::path(dir) / "grads" / (probe.gradients.task_ids[i] + ".gdiff")).string();
                save_sparse_differential(*probe.gradients.diffs[i], path);
                artifacts.push_back(path);
                any_ok = true;
            }
            any_failed = any_failed || !probe.skipped.empty();
            const std::string mpath = (fs::path(dir) / "probe_manifest.json").string();
            write_text_file(mpath, manifest.dump(2) + "\n");
            artifacts.push_back(mpath);
            continue;
        }

        ProbeHyper hyper;
        hyper.ftgd = config.probe;
        hyper.jobs = config.jobs;
        TransferProbeResult probe = transfer_probe(ckpt, suite, hyper, heldout);

        const std::string tts_path = (fs::path(dir) / "tts.csv").string();
        write_space_csv(probe.tts, tts_path);
        artifacts.push_back(tts_path);

        std::string records = "source,target,pre_acc,post_acc,normalized\n";
        for (const TransferRecord& r : probe.records)
            records += r.source + "," + r.target + "," + format_double(r.pre_acc) + "," +
                       format_double(r.post_acc) + "," + format_double(r.normalized) + "\n";
        const std::string rec_path = (fs::path(dir) / "records.csv").string();
        write_text_file(rec_path, records);
        artifacts.push_back(rec_path);

        for (std::size_t i = 0; i < probe.gradients.diffs.size(); ++i) {
            if (!probe.gradients.diffs[i]) continue;
            const std::string path =
                (fs::path(dir) / "grads" / (probe.gradients.task_ids[i] + ".gdiff")).string();
            save_sparse_differential(*probe.gradients.diffs[i], path);
            artifacts.push_back(path);
        }

        json manifest;
        manifest["checkpoint_hash"] = hex_u64(probe.manifest.checkpoint_hash);
        manifest["epoch"] = epoch;
        manifest["task_ids"] = probe.manifest.task_ids;
        manifest["eval1"] = probe.manifest.eval1;
        manifest["evaluations"] = probe.manifest.evaluations;
        manifest["tuning_runs"] = probe.manifest.tuning_runs;
        manifest["hyper"] = {{"lr", hyper.ftgd.lr},
                             {"epsilon", hyper.ftgd.epsilon},
                             {"max_steps", hyper.ftgd.max_steps},
                             {"reselect_each_step", hyper.ftgd.reselect_each_step},
                             {"jobs", hyper.jobs}};
        json runs = json::array();
        for (const TaskRunInfo& info : probe.manifest.runs) {
            json r;
            r["task_id"] = info.task_id;
            r["failed"] = info.failed;
            r["error"] = info.error;
            r["subspace_size"] = info.subspace_size;
            r["param_fraction"] = info.param_fraction;
            r["mass_fraction"] = info.mass_fraction;
            r["log"] = run_log_json(info.log);
            runs.push_back(r);
            any_failed = any_failed || info.failed;
            any_ok = any_ok || !info.failed;
        }
        manifest["runs"] = runs;
        const std::string mpath = (fs::path(dir) / "probe_manifest.json").string();
        write_text_file(mpath, manifest.dump(2) + "\n");
        artifacts.push_back(mpath);
    }
    write_stage_manifest(config, gradient_only ? "probe_gradient" : "probe", artifacts,
                         timer.elapsed_ms());
    if (any_failed && !any_ok) return kExitFailure;
    if (any_failed) return kExitPartialProbe;
    return kExitOk;
}

namespace {

TaskGradients load_gradients(const RunConfig& config, const TaskSuite& suite,
                             std::int64_t epoch) {
    TaskGradients g;
    g.task_ids = suite.task_ids();
    g.diffs.resize(g.task_ids.size());
    for (std::size_t i = 0; i < g.task_ids.size(); ++i) {
        const std::string path =
            (fs::path(probe_dir(config, epoch)) / "grads" / (g.task_ids[i] + ".gdiff")).string();
        if (fs::exists(path)) g.diffs[i] = load_sparse_differential(path);
    }
    return g;
}

std::vector<std::int64_t> probed_epochs(const RunConfig& config) {
    std::vector<std::int64_t> epochs;
    const fs::path base = fs::path(config.out_dir) / "probe";
    if (!fs::is_directory(base)) return epochs;
    for (const auto& entry : fs::directory_iterator(base)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("epoch_") && fs::is_directory(entry.path()))
            epochs.push_back(std::stoll(name.substr(6)));
    }
    std::sort(epochs.begin(), epochs.end());
    return epochs;
}

std::string correlation_row(const std::string& xname, const std::string& yname,
                            const TaskSpace& x, const TaskSpace& y,
                            const CorrelateOptions& opts) {
    try {
        Correlation c = correlate_spaces(x, y, opts);
        return xname + "," + yname + "," + format_double(c.r) + "," + format_double(c.abs_r) +
               "," + format_double(c.p_perm) + "," + std::to_string(c.n_entries) + "\n";
    } catch (const Error& e) {
        log_warn("analyze: correlation " + xname + " vs " + yname + " undefined: " + e.what());
        return xname + "," + yname + ",,,,0\n";
    }
}

}  // namespace

int cmd_analyze(const RunConfig& config) {
    config.validate();
    StageTimer timer;
    TaskSuite suite = load_suite(config);

    const std::vector<std::int64_t> epochs = probed_epochs(config);
    if (epochs.empty())
        fail(Errc::missing_artifact, "no probe artifacts under " + config.out_dir + "/probe");
    const std::int64_t final_epoch = epochs.back();

    const std::string tts_path =
        (fs::path(probe_dir(config, final_epoch)) / "tts.csv").string();
    const bool have_tts = fs::exists(tts_path);

    TaskGradients final_grads = load_gradients(config, suite, final_epoch);
    bool any_grads = false;
    for (const auto& d : final_grads.diffs) any_grads = any_grads || d.has_value();
    if (!any_grads)
        fail(Errc::missing_artifact,
             "no gradient dumps under " + probe_dir(config, final_epoch) + "/grads");

    const std::string dir = analysis_dir(config);
    fs::create_directories((fs::path(dir) / "heatmaps").string());
    std::vector<std::string> artifacts;
    auto emit_csv = [&](const TaskSpace& s, const std::string& name) {
        const std::string path = (fs::path(dir) / (name + ".csv")).string();
        write_space_csv(s, path);
        artifacts.push_back(path);
    };
    auto emit_svg = [&](const TaskSpace& s, HeatmapScale scale, const std::string& name,
                        const std::string& title) {
        const std::string path = (fs::path(dir) / "heatmaps" / (name + ".svg")).string();
        write_svg_heatmap(s, scale, title, path);
        artifacts.push_back(path);
    };

    TaskSpace gts_jsim = jaccard_space(final_grads);
    TaskSpace gts_cs = cosine_space(final_grads);
    TaskSpace gts_jxc = weighted_space(gts_jsim, gts_cs);
    HypothesisSpace hyp = phenomenon_hypothesis(suite);
    TaskSpace nvo = nvo_control(suite);
    TaskSpace wd = wasserstein_control(suite);
    emit_csv(gts_jsim, "gts_jsim");
    emit_csv(gts_cs, "gts_cs");
    emit_csv(gts_jxc, "gts_jxc");
    emit_csv(hyp, "hyp_phenomenon");
    emit_csv(nvo, "nvo");
    emit_csv(wd, "wd");
    emit_svg(gts_jsim, HeatmapScale::sequential, "gts_jsim", "GTS J_sim (epoch " +
                                                                 std::to_string(final_epoch) + ")");
    emit_svg(gts_cs, HeatmapScale::diverging, "gts_cs",
             "GTS cosine (epoch " + std::to_string(final_epoch) + ")");
    emit_svg(gts_jxc, HeatmapScale::diverging, "gts_jxc",
             "GTS J_sim x cosine (epoch " + std::to_string(final_epoch) + ")");
    emit_svg(hyp, HeatmapScale::sequential, "hyp_phenomenon", "Hypothesis: same phenomenon");
    emit_svg(nvo, HeatmapScale::sequential, "nvo", "Normalized vocabulary overlap");
    // WD is a distance; heatmaps show 1 - WD alongside the raw CSV
    TaskSpace wd_sim = wd;
    wd_sim.metric = "wasserstein_similarity";
    for (double& v : wd_sim.cells)
        if (!std::isnan(v)) v = 1.0 - v;
    emit_svg(wd_sim, HeatmapScale::sequential, "wd_sim", "1 - Wasserstein distance");

    CorrelateOptions opts;
    opts.seed = config.seed ^ 0xc0a1e5ce;
    std::string corr = "x,y,r,abs_r,p_perm,n_entries\n";
    if (have_tts) {
        TaskSpace tts = read_space_csv(tts_path, "transfer");
        emit_svg(tts, HeatmapScale::diverging, "tts",
                 "Transfer task space (epoch " + std::to_string(final_epoch) + ")");
        corr += correlation_row("tts", "gts_jsim", tts, gts_jsim, opts);
        corr += correlation_row("tts", "gts_cs", tts, gts_cs, opts);
        corr += correlation_row("tts", "gts_jxc", tts, gts_jxc, opts);
        corr += correlation_row("tts", "nvo", tts, nvo, opts);
        corr += correlation_row("tts", "wd", tts, wd, opts);
        corr += correlation_row("tts", "hyp_phenomenon", tts, hyp, opts);
        WithinPhenomenonStats tstats = within_phenomenon_stats(tts, suite);
        std::string within = "space,phenomenon,mean,stddev,n_cells\n";
        for (const auto& g : tstats.groups)
            within += "tts," + g.phenomenon + "," + format_double(g.mean) + "," +
                      format_double(g.stddev) + "," + std::to_string(g.n_cells) + "\n";
        WithinPhenomenonStats cstats = within_phenomenon_stats(gts_cs, suite);
        for (const auto& g : cstats.groups)
            within += "gts_cs," + g.phenomenon + "," + format_double(g.mean) + "," +
                      format_double(g.stddev) + "," + std::to_string(g.n_cells) + "\n";
        within += "tts,__global_within__," + format_double(tstats.within_mean) + ",,\n";
        within += "tts,__global_across__," + format_double(tstats.across_mean) + ",,\n";
        within += "gts_cs,__global_within__," + format_double(cstats.within_mean) + ",,\n";
        within += "gts_cs,__global_across__," + format_double(cstats.across_mean) + ",,\n";
        const std::string within_path = (fs::path(dir) / "within_phenomenon.csv").string();
        write_text_file(within_path, within);
        artifacts.push_back(within_path);
    } else {
        log_warn("analyze: no tts.csv for final epoch (gradient-only probe); "
                 "TTS correlations skipped");
    }
    corr += correlation_row("gts_cs", "nvo", gts_cs, nvo, opts);
    corr += correlation_row("gts_cs", "wd", gts_cs, wd, opts);
    corr += correlation_row("gts_cs", "hyp_phenomenon", gts_cs, hyp, opts);
    const std::string corr_path = (fs::path(dir) / "correlations.csv").string();
    write_text_file(corr_path, corr);
    artifacts.push_back(corr_path);

    // sparsity diagnostics from the final-epoch dumps
    std::string sparsity = "task,subspace_size,total_params,param_fraction,mass_fraction\n";
    double mean_pf = 0.0, mean_mf = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < final_grads.diffs.size(); ++i) {
        if (!final_grads.diffs[i]) continue;
        const SparseDifferential& sd = *final_grads.diffs[i];
        double l1 = 0.0;
        for (double v : sd.values) l1 += std::abs(v);
        const double pf = static_cast<double>(sd.indices.size()) /
                          static_cast<double>(sd.total_params);
        const double mf = sd.total_l1 > 0.0 ? l1 / sd.total_l1 : 0.0;
        sparsity += final_grads.task_ids[i] + "," + std::to_string(sd.indices.size()) + "," +
                    std::to_string(sd.total_params) + "," + format_double(pf) + "," +
                    format_double(mf) + "\n";
        mean_pf += pf;
        mean_mf += mf;
        ++counted;
    }
    if (counted) {
        sparsity += "__mean__,,," + format_double(mean_pf / static_cast<double>(counted)) + "," +
                    format_double(mean_mf / static_cast<double>(counted)) + "\n";
    }
    const std::string sparsity_path = (fs::path(dir) / "sparsity.csv").string();
    write_text_file(sparsity_path, sparsity);
    artifacts.push_back(sparsity_path);

    // checkpoint series over every probed epoch with gradient dumps
    std::vector<std::pair<std::int64_t, TaskGradients>> per_epoch;
    for (std::int64_t e : epochs) {
        TaskGradients g = load_gradients(config, suite, e);
        bool any = false;
        for (const auto& d : g.diffs) any = any || d.has_value();
        if (any) per_epoch.emplace_back(e, std::move(g));
    }
    std::string series = "epoch,mean_subspace_size,within_jsim,across_jsim,within_cs,across_cs,"
                         "r_phenomenon,r_stability,probed_tasks\n";
    for (const SeriesRecord& r : series_from_gradients(per_epoch, suite)) {
        series += std::to_string(r.epoch) + "," + format_double(r.mean_subspace_size) + "," +
                  format_double(r.within_jsim) + "," + format_double(r.across_jsim) + "," +
                  format_double(r.within_cs) + "," + format_double(r.across_cs) + "," +
                  format_double(r.r_phenomenon) + "," + format_double(r.r_stability) + "," +
                  std::to_string(r.probed_tasks) + "\n";
    }
    const std::string series_path = (fs::path(dir) / "series.csv").string();
    write_text_file(series_path, series);
    artifacts.push_back(series_path);

    write_stage_manifest(config, "analyze", artifacts, timer.elapsed_ms());
    return kExitOk;
}

int cmd_report(const RunConfig& config) {
    config.validate();
    StageTimer timer;
    const std::string adir = analysis_dir(config);
    if (!fs::is_directory(adir))
        fail(Errc::missing_artifact, "no analysis artifacts under " + adir + "; run analyze first");

    std::string md = "# Task space report\n\n";
    md += "- tool version: " + std::string(kToolVersion) + "\n";
    md += "- config hash: " + hex_u64(config.hash()) + "\n";
    md += "- seed: " + hex_u64(config.seed) + "\n\n";

    const std::string corr_path = (fs::path(adir) / "correlations.csv").string();
    if (!fs::exists(corr_path)) fail(Errc::missing_artifact, "missing " + corr_path);
    md += "## Space correlations\n\n";
    md += "x | y | r | abs r | permutation p | entries\n";
    md += "--- | --- | --- | --- | --- | ---\n";
    {
        const std::string text = read_text_file(corr_path);
        bool first = true;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= text.size(); ++i) {
            if (i == text.size() || text[i] == '\n') {
                if (i > start && !first) {
                    std::string line = text.substr(start, i - start);
                    for (char& ch : line)
                        if (ch == ',') ch = '|';
                    md += line + "\n";
                }
                first = false;
                start = i + 1;
            }
        }
    }

    md += "\n## Subspace sparsity\n\n";
    const std::string sparsity_path = (fs::path(adir) / "sparsity.csv").string();
    if (fs::exists(sparsity_path)) {
        md += "At epsilon = " + format_double(config.probe.epsilon) +
              ". Reference values reported at research scale: roughly 5% of parameters carrying "
              "81% of the gradient mass; desk-scale runs differ and the numbers below are "
              "measured, not asserted against that reference.\n\n";
        md += "task | subspace | total | param fraction | mass fraction\n";
        md += "--- | --- | --- | --- | ---\n";
        const std::string text = read_text_file(sparsity_path);
        bool first = true;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= text.size(); ++i) {
            if (i == text.size() || text[i] == '\n') {
                if (i > start && !first) {
                    std::string line = text.substr(start, i - start);
                    for (char& ch : line)
                        if (ch == ',') ch = '|';
                    md += line + "\n";
                }
                first = false;
                start = i + 1;
            }
        }
    }

    md += "\n## Checkpoint series\n\nSee `analysis/series.csv`.\n";
    md += "\n## Heatmaps\n\n";
    const fs::path hm = fs::path(adir) / "heatmaps";
    if (fs::is_directory(hm)) {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(hm))
            names.push_back(entry.path().filename().string());
        std::sort(names.begin(), names.end());
        for (const auto& name : names) md += "- `analysis/heatmaps/" + name + "`\n";
    }

    fs::create_directories(report_dir(config));
    const std::string report_path = (fs::path(report_dir(config)) / "report.md").string();
    write_text_file(report_path, md);
    write_stage_manifest(config, "report", {report_path}, timer.elapsed_ms());
    return kExitOk;
}

}  // namespace taskspace
