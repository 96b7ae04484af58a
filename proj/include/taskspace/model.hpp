#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taskspace/autodiff.hpp"
#include "taskspace/rng.hpp"
#include "taskspace/types.hpp"

namespace taskspace {

struct LmConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 2;
    int d_ffn = 256;
    int vocab_size = 0;
    int context_length = 64;
    double dropout_rate = 0.1;
    bool tie_embeddings = true;

    /// n_layers may be 0 (degenerate depth); all other extents must be >= 1,
    /// d_model divisible by n_heads, dropout in [0,1).
    void validate() const;

    /// Sorted-key, whitespace-free JSON; the checkpoint identity hash and the
    /// on-disk header both use this exact text.
    std::string canonical_json() const;
    static LmConfig from_json_text(const std::string& text);

    bool operator==(const LmConfig&) const = default;
};

/// Exact trainable parameter count implied by the config.
std::int64_t param_count(const LmConfig& config);

/// Canonical flat parameter indexing: parameters ordered by (module path,
/// declaration order), each flattened row-major. The order is embeddings,
/// positions, then per layer (ln1, attention q/k/v/o with biases, ln2, ffn),
/// final norm, and the untied output head last. Stable for a fixed config.
struct ParamLayout {
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
        std::size_t size = 0;
    };
    std::vector<Entry> entries;
    std::size_t total = 0;

    static ParamLayout build(const LmConfig& config);
    const Entry& find(std::string_view name) const;
};

/// Flat per-parameter vector over the canonical indexing (holds gradients,
/// gradient differentials, and parameter values alike).
using GradientVector = std::vector<double>;

/// Deterministic initialization: weights N(0, 0.02), biases 0, norm gains 1,
/// drawn in layout order from the "init" substream of `seed`.
std::vector<double> init_params(const LmConfig& config, std::uint64_t seed);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
};

/// theta <- theta - lr * g. Errors on non-finite gradients.
void sgd_step(std::vector<double>& params, const GradientVector& grads, double lr);

/// Standard bias-corrected Adam (beta1=0.9, beta2=0.999, eps=1e-8).
void adam_step(std::vector<double>& params, const GradientVector& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct LmCheckpoint {
    LmConfig config;
    std::vector<double> params;  // empty => config-only
    std::optional<AdamState> adam;
    std::string rng_state;  // serialized training stream, empty before training
    std::uint64_t init_seed = 0;
    std::int64_t epoch = 0;

    /// Identity over (config, params); used in manifests and dump headers.
    std::uint64_t hash() const;
};

void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path);

/// Errors are distinct: bad magic / unknown version, structural truncation,
/// and checksum mismatch. A config-only file loads as a fresh initialization
/// from the recorded seed.
LmCheckpoint load_checkpoint(const std::string& path);

/// Decoder-only transformer over packed sentence batches. Pre-norm blocks,
/// learned positions, GELU, weight tying per config.
class LmModel {
public:
    explicit LmModel(LmConfig config);

    const LmConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }

    struct Batch {
        std::vector<std::int32_t> inputs;
        std::vector<std::int32_t> positions;
        std::vector<std::int32_t> targets;
        std::vector<std::int32_t> seg_offsets;
        std::size_t tokens() const { return targets.size(); }
    };

    /// Packs sentences for teacher forcing. With append_eos, sentence t0..tn
    /// becomes inputs [BOS,t0..tn] / targets [t0..tn,EOS]; without, inputs
    /// [BOS,t0..tn-1] / targets [t0..tn].
    Batch build_batch(std::span<const TokenSeq> sentences, bool append_eos) const;

    /// Traced cross-entropy loss over the batch. Dropout is applied only when
    /// a dropout rng is supplied (pretraining); evaluation passes none.
    /// `param_vars` (when given) receives the parameter leaves in layout
    /// order, for collect_param_grads after backward.
    GradTape::Var loss(GradTape& tape, const std::vector<double>& params, const Batch& batch,
                       GradTape::Reduction reduction, Rng* dropout_rng,
                       std::vector<GradTape::Var>* param_vars = nullptr) const;

    /// Forward logits [N, vocab] without tracing.
    Tensor forward_logits(const std::vector<double>& params, const Batch& batch) const;

    struct GradAccum {
        GradientVector grad_sum;  // gradient of summed token NLL
        std::size_t tokens = 0;
        double nll_sum = 0.0;
    };

    /// Gradient of summed token-level NLL over all sentences, accumulated in
    /// fixed-size chunks (bounded memory, deterministic order). Divide by
    /// `tokens` for the mean-loss gradient.
    GradAccum accumulate_gradient(const std::vector<double>& params,
                                  std::span<const TokenSeq> sentences, bool append_eos) const;

    /// Total log-probability per sentence (BOS-conditioned, no EOS term).
    std::vector<double> sentence_logprobs(const std::vector<double>& params,
                                          std::span<const TokenSeq> sentences) const;

    /// Mean token NLL (EOS term included) over the sentences.
    double mean_nll(const std::vector<double>& params, std::span<const TokenSeq> sentences) const;

private:
    GradTape::Var forward(GradTape& tape, const std::vector<double>& params, const Batch& batch,
                          Rng* dropout_rng, std::vector<GradTape::Var>* param_vars) const;

    LmConfig config_;
    ParamLayout layout_;
};

/// Collects parameter-leaf gradients into the canonical flat indexing.
/// Entries whose parameters were not touched come back zero.
GradientVector collect_param_grads(const GradTape& tape,
                                   const std::vector<GradTape::Var>& param_vars,
                                   const ParamLayout& layout);

// ---- evaluation -----------------------------------------------------------

struct EvalResult {
    std::string task_id;
    double accuracy = 0.0;
    std::size_t n_pairs = 0;
    std::vector<bool> correct;
};

/// Sum over positions of log P(token_t | tokens_<t). Deterministic; dropout
/// is never active on this path.
double sentence_logprob(const LmCheckpoint& ckpt, const TokenSeq& tokens);

/// Forced choice: a pair is correct iff logprob(good) > logprob(bad).
/// Ties count as incorrect.
EvalResult pair_accuracy(const LmCheckpoint& ckpt, std::span<const TokenPair> pairs,
                         std::string task_id);

/// exp(mean token NLL) over the corpus sentences.
double perplexity(const LmCheckpoint& ckpt, std::span<const TokenSeq> corpus);

// ---- pretraining ------------------------------------------------------------

struct PretrainHyper {
    int batch_size = 16;
    double lr = 1e-3;
    int epochs = 6;
    std::uint64_t seed = 1;
    std::vector<int> checkpoint_epochs;  // 0 = initialization state
};

struct PretrainResult {
    std::vector<LmCheckpoint> checkpoints;
    std::vector<double> step_losses;
    bool diverged = false;
};

/// Adam pretraining over shuffled sentence batches; deterministic given the
/// seed. On divergence (non-finite loss) training aborts and the last good
/// state is appended as a final checkpoint. `resume_from` continues a run
/// bit-exactly from a saved epoch checkpoint.
PretrainResult pretrain(const LmConfig& config, std::span<const TokenSeq> sentences,
                        const PretrainHyper& hyper,
                        const LmCheckpoint* resume_from = nullptr);

}  // namespace taskspace
