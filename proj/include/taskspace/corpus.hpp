#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taskspace/types.hpp"

namespace taskspace {

/// Closed word-level vocabulary. Ids 0..2 are reserved specials; words are
/// stored sorted, so the id map is a pure function of the word set.
struct Vocab {
    std::vector<std::string> tokens;  // index == id, includes specials

    static Vocab build(std::vector<std::string> words);
    static Vocab from_token_list(std::vector<std::string> tokens_with_specials);

    std::size_t size() const { return tokens.size(); }
    std::int32_t id(const std::string& word) const;  // kUnkId when absent

    /// Whitespace tokenization; unknown words map to UNK. unk_count, when
    /// given, is incremented per unknown word.
    TokenSeq tokenize(const std::string& text, std::size_t* unk_count = nullptr) const;
    std::string detokenize(const TokenSeq& ids) const;
};

struct MinimalPair {
    TokenSeq good;
    TokenSeq bad;
};

/// A paradigm is one task: a set of minimal pairs with an 85/15 split.
struct Paradigm {
    std::string id;          // UID
    std::string phenomenon;  // linguistics_term
    std::vector<MinimalPair> pairs;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> eval_idx;

    std::vector<TokenPair> train_pairs() const;
    std::vector<TokenPair> eval_pairs() const;
    std::vector<TokenSeq> train_good() const;
    std::vector<TokenSeq> train_bad() const;
};

struct SuiteSpec {
    int phenomena = 4;
    int paradigms_per = 3;
    int pairs_per = 1000;
};

struct TaskSuite {
    Vocab vocab;
    std::vector<Paradigm> paradigms;  // defines task order
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 0;
    bool synthetic = false;
    SuiteSpec spec;

    std::vector<std::string> task_ids() const;
    std::vector<std::string> phenomena() const;  // unique, in task order
    const Paradigm& find(const std::string& id) const;

    /// Pure function of content (vocab, pairs, splits); identical suites
    /// hash identically across runs.
    std::uint64_t hash() const;
};

/// Deterministic synthetic suite. The phenomenon inventory is fixed:
/// subject-verb agreement, determiner-noun agreement, NPI licensing,
/// reflexive binding; each phenomenon's paradigms realize the same rule in
/// distinct surface templates. Errors with the paradigm name when a template
/// cannot produce the requested number of distinct pairs.
TaskSuite generate_suite(std::uint64_t seed, const SuiteSpec& spec);

struct PretrainCorpus {
    std::vector<TokenSeq> train;
    std::vector<TokenSeq> valid;  // held out for perplexity tracking
};

/// Grammatical sentences only: good sides of the suite's train pairs mixed
/// with filler templates that exercise none of the probed rules.
/// filler_fraction sets the filler share of the mixture (synthetic suites).
PretrainCorpus make_pretrain_corpus(const TaskSuite& suite, std::uint64_t seed,
                                    std::size_t n_sentences, double valid_fraction = 0.1,
                                    double filler_fraction = 0.5);

/// Reads a directory of line-delimited records with fields sentence_good,
/// sentence_bad, UID, linguistics_term (one file per paradigm, *.jsonl).
/// A manifest.json written by export_suite is honored for vocabulary and
/// split seed; without one, a fixed default split seed applies.
/// max_tokens > 0 truncates over-long sentences with a logged warning.
TaskSuite ingest_blimp(const std::string& dir, std::size_t max_tokens = 0);

/// Inverse of ingest_blimp: records in the same schema plus manifest.json.
void export_suite(const TaskSuite& suite, const std::string& dir);

/// Normalized token frequency over the global vocabulary, counted over
/// good+bad sentences of the paradigm's train split.
std::vector<double> vocab_distribution(const TaskSuite& suite, const Paradigm& paradigm);

}  // namespace taskspace
