#include "taskspace/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

#include "taskspace/common.hpp"
#include "taskspace/rng.hpp"

namespace taskspace {

// ---- vocabulary -----------------------------------------------------------

Vocab Vocab::build(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    Vocab v;
    v.tokens = {"<unk>", "<bos>", "<eos>"};
    v.tokens.insert(v.tokens.end(), words.begin(), words.end());
    return v;
}

Vocab Vocab::from_token_list(std::vector<std::string> tokens_with_specials) {
    if (tokens_with_specials.size() < static_cast<std::size_t>(kNumSpecialTokens) ||
        tokens_with_specials[0] != "<unk>" || tokens_with_specials[1] != "<bos>" ||
        tokens_with_specials[2] != "<eos>")
        fail(Errc::invalid_argument, "Vocab: token list must start with the reserved specials");
    Vocab v;
    v.tokens = std::move(tokens_with_specials);
    return v;
}

std::int32_t Vocab::id(const std::string& word) const {
    auto begin = tokens.begin() + kNumSpecialTokens;
    auto it = std::lower_bound(begin, tokens.end(), word);
    if (it != tokens.end() && *it == word)
        return static_cast<std::int32_t>(it - tokens.begin());
    return kUnkId;
}

TokenSeq Vocab::tokenize(const std::string& text, std::size_t* unk_count) const {
    TokenSeq ids;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') ++i;
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ') ++j;
        if (j > i) {
            std::int32_t tok = id(text.substr(i, j - i));
            if (tok == kUnkId && unk_count) ++*unk_count;
            ids.push_back(tok);
        }
        i = j;
    }
    return ids;
}

std::string Vocab::detokenize(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto id = static_cast<std::size_t>(ids[i]);
        if (ids[i] < 0 || id >= tokens.size())
            fail(Errc::token_out_of_range, "detokenize: id " + std::to_string(ids[i]));
        if (i) out += ' ';
        out += tokens[id];
    }
    return out;
}

// ---- suite access ----------------------------------------------------------

namespace {

std::vector<TokenPair> select_pairs(const Paradigm& p, const std::vector<std::size_t>& idx) {
    std::vector<TokenPair> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back({p.pairs[i].good, p.pairs[i].bad});
    return out;
}

}  // namespace

std::vector<TokenPair> Paradigm::train_pairs() const { return select_pairs(*this, train_idx); }
std::vector<TokenPair> Paradigm::eval_pairs() const { return select_pairs(*this, eval_idx); }

std::vector<TokenSeq> Paradigm::train_good() const {
    std::vector<TokenSeq> out;
    out.reserve(train_idx.size());
    for (std::size_t i : train_idx) out.push_back(pairs[i].good);
    return out;
}

std::vector<TokenSeq> Paradigm::train_bad() const {
    std::vector<TokenSeq> out;
    out.reserve(train_idx.size());
    for (std::size_t i : train_idx) out.push_back(pairs[i].bad);
    return out;
}

std::vector<std::string> TaskSuite::task_ids() const {
    std::vector<std::string> ids;
    ids.reserve(paradigms.size());
    for (const auto& p : paradigms) ids.push_back(p.id);
    return ids;
}

std::vector<std::string> TaskSuite::phenomena() const {
    std::vector<std::string> out;
    for (const auto& p : paradigms)
        if (std::find(out.begin(), out.end(), p.phenomenon) == out.end())
            out.push_back(p.phenomenon);
    return out;
}

const Paradigm& TaskSuite::find(const std::string& id) const {
    for (const auto& p : paradigms)
        if (p.id == id) return p;
    fail(Errc::invalid_argument, "TaskSuite: no paradigm named " + id);
}

std::uint64_t TaskSuite::hash() const {
    std::uint64_t h = fnv1a64("taskspace-suite");
    for (const auto& t : vocab.tokens) h = fnv1a64(t, fnv1a64("\x1f", h));
    for (const auto& p : paradigms) {
        h = fnv1a64(p.id, h);
        h = fnv1a64(p.phenomenon, h);
        for (const auto& pair : p.pairs) {
            h = fnv1a64(std::as_bytes(std::span<const std::int32_t>(pair.good)), h);
            h = fnv1a64(std::as_bytes(std::span<const std::int32_t>(pair.bad)), h);
        }
        h = fnv1a64(std::as_bytes(std::span<const std::size_t>(p.train_idx)), h);
        h = fnv1a64(std::as_bytes(std::span<const std::size_t>(p.eval_idx)), h);
    }
    return h;
}

// ---- synthetic grammar -----------------------------------------------------

namespace grammar {

using Words = std::vector<std::string>;

struct Pools {
    Words animal_sg{"cat", "dog", "bird", "horse", "rabbit", "pig"};
    Words animal_pl{"cats", "dogs", "birds", "horses", "rabbits", "pigs"};
    Words person_sg{"teacher", "doctor", "pilot", "farmer", "student", "painter"};
    Words person_pl{"teachers", "doctors", "pilots", "farmers", "students", "painters"};
    Words iv_sg{"sleeps", "runs", "smiles", "waits", "sings", "jumps"};
    Words iv_pl{"sleep", "run", "smile", "wait", "sing", "jump"};
    Words iv_past{"slept", "ran", "smiled", "waited", "sang", "jumped"};
    Words iv_part{"slept", "run", "smiled", "waited", "sung", "jumped"};
    Words tv_sg{"sees", "likes", "hears", "knows"};
    Words tv_pl{"see", "like", "hear", "know"};
    Words tv_past{"saw", "liked", "heard", "knew"};
    Words dem_sg{"this", "that"};
    Words dem_pl{"these", "those"};
    Words adjs{"small", "big", "old", "young", "happy", "quiet"};
    Words preps{"near", "behind", "beside"};
    Words places{"barn", "garden", "house", "river"};
    Words end_advs{"today", "now", "again", "quietly"};
    Words aux_advs{"not", "really", "often"};
    Words bad_advs{"really", "often"};
    Words aux{"has", "have"};
    Words refl{"itself", "themselves"};
};

const Pools& pools() {
    static const Pools p;
    return p;
}

/// Decodes a combination index into successive slot choices (mixed radix).
struct Combo {
    std::size_t rest;
    std::size_t take(std::size_t n) {
        std::size_t r = rest % n;
        rest /= n;
        return r;
    }
};

// 12-lemma noun pool: animals then persons, by number.
const std::string& noun12(std::size_t lemma, std::size_t num) {
    const Pools& p = pools();
    if (lemma < 6) return num == 0 ? p.animal_sg[lemma] : p.animal_pl[lemma];
    return num == 0 ? p.person_sg[lemma - 6] : p.person_pl[lemma - 6];
}

const std::string& animal(std::size_t lemma, std::size_t num) {
    return num == 0 ? pools().animal_sg[lemma] : pools().animal_pl[lemma];
}
const std::string& person(std::size_t lemma, std::size_t num) {
    return num == 0 ? pools().person_sg[lemma] : pools().person_pl[lemma];
}
const std::string& iv(std::size_t lemma, std::size_t num) {
    return num == 0 ? pools().iv_sg[lemma] : pools().iv_pl[lemma];
}
const std::string& tv(std::size_t lemma, std::size_t num) {
    return num == 0 ? pools().tv_sg[lemma] : pools().tv_pl[lemma];
}
const std::string& dem(std::size_t type, std::size_t num) {
    return num == 0 ? pools().dem_sg[type] : pools().dem_pl[type];
}

struct PairTemplate {
    std::string uid;
    std::string phenomenon;
    std::size_t combos;
    std::function<std::pair<Words, Words>(std::size_t)> realize;
};

const char* kSva = "subject_verb_agreement";
const char* kDna = "determiner_noun_agreement";
const char* kNpi = "npi_licensing";
const char* kBind = "reflexive_binding";

std::vector<PairTemplate> pair_templates() {
    const Pools& p = pools();
    std::vector<PairTemplate> out;

    out.push_back({"sva_simple", kSva, 6 * 6 * 2 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto a = c.take(6), n = c.take(6), m = c.take(2), v = c.take(6),
                            e = c.take(4);
                       Words good{"the", p.adjs[a], animal(n, m), iv(v, m), p.end_advs[e]};
                       Words bad{"the", p.adjs[a], animal(n, m), iv(v, 1 - m), p.end_advs[e]};
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"sva_pp_distractor", kSva, 6 * 2 * 3 * 6 * 6, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n1 = c.take(6), m = c.take(2), pr = c.take(3), n2 = c.take(6),
                            v = c.take(6);
                       Words good{"the",     animal(n1, m),      p.preps[pr],
                                  "the",     person(n2, 1 - m),  iv(v, m)};
                       Words bad = good;
                       bad[5] = iv(v, 1 - m);
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"sva_transitive", kSva, 6 * 2 * 4 * 6 * 6 * 2, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto s = c.take(6), m = c.take(2), t = c.take(4), a = c.take(6),
                            o = c.take(6), om = c.take(2);
                       Words good{"the",      person(s, m), tv(t, m),
                                  "the",      p.adjs[a],    animal(o, om)};
                       Words bad = good;
                       bad[2] = tv(t, 1 - m);
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"dna_subject", kDna, 2 * 2 * 6 * 4 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto dt = c.take(2), m = c.take(2), n = c.take(6), t = c.take(4),
                            a = c.take(6), pl = c.take(4);
                       Words good{dem(dt, m), animal(n, m), p.tv_past[t],
                                  "the",      p.adjs[a],    p.places[pl]};
                       Words bad = good;
                       bad[0] = dem(dt, 1 - m);
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"dna_object", kDna, 6 * 2 * 4 * 2 * 2 * 6, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto s = c.take(6), sm = c.take(2), t = c.take(4), dt = c.take(2),
                            om = c.take(2), o = c.take(6);
                       Words good{"the", person(s, sm), p.tv_past[t], dem(dt, om), animal(o, om)};
                       Words bad = good;
                       bad[3] = dem(dt, 1 - om);
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"dna_adjective", kDna, 2 * 2 * 6 * 6 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto dt = c.take(2), m = c.take(2), a = c.take(6), n = c.take(6),
                            v = c.take(6), e = c.take(4);
                       Words good{dem(dt, m), p.adjs[a], animal(n, m), p.iv_past[v],
                                  p.end_advs[e]};
                       Words bad = good;
                       bad[0] = dem(dt, 1 - m);
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"npi_negation", kNpi, 12 * 2 * 6 * 6 * 4 * 2, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), a = c.take(6), pt = c.take(6),
                            e = c.take(4), b = c.take(2);
                       Words good{"the",    p.adjs[a],    noun12(n, m),  p.aux[m],
                                  "not",    "ever",       p.iv_part[pt], p.end_advs[e]};
                       Words bad = good;
                       bad[4] = p.bad_advs[b];
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"npi_quantifier", kNpi, 12 * 2 * 6 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), a = c.take(6), pt = c.take(6),
                            e = c.take(4);
                       Words good{"no",   p.adjs[a],     noun12(n, m), p.aux[m],
                                  "ever", p.iv_part[pt], p.end_advs[e]};
                       Words bad = good;
                       bad[0] = "the";
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"bind_simple", kBind, 6 * 6 * 2 * 4 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto a = c.take(6), n = c.take(6), m = c.take(2), t = c.take(4),
                            e = c.take(4);
                       Words good{"the",     p.adjs[a], animal(n, m),
                                  tv(t, m),  p.refl[m], p.end_advs[e]};
                       Words bad = good;
                       bad[4] = p.refl[1 - m];
                       return std::make_pair(good, bad);
                   }});

    out.push_back({"bind_distractor", kBind, 6 * 2 * 3 * 6 * 4 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n1 = c.take(6), m = c.take(2), pr = c.take(3), n2 = c.take(6),
                            t = c.take(4), e = c.take(4);
                       Words good{"the",     animal(n1, m), p.preps[pr],
                                  "the",     person(n2, 1 - m), tv(t, m),
                                  p.refl[m], p.end_advs[e]};
                       Words bad = good;
                       bad[6] = p.refl[1 - m];
                       return std::make_pair(good, bad);
                   }});

    return out;
}

struct FillerTemplate {
    std::size_t combos;
    std::function<Words(std::size_t)> realize;
};

std::vector<FillerTemplate> filler_templates() {
    const Pools& p = pools();
    std::vector<FillerTemplate> out;
    // past tense / auxiliary frames: none of the probed contrasts applies
    out.push_back({12 * 2 * 6 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), a = c.take(6), v = c.take(6),
                            e = c.take(4);
                       return Words{"the", p.adjs[a], noun12(n, m), p.iv_past[v], p.end_advs[e]};
                   }});
    out.push_back({12 * 2 * 3 * 4 * 6, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), pr = c.take(3), pl = c.take(4),
                            v = c.take(6);
                       return Words{"the", noun12(n, m), p.preps[pr],
                                    "the", p.places[pl], p.iv_past[v]};
                   }});
    out.push_back({12 * 2 * 4 * 6 * 12 * 2, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto s = c.take(12), m = c.take(2), t = c.take(4), a = c.take(6),
                            o = c.take(12), om = c.take(2);
                       return Words{"the",       noun12(s, m), p.tv_past[t],
                                    "the",       p.adjs[a],    noun12(o, om)};
                   }});
    out.push_back({12 * 2 * 4 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), t = c.take(4), pl = c.take(4);
                       return Words{"the", noun12(n, m), p.tv_past[t], "the", p.places[pl]};
                   }});
    out.push_back({12 * 2 * 3 * 6 * 4, [&p](std::size_t ci) {
                       Combo c{ci};
                       auto n = c.take(12), m = c.take(2), x = c.take(3), pt = c.take(6),
                            e = c.take(4);
                       return Words{"the",          noun12(n, m),  p.aux[m],
                                    p.aux_advs[x],  p.iv_part[pt], p.end_advs[e]};
                   }});
    return out;
}

std::vector<std::string> all_words() {
    const Pools& p = pools();
    std::vector<std::string> words;
    for (const Words* pool :
         {&p.animal_sg, &p.animal_pl, &p.person_sg, &p.person_pl, &p.iv_sg, &p.iv_pl, &p.iv_past,
          &p.iv_part, &p.tv_sg, &p.tv_pl, &p.tv_past, &p.dem_sg, &p.dem_pl, &p.adjs, &p.preps,
          &p.places, &p.end_advs, &p.aux_advs, &p.bad_advs, &p.aux, &p.refl})
        words.insert(words.end(), pool->begin(), pool->end());
    for (const char* w : {"the", "no", "ever"}) words.emplace_back(w);
    return words;
}

}  // namespace grammar

namespace {

constexpr std::uint64_t kDefaultSplitSeed = 0x7a5ab85e5eed0001ull;

void apply_splits(TaskSuite& suite, std::uint64_t split_seed) {
    suite.split_seed = split_seed;
    for (Paradigm& par : suite.paradigms) {
        const std::size_t n = par.pairs.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng(split_seed).substream("split:" + par.id).shuffle(idx);
        const auto train_n = static_cast<std::size_t>(std::lround(0.85 * static_cast<double>(n)));
        if (train_n == n)
            fail(Errc::empty_eval_split, "paradigm " + par.id + ": eval split is empty");
        par.train_idx.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(train_n));
        par.eval_idx.assign(idx.begin() + static_cast<std::ptrdiff_t>(train_n), idx.end());
        std::sort(par.train_idx.begin(), par.train_idx.end());
        std::sort(par.eval_idx.begin(), par.eval_idx.end());
    }
}

TokenSeq tokenize_known(const Vocab& vocab, const grammar::Words& words) {
    TokenSeq ids;
    ids.reserve(words.size());
    for (const std::string& w : words) {
        std::int32_t id = vocab.id(w);
        if (id == kUnkId) fail(Errc::invalid_argument, "grammar word missing from vocab: " + w);
        ids.push_back(id);
    }
    return ids;
}

}  // namespace

TaskSuite generate_suite(std::uint64_t seed, const SuiteSpec& spec) {
    if (spec.phenomena < 1 || spec.phenomena > 4)
        fail(Errc::config_error, "generate_suite: phenomena must be in [1,4]");
    if (spec.paradigms_per < 2)
        fail(Errc::config_error, "generate_suite: every phenomenon needs >= 2 paradigms");
    if (spec.pairs_per < 1) fail(Errc::config_error, "generate_suite: pairs_per must be >= 1");

    const std::vector<std::string> phenomenon_order = {
        grammar::kSva, grammar::kDna, grammar::kNpi, grammar::kBind};
    const auto templates = grammar::pair_templates();

    TaskSuite suite;
    suite.seed = seed;
    suite.spec = spec;
    suite.synthetic = true;
    suite.vocab = Vocab::build(grammar::all_words());

    Rng base(seed);
    for (int ph = 0; ph < spec.phenomena; ++ph) {
        int used = 0;
        for (const auto& t : templates) {
            if (t.phenomenon != phenomenon_order[static_cast<std::size_t>(ph)]) continue;
            if (used >= spec.paradigms_per) break;
            ++used;
            if (t.combos < static_cast<std::size_t>(spec.pairs_per))
                fail(Errc::template_exhaustion,
                     "paradigm " + t.uid + ": only " + std::to_string(t.combos) +
                         " distinct pairs available, " + std::to_string(spec.pairs_per) +
                         " requested");
            std::vector<std::size_t> perm(t.combos);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            base.substream("pairs:" + t.uid).shuffle(perm);

            Paradigm par;
            par.id = t.uid;
            par.phenomenon = t.phenomenon;
            par.pairs.reserve(static_cast<std::size_t>(spec.pairs_per));
            for (int i = 0; i < spec.pairs_per; ++i) {
                auto [good, bad] = t.realize(perm[static_cast<std::size_t>(i)]);
                par.pairs.push_back({tokenize_known(suite.vocab, good),
                                     tokenize_known(suite.vocab, bad)});
            }
            suite.paradigms.push_back(std::move(par));
        }
    }
    apply_splits(suite, seed);
    return suite;
}

PretrainCorpus make_pretrain_corpus(const TaskSuite& suite, std::uint64_t seed,
                                    std::size_t n_sentences, double valid_fraction,
                                    double filler_fraction) {
    if (n_sentences < 1) fail(Errc::invalid_argument, "make_pretrain_corpus: n_sentences >= 1");
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0))
        fail(Errc::invalid_argument, "make_pretrain_corpus: valid_fraction must be in [0,1)");
    if (!(filler_fraction >= 0.0 && filler_fraction < 1.0))
        fail(Errc::invalid_argument, "make_pretrain_corpus: filler_fraction must be in [0,1)");
    if (suite.paradigms.empty()) fail(Errc::empty_input, "make_pretrain_corpus: empty suite");

    const auto fillers = grammar::filler_templates();
    const bool use_fillers = suite.synthetic;
    if (!use_fillers)
        log_info("make_pretrain_corpus: ingested suite, sampling good sentences only");

    Rng rng = Rng(seed).substream("pretrain_corpus");
    std::vector<TokenSeq> sentences;
    sentences.reserve(n_sentences);
    for (std::size_t i = 0; i < n_sentences; ++i) {
        if (use_fillers && rng.uniform01() < filler_fraction) {
            const auto& t = fillers[rng.below(fillers.size())];
            sentences.push_back(
                tokenize_known(suite.vocab, t.realize(rng.below(t.combos))));
        } else {
            const Paradigm& par = suite.paradigms[rng.below(suite.paradigms.size())];
            const std::size_t k = rng.below(par.train_idx.size());
            sentences.push_back(par.pairs[par.train_idx[k]].good);
        }
    }
    const auto n_valid =
        static_cast<std::size_t>(std::lround(valid_fraction * static_cast<double>(n_sentences)));
    PretrainCorpus corpus;
    corpus.valid.assign(sentences.end() - static_cast<std::ptrdiff_t>(n_valid), sentences.end());
    sentences.resize(n_sentences - n_valid);
    corpus.train = std::move(sentences);
    if (corpus.train.empty()) fail(Errc::invalid_argument, "make_pretrain_corpus: train slice empty");
    return corpus;
}

std::vector<double> vocab_distribution(const TaskSuite& suite, const Paradigm& paradigm) {
    if (paradigm.train_idx.empty())
        fail(Errc::empty_input, "vocab_distribution: paradigm has no train pairs");
    std::vector<double> counts(suite.vocab.size(), 0.0);
    double total = 0.0;
    for (std::size_t i : paradigm.train_idx) {
        for (const TokenSeq* s : {&paradigm.pairs[i].good, &paradigm.pairs[i].bad}) {
            for (std::int32_t id : *s) {
                counts[static_cast<std::size_t>(id)] += 1.0;
                total += 1.0;
            }
        }
    }
    for (double& c : counts) c /= total;
    return counts;
}

namespace detail {
// shared with blimp.cpp
void apply_suite_splits(TaskSuite& suite, std::uint64_t split_seed) {
    apply_splits(suite, split_seed);
}
std::uint64_t default_split_seed() { return kDefaultSplitSeed; }
}  // namespace detail

}  // namespace taskspace
