#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "taskspace/common.hpp"
#include "taskspace/corpus.hpp"

namespace taskspace {

namespace detail {
void apply_suite_splits(TaskSuite& suite, std::uint64_t split_seed);
std::uint64_t default_split_seed();
}  // namespace detail

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct RawRecord {
    std::string uid;
    std::string term;
    std::string good;
    std::string bad;
};

std::string require_field(const json& j, const char* field, const std::string& where) {
    if (!j.contains(field) || !j[field].is_string())
        fail(Errc::record_missing_field, where + ": missing field " + field);
    return j[field].get<std::string>();
}

}  // namespace

TaskSuite ingest_blimp(const std::string& dir, std::size_t max_tokens) {
    if (!fs::is_directory(dir)) fail(Errc::io_error, "ingest: not a directory: " + dir);

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(Errc::empty_input, "ingest: no .jsonl record files in " + dir);

    // ordered paradigms; UID collisions across files are an error
    std::vector<std::string> uid_order;
    std::map<std::string, std::vector<RawRecord>> by_uid;
    std::map<std::string, std::string> term_of;
    std::map<std::string, std::string> file_of;

    for (const fs::path& path : files) {
        std::ifstream in(path);
        if (!in) fail(Errc::io_error, "ingest: cannot open " + path.string());
        std::string line;
        std::size_t line_no = 0;
        std::set<std::string> uids_here;
        bool any = false;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            any = true;
            const std::string where = path.filename().string() + ":" + std::to_string(line_no);
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                fail(Errc::record_malformed, where + ": malformed record: " + e.what());
            }
            RawRecord rec;
            rec.uid = require_field(j, "UID", where);
            rec.term = require_field(j, "linguistics_term", where);
            rec.good = require_field(j, "sentence_good", where);
            rec.bad = require_field(j, "sentence_bad", where);

            auto known = file_of.find(rec.uid);
            if (known != file_of.end() && known->second != path.string())
                fail(Errc::duplicate_uid, "ingest: UID " + rec.uid + " appears in both " +
                                              known->second + " and " + path.string());
            if (term_of.count(rec.uid) && term_of[rec.uid] != rec.term)
                fail(Errc::duplicate_uid,
                     "ingest: UID " + rec.uid + " has conflicting linguistics_term values");
            if (!by_uid.count(rec.uid)) uid_order.push_back(rec.uid);
            file_of[rec.uid] = path.string();
            term_of[rec.uid] = rec.term;
            uids_here.insert(rec.uid);
            by_uid[rec.uid].push_back(std::move(rec));
        }
        if (!any) fail(Errc::empty_input, "ingest: empty record file " + path.string());
    }

    TaskSuite suite;
    std::uint64_t split_seed = detail::default_split_seed();
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    if (fs::exists(manifest_path)) {
        json m = json::parse(read_text_file(manifest_path.string()));
        if (m.contains("vocabulary"))
            suite.vocab = Vocab::from_token_list(m["vocabulary"].get<std::vector<std::string>>());
        if (m.contains("split_seed"))
            split_seed = std::stoull(m["split_seed"].get<std::string>(), nullptr, 16);
        if (m.contains("generator_seed"))
            suite.seed = std::stoull(m["generator_seed"].get<std::string>(), nullptr, 16);
        if (m.contains("synthetic")) suite.synthetic = m["synthetic"].get<bool>();
        if (m.contains("spec")) {
            suite.spec.phenomena = m["spec"].value("phenomena", suite.spec.phenomena);
            suite.spec.paradigms_per = m["spec"].value("paradigms_per", suite.spec.paradigms_per);
            suite.spec.pairs_per = m["spec"].value("pairs_per", suite.spec.pairs_per);
        }
        if (m.contains("task_order")) {
            // restore the exporting suite's task order (files sort by name)
            const auto order = m["task_order"].get<std::vector<std::string>>();
            std::vector<std::string> reordered;
            for (const std::string& uid : order)
                if (by_uid.count(uid)) reordered.push_back(uid);
            for (const std::string& uid : uid_order)
                if (std::find(reordered.begin(), reordered.end(), uid) == reordered.end())
                    reordered.push_back(uid);
            uid_order = std::move(reordered);
        }
    }

    if (suite.vocab.size() == 0) {
        std::vector<std::string> words;
        for (const auto& [uid, recs] : by_uid) {
            for (const RawRecord& r : recs) {
                for (const std::string* text : {&r.good, &r.bad}) {
                    std::istringstream ss(*text);
                    std::string w;
                    while (ss >> w) words.push_back(w);
                }
            }
        }
        suite.vocab = Vocab::build(std::move(words));
    }

    std::size_t unk_count = 0;
    std::size_t truncated = 0;
    auto to_ids = [&](const std::string& text) {
        TokenSeq ids = suite.vocab.tokenize(text, &unk_count);
        if (max_tokens > 0 && ids.size() > max_tokens) {
            ids.resize(max_tokens);
            ++truncated;
        }
        return ids;
    };

    for (const std::string& uid : uid_order) {
        Paradigm par;
        par.id = uid;
        par.phenomenon = term_of[uid];
        for (const RawRecord& r : by_uid[uid])
            par.pairs.push_back({to_ids(r.good), to_ids(r.bad)});
        suite.paradigms.push_back(std::move(par));
    }
    if (unk_count > 0)
        log_warn("ingest: " + std::to_string(unk_count) + " unknown words mapped to <unk>");
    if (truncated > 0)
        log_warn("ingest: " + std::to_string(truncated) + " sentences truncated to " +
                 std::to_string(max_tokens) + " tokens");

    detail::apply_suite_splits(suite, split_seed);
    return suite;
}

void export_suite(const TaskSuite& suite, const std::string& dir) {
    fs::create_directories(dir);
    for (const Paradigm& par : suite.paradigms) {
        std::string out;
        for (const MinimalPair& pair : par.pairs) {
            json j;
            j["UID"] = par.id;
            j["linguistics_term"] = par.phenomenon;
            j["sentence_bad"] = suite.vocab.detokenize(pair.bad);
            j["sentence_good"] = suite.vocab.detokenize(pair.good);
            out += j.dump();
            out += '\n';
        }
        write_text_file((fs::path(dir) / (par.id + ".jsonl")).string(), out);
    }
    json manifest;
    manifest["format"] = "taskspace-suite";
    manifest["generator_seed"] = hex_u64(suite.seed);
    manifest["spec"] = {{"phenomena", suite.spec.phenomena},
                        {"paradigms_per", suite.spec.paradigms_per},
                        {"pairs_per", suite.spec.pairs_per}};
    manifest["split_seed"] = hex_u64(suite.split_seed);
    manifest["synthetic"] = suite.synthetic;
    manifest["task_order"] = suite.task_ids();
    manifest["vocabulary"] = suite.vocab.tokens;
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace taskspace
