#include <cstring>

#include <nlohmann/json.hpp>

#include "taskspace/binio.hpp"
#include "taskspace/common.hpp"
#include "taskspace/model.hpp"

// Checkpoint file layout (all integers little-endian):
//   magic "TSLMCKPT" | u32 version | u64 header_len | header JSON |
//   per-parameter records (u32 name_len, name, u32 ndim, u64 dims..., f64 data) |
//   [adam m values, adam v values as raw f64 arrays] | u32 crc32 trailer.
// The header JSON is canonical (sorted keys, no whitespace) so identical
// states serialize to identical bytes.

namespace taskspace {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'T', 'S', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path) {
    const bool with_params = !ckpt.params.empty();
    // moment vectors are lazily allocated; an empty AdamState is fresh state
    const bool with_adam = with_params && ckpt.adam.has_value() && !ckpt.adam->m.empty();
    if (with_params && ckpt.params.size() != static_cast<std::size_t>(param_count(ckpt.config)))
        fail(Errc::shape_mismatch, "save_checkpoint: param vector does not match config");
    if (with_adam &&
        (ckpt.adam->m.size() != ckpt.params.size() || ckpt.adam->v.size() != ckpt.params.size()))
        fail(Errc::shape_mismatch, "save_checkpoint: Adam state does not match params");

    json header;
    header["adam_included"] = with_adam;
    header["adam_t"] = with_adam ? ckpt.adam->t : 0;
    header["config"] = json::parse(ckpt.config.canonical_json());
    header["epoch"] = ckpt.epoch;
    header["init_seed"] = hex_u64(ckpt.init_seed);
    header["params_included"] = with_params;
    header["rng"] = ckpt.rng_state;
    const std::string header_text = header.dump();

    BinWriter w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.u64(header_text.size());
    w.raw(header_text.data(), header_text.size());
    if (with_params) {
        const ParamLayout layout = ParamLayout::build(ckpt.config);
        for (const auto& e : layout.entries) {
            w.u32(static_cast<std::uint32_t>(e.name.size()));
            w.raw(e.name.data(), e.name.size());
            w.u32(static_cast<std::uint32_t>(e.shape.size()));
            for (std::size_t dim : e.shape) w.u64(dim);
            w.doubles(std::span<const double>(ckpt.params).subspan(e.offset, e.size));
        }
        if (with_adam) {
            w.doubles(ckpt.adam->m);
            w.doubles(ckpt.adam->v);
        }
    }
    w.u32(crc32(w.bytes()));
    write_binary_file(path, w.bytes());
}

LmCheckpoint load_checkpoint(const std::string& path) {
    const std::vector<std::byte> bytes = read_binary_file(path);
    BinReader r(bytes);

    const std::string magic = r.bytes_str(sizeof kMagic);
    if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0)
        fail(Errc::ckpt_version_mismatch, "not a checkpoint file (bad magic): " + path);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        fail(Errc::ckpt_version_mismatch,
             "unsupported checkpoint version " + std::to_string(version));

    const std::uint64_t header_len = r.u64();
    json header;
    try {
        header = json::parse(r.bytes_str(header_len));
    } catch (const json::exception& e) {
        fail(Errc::ckpt_truncated, std::string("checkpoint header unreadable: ") + e.what());
    }

    LmCheckpoint ckpt;
    ckpt.config = LmConfig::from_json_text(header.at("config").dump());
    ckpt.epoch = header.at("epoch").get<std::int64_t>();
    ckpt.init_seed = std::stoull(header.at("init_seed").get<std::string>(), nullptr, 16);
    ckpt.rng_state = header.at("rng").get<std::string>();
    const bool with_params = header.at("params_included").get<bool>();
    const bool with_adam = header.at("adam_included").get<bool>();

    if (with_params) {
        const ParamLayout layout = ParamLayout::build(ckpt.config);
        ckpt.params.assign(layout.total, 0.0);
        for (const auto& e : layout.entries) {
            const std::string name = r.str();
            if (name != e.name)
                fail(Errc::ckpt_truncated,
                     "checkpoint record order mismatch: expected " + e.name + ", got " + name);
            const std::uint32_t ndim = r.u32();
            if (ndim != e.shape.size())
                fail(Errc::ckpt_truncated, "checkpoint record rank mismatch for " + name);
            for (std::size_t dim : e.shape)
                if (r.u64() != dim)
                    fail(Errc::ckpt_truncated, "checkpoint record shape mismatch for " + name);
            for (std::size_t i = 0; i < e.size; ++i) ckpt.params[e.offset + i] = r.f64();
        }
        if (with_adam) {
            AdamState adam;
            adam.t = header.at("adam_t").get<std::int64_t>();
            adam.m.resize(layout.total);
            adam.v.resize(layout.total);
            for (double& v : adam.m) v = r.f64();
            for (double& v : adam.v) v = r.f64();
            ckpt.adam = std::move(adam);
        }
    }

    if (r.remaining() != 4)
        fail(r.remaining() < 4 ? Errc::ckpt_truncated : Errc::ckpt_checksum,
             "checkpoint trailer has unexpected size");
    const std::uint32_t stored = r.u32();
    const std::uint32_t computed =
        crc32(std::span<const std::byte>(bytes.data(), bytes.size() - 4));
    if (stored != computed) fail(Errc::ckpt_checksum, "checkpoint checksum mismatch: " + path);

    if (!with_params) {
        // config-only file: fresh initialization from the recorded seed
        ckpt.params = init_params(ckpt.config, ckpt.init_seed);
    }
    return ckpt;
}

}  // namespace taskspace
