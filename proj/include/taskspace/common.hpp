#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace taskspace {

/// Stable error identities; tests match on these rather than message text.
enum class Errc {
    shape_mismatch,
    invalid_argument,
    non_finite,
    non_scalar_loss,
    token_out_of_range,
    empty_input,
    empty_subspace,
    all_zero_differential,
    ordering_mismatch,
    template_exhaustion,
    empty_eval_split,
    record_missing_field,
    record_malformed,
    duplicate_uid,
    ckpt_version_mismatch,
    ckpt_truncated,
    ckpt_checksum,
    architecture_mismatch,
    insufficient_data,
    training_diverged,
    io_error,
    config_error,
    missing_artifact,
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

/// FNV-1a, used for config/checkpoint identity hashes and seed derivation.
constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::span<const double> values);

/// CRC-32 (IEEE), used as the checkpoint file trailer.
std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t crc = 0);

/// Shortest round-trip decimal form; identical across runs, so CSV/SVG
/// artifacts are byte-stable.
std::string format_double(double v);

std::string hex_u64(std::uint64_t v);

// ---- logging ------------------------------------------------------------
// TASKSPACE_LOG=debug|info|warn|quiet (default warn).

enum class LogLevel { debug = 0, info = 1, warn = 2, quiet = 3 };

LogLevel log_level();
void log_line(LogLevel lvl, std::string_view msg);
inline void log_debug(std::string_view msg) { log_line(LogLevel::debug, msg); }
inline void log_info(std::string_view msg) { log_line(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log_line(LogLevel::warn, msg); }

// ---- small file helpers --------------------------------------------------

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);
std::vector<std::byte> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, std::span<const std::byte> bytes);

}  // namespace taskspace
