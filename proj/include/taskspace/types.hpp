#pragma once

#include <cstdint>
#include <vector>

namespace taskspace {

using TokenSeq = std::vector<std::int32_t>;

/// One minimal pair, already tokenized.
struct TokenPair {
    TokenSeq good;
    TokenSeq bad;
};

/// Every vocabulary built by this toolkit reserves the same special ids.
inline constexpr std::int32_t kUnkId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kNumSpecialTokens = 3;

}  // namespace taskspace
