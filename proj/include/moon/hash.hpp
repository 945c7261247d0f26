#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace moon {

/// 64-bit FNV-1a; stable across platforms and runs.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);

}  // namespace moon
