#pragma once

// Small helpers shared by the structured-text file formats.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ecomrtl::text {

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double value);

/// Strict parse of the whole token; returns false on trailing garbage.
bool parse_double(std::string_view token, double& out);
bool parse_int(std::string_view token, long long& out);
bool parse_u64(std::string_view token, std::uint64_t& out);

std::string_view trim(std::string_view s);
std::vector<std::string_view> split(std::string_view s, char sep);
std::vector<std::string_view> split_whitespace(std::string_view s);

/// 64-bit FNV-1a, printed as 16 hex digits by hex64().
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace ecomrtl::text
