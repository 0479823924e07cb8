#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace advscale {

// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);
// Empty string for an absent value.
std::string format_optional(const std::optional<double>& v);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace advscale
