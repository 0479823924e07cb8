#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace advscale {

// Flat `key = value` text with dotted section keys:
//
//   # comment
//   seed = 7
//   train.epochs = 10
//   attack.families = fgsm_linf, step_ll
//
// Values may be wrapped in double quotes. Lists are comma separated.
// Getters throw ConfigError naming the key on malformed values.
class Config {
 public:
  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, std::string value);
  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

  std::optional<std::string> get_string(const std::string& key) const;
  std::optional<double> get_double(const std::string& key) const;
  std::optional<std::uint64_t> get_uint(const std::string& key) const;
  std::optional<bool> get_bool(const std::string& key) const;
  std::optional<std::vector<double>> get_doubles(const std::string& key) const;
  std::optional<std::vector<std::string>> get_strings(const std::string& key) const;

  // Throws ConfigError on the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  // Sorted `key = value` lines; stable input for hashing.
  std::string canonical() const;
  // Nested JSON object, one level per dotted component. Numbers, booleans and
  // numeric lists are typed.
  std::string to_json() const;

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace advscale
