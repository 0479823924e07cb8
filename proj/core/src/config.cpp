#include "advscale/config.hpp"

#include <cctype>
#include <charconv>
#include <sstream>

#include <json.hpp>

#include "advscale/error.hpp"
#include "advscale/io.hpp"

namespace advscale {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string unquote(std::string s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(std::string_view(s).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

bool valid_key(const std::string& key) {
  if (key.empty() || key.front() == '.' || key.back() == '.') return false;
  for (char c : key) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
  }
  return key.find("..") == std::string::npos;
}

}  // namespace

Config Config::parse(std::string_view text) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "line " + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where, "expected `key = value`");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where, "malformed key '" + key + "'");
    if (cfg.has(key)) throw ConfigError(key, "duplicate key (" + where + ")");
    cfg.entries_[key] = unquote(trim(std::string_view(body).substr(eq + 1)));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("", "config file not found: " + path.string());
  return parse(read_text_file(path));
}

void Config::set(const std::string& key, std::string value) {
  if (!valid_key(key)) throw ConfigError(key, "malformed key");
  entries_[key] = std::move(value);
}

std::optional<std::string> Config::get_string(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<double> Config::get_double(const std::string& key) const {
  const auto s = get_string(key);
  if (!s) return std::nullopt;
  const auto v = parse_double(*s);
  if (!v) throw ConfigError(key, "expected a number, got '" + *s + "'");
  return v;
}

std::optional<std::uint64_t> Config::get_uint(const std::string& key) const {
  const auto s = get_string(key);
  if (!s) return std::nullopt;
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
  if (ec != std::errc() || ptr != s->data() + s->size()) {
    throw ConfigError(key, "expected a nonnegative integer, got '" + *s + "'");
  }
  return v;
}

std::optional<bool> Config::get_bool(const std::string& key) const {
  const auto s = get_string(key);
  if (!s) return std::nullopt;
  if (*s == "true" || *s == "1" || *s == "yes" || *s == "on") return true;
  if (*s == "false" || *s == "0" || *s == "no" || *s == "off") return false;
  throw ConfigError(key, "expected a boolean, got '" + *s + "'");
}

std::optional<std::vector<double>> Config::get_doubles(const std::string& key) const {
  const auto s = get_string(key);
  if (!s) return std::nullopt;
  std::vector<double> out;
  for (const auto& item : split_list(*s)) {
    const auto v = parse_double(item);
    if (!v) throw ConfigError(key, "expected a comma-separated list of numbers, got '" + *s + "'");
    out.push_back(*v);
  }
  return out;
}

std::optional<std::vector<std::string>> Config::get_strings(const std::string& key) const {
  const auto s = get_string(key);
  if (!s) return std::nullopt;
  auto out = split_list(*s);
  for (const auto& item : out) {
    if (item.empty()) throw ConfigError(key, "empty list element");
  }
  return out;
}

void Config::require_known(const std::set<std::string>& known) const {
  for (const auto& [key, value] : entries_) {
    if (!known.count(key)) throw ConfigError(key, "unknown key");
  }
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [key, value] : entries_) out += key + " = " + value + "\n";
  return out;
}

std::string Config::to_json() const {
  nlohmann::ordered_json root = nlohmann::ordered_json::object();
  for (const auto& [key, value] : entries_) {
    nlohmann::ordered_json* node = &root;
    std::size_t start = 0;
    for (auto dot = key.find('.'); dot != std::string::npos; dot = key.find('.', start)) {
      auto& child = (*node)[key.substr(start, dot - start)];
      if (!child.is_object()) child = nlohmann::ordered_json::object();
      node = &child;
      start = dot + 1;
    }
    nlohmann::ordered_json leaf;
    std::uint64_t u = 0;
    const auto [uptr, uec] = std::from_chars(value.data(), value.data() + value.size(), u);
    if (value == "true" || value == "false") {
      leaf = value == "true";
    } else if (!value.empty() && uec == std::errc() && uptr == value.data() + value.size()) {
      leaf = u;
    } else if (const auto d = parse_double(value)) {
      leaf = *d;
    } else if (value.find(',') != std::string::npos) {
      const auto items = split_list(value);
      std::vector<double> nums;
      for (const auto& item : items) {
        if (const auto n = parse_double(item)) nums.push_back(*n);
      }
      leaf = nums.size() == items.size() ? nlohmann::ordered_json(nums) : nlohmann::ordered_json(items);
    } else {
      leaf = value;
    }
    (*node)[key.substr(start)] = leaf;
  }
  return root.dump(2) + "\n";
}

}  // namespace advscale
