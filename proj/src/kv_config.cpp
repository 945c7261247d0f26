#include "moon/kv_config.hpp"

#include "moon/types.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace moon {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected `key = value`");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError(lineno, "empty key");
    if (cfg.values_.count(key)) throw ParseError(lineno, "duplicate key `" + key + "`");
    cfg.values_[key] = trim(t.substr(eq + 1));
  }
  return cfg;
}

KvConfig KvConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KvConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config " + path.string());
  out << to_string();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string KvConfig::to_string() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
  return s;
}

void KvConfig::set(const std::string& key, double value) {
  // Shortest representation that round-trips.
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  values_[key] = std::string(buf, res.ptr);
}

const std::string* KvConfig::find(const std::string& key) const {
  auto it = values_.find(key);
  return it == values_.end() ? nullptr : &it->second;
}

std::string KvConfig::get_string(const std::string& key, std::optional<std::string> fallback) const {
  if (const auto* v = find(key)) return *v;
  if (fallback) return *fallback;
  throw ConfigError("missing config key `" + key + "`");
}

int KvConfig::get_int(const std::string& key, std::optional<int> fallback) const {
  const auto* v = find(key);
  if (!v) {
    if (fallback) return *fallback;
    throw ConfigError("missing config key `" + key + "`");
  }
  int out = 0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ConfigError("config key `" + key + "` is not an integer: " + *v);
  return out;
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::optional<std::uint64_t> fallback) const {
  const auto* v = find(key);
  if (!v) {
    if (fallback) return *fallback;
    throw ConfigError("missing config key `" + key + "`");
  }
  std::uint64_t out = 0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ConfigError("config key `" + key + "` is not an unsigned integer: " + *v);
  return out;
}

double KvConfig::get_double(const std::string& key, std::optional<double> fallback) const {
  const auto* v = find(key);
  if (!v) {
    if (fallback) return *fallback;
    throw ConfigError("missing config key `" + key + "`");
  }
  double out = 0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ConfigError("config key `" + key + "` is not a number: " + *v);
  return out;
}

bool KvConfig::get_bool(const std::string& key, std::optional<bool> fallback) const {
  const auto* v = find(key);
  if (!v) {
    if (fallback) return *fallback;
    throw ConfigError("missing config key `" + key + "`");
  }
  if (*v == "true" || *v == "1" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "off") return false;
  throw ConfigError("config key `" + key + "` is not a boolean: " + *v);
}

}  // namespace moon
