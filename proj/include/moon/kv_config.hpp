#pragma once

// Flat `key = value` configuration files. Blank lines and lines starting with
// '#' are ignored; keys are unique.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace moon {

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  /// Canonical text: keys sorted, one `key = value` per line.
  std::string to_string() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::uint64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, double value);

  std::string get_string(const std::string& key, std::optional<std::string> fallback = std::nullopt) const;
  int get_int(const std::string& key, std::optional<int> fallback = std::nullopt) const;
  std::uint64_t get_u64(const std::string& key, std::optional<std::uint64_t> fallback = std::nullopt) const;
  double get_double(const std::string& key, std::optional<double> fallback = std::nullopt) const;
  bool get_bool(const std::string& key, std::optional<bool> fallback = std::nullopt) const;

 private:
  const std::string* find(const std::string& key) const;
  std::map<std::string, std::string> values_;
};

}  // namespace moon
