#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace pialm {

// Flat `key=value` text. `#` starts a comment; blank lines are ignored.
// Keys that are read are tracked so callers can reject unknown keys.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;
  explicit KeyValueConfig(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated integers, e.g. "32,64,128".
  std::vector<long long> get_int_list(const std::string& key,
                                      const std::vector<long long>& fallback) const;

  // Throws ConfigError naming every key that was never read.
  void reject_unused() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace pialm
