// SPDX-License-Identifier: Apache-2.0
//
// key=value configuration files. Each config struct lists its fields through
// a static `fields(self, f)` hook; apply() and dump() work off that list.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "capctl/errors.hpp"

namespace capctl::config {

class KeyValues {
 public:
  /// Lines are `key = value`; `#` starts a comment; blank lines are skipped.
  static KeyValues parse(std::string_view text, std::string_view source = "<config>");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  /// Entries of `over` replace ours.
  void merge(const KeyValues& over);
  std::optional<std::string> take(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }
  /// Throws ConfigError naming every key nobody consumed.
  void reject_unused() const;

 private:
  std::map<std::string, std::string> entries_;
  mutable std::set<std::string> used_;
};

void parse_value(const std::string& key, const std::string& text, int& out);
void parse_value(const std::string& key, const std::string& text, std::uint64_t& out);
void parse_value(const std::string& key, const std::string& text, double& out);
void parse_value(const std::string& key, const std::string& text, bool& out);
void parse_value(const std::string& key, const std::string& text, std::string& out);

std::string format_value(int v);
std::string format_value(std::uint64_t v);
std::string format_value(double v);
std::string format_value(bool v);
std::string format_value(const std::string& v);

template <typename Cfg>
void apply(Cfg& cfg, const std::string& prefix, const KeyValues& kv) {
  Cfg::fields(cfg, [&](const char* name, auto& member) {
    const std::string key = prefix + name;
    if (auto text = kv.take(key)) parse_value(key, *text, member);
  });
}

template <typename Cfg>
std::string dump(const Cfg& cfg, const std::string& prefix) {
  std::string out;
  Cfg::fields(cfg, [&](const char* name, const auto& member) {
    out += prefix + name + " = " + format_value(member) + "\n";
  });
  return out;
}

}  // namespace capctl::config
