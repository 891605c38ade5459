// SPDX-License-Identifier: Apache-2.0
#include "capctl/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace capctl::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const char* what) {
  throw ConfigError("config: '" + key + "' expects " + what + ", got '" + text + "'");
}

template <typename N>
void parse_number(const std::string& key, const std::string& text, N& out, const char* what) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, text, what);
  out = v;
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, std::string_view source) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": empty key");
    kv.entries_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValues::merge(const KeyValues& over) {
  for (const auto& [k, v] : over.entries_) entries_[k] = v;
}

std::optional<std::string> KeyValues::take(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  used_.insert(key);
  return it->second;
}

void KeyValues::reject_unused() const {
  std::string unknown;
  for (const auto& [k, v] : entries_) {
    if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ConfigError("config: unknown keys: " + unknown);
}

void parse_value(const std::string& key, const std::string& text, int& out) {
  parse_number(key, text, out, "an integer");
}
void parse_value(const std::string& key, const std::string& text, std::uint64_t& out) {
  parse_number(key, text, out, "a non-negative integer");
}
void parse_value(const std::string& key, const std::string& text, double& out) {
  parse_number(key, text, out, "a number");
}
void parse_value(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") out = true;
  else if (text == "false" || text == "0") out = false;
  else bad_value(key, text, "true or false");
}
void parse_value(const std::string&, const std::string& text, std::string& out) { out = text; }

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }

}  // namespace capctl::config
