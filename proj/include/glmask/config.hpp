#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace glmask {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using ConfigMap = std::map<std::string, std::string>;

std::size_t get_size(const ConfigMap& kv, const std::string& key, std::size_t fallback);
std::uint64_t get_u64(const ConfigMap& kv, const std::string& key, std::uint64_t fallback);
double get_real(const ConfigMap& kv, const std::string& key, double fallback);
std::string get_string(const ConfigMap& kv, const std::string& key, const std::string& fallback);

/// Shortest text that parses back to exactly `v`.
std::string format_real(double v);

/// Flat "key = value" lines; '#' starts a comment, blank lines are ignored.
ConfigMap parse_config(const std::string& text, const std::string& origin = "<config>");
ConfigMap read_config_file(const std::filesystem::path& path);
/// Keys in sorted order, one "key=value" per line.
std::string format_config(const ConfigMap& kv);
void write_config_file(const std::filesystem::path& path, const ConfigMap& kv);

}  // namespace glmask
