#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvm {

/// Flat `section.key = value` text. Lines starting with '#' are comments.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);
std::string config_text(const ConfigMap& m);

/// Parses "key=value"; throws ConfigError on a missing '='.
std::pair<std::string, std::string> parse_override(const std::string& kv);

std::size_t parse_size(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);
// "1,3,5" or "[1, 3, 5]"
std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v);
std::string size_list_text(const std::vector<std::size_t>& v);

}  // namespace msvm
