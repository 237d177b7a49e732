#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

// Flat key=value config text: one pair per line, '#' comments, order
// preserved, duplicate keys rejected. Typed accessors name the offending key
// in every error so CLI overrides fail loudly.

namespace hp::kv {

using Items = std::vector<std::pair<std::string, std::string>>;

Items parse(const std::string& text);
std::string render(const Items& items);

// Splits a single "key=value" override (the --set form).
std::pair<std::string, std::string> split_pair(const std::string& kv);

int64_t to_int(const std::string& key, const std::string& value);
uint64_t to_uint(const std::string& key, const std::string& value);
double to_real(const std::string& key, const std::string& value);

// Shortest decimal text that parses back to the same double.
std::string format_real(double v);

}  // namespace hp::kv
