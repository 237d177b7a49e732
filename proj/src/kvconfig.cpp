#include "kvconfig.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "common.hpp"

namespace hp::kv {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Items parse(const std::string& text) {
  Items out;
  std::set<std::string> seen;
  size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    HP_CHECK(eq != std::string::npos, "config line " << lineno << " has no '=': \"" << line
                                                     << "\"");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    HP_CHECK(!key.empty(), "config line " << lineno << " has an empty key");
    HP_CHECK(seen.insert(key).second, "duplicate config key '" << key << "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string render(const Items& items) {
  std::string out;
  for (const auto& [k, v] : items) out += k + " = " + v + "\n";
  return out;
}

std::pair<std::string, std::string> split_pair(const std::string& kv) {
  size_t eq = kv.find('=');
  HP_CHECK(eq != std::string::npos, "override \"" << kv << "\" is not of the form key=value");
  std::string key = trim(kv.substr(0, eq));
  HP_CHECK(!key.empty(), "override \"" << kv << "\" has an empty key");
  return {key, trim(kv.substr(eq + 1))};
}

int64_t to_int(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(value.c_str(), &end, 10);
  HP_CHECK(end != value.c_str() && *end == '\0' && errno == 0,
           "config key '" << key << "': \"" << value << "\" is not an integer");
  return v;
}

uint64_t to_uint(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  HP_CHECK(value.find('-') == std::string::npos,
           "config key '" << key << "': \"" << value << "\" must be nonnegative");
  unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  HP_CHECK(end != value.c_str() && *end == '\0' && errno == 0,
           "config key '" << key << "': \"" << value << "\" is not an unsigned integer");
  return v;
}

double to_real(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  HP_CHECK(end != value.c_str() && *end == '\0' && errno == 0,
           "config key '" << key << "': \"" << value << "\" is not a number");
  return v;
}

std::string format_real(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace hp::kv
