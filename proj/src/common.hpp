#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hp {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// Extra per-op finiteness checks, off by default (they cost a pass over the data).
bool debug_checks();
void set_debug_checks(bool on);

enum class Dtype : uint8_t { F64 = 0, F32 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::F64 ? 8 : 4; }
inline const char* dtype_name(Dtype d) { return d == Dtype::F64 ? "f64" : "f32"; }

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

}  // namespace hp

#define HP_CHECK(cond, msgexpr)                  \
    do {                                         \
        if (!(cond)) {                           \
            std::ostringstream hp_ss_;           \
            hp_ss_ << msgexpr;                   \
            ::hp::fail(hp_ss_.str());            \
        }                                        \
    } while (0)
