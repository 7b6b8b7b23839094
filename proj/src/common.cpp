#include "hydronet/common.hpp"

#include <charconv>
#include <cstdio>

namespace hydronet {

std::string to_hex(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf);
}

std::string format_double(double value) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc())
        throw RuntimeFailure("format_double: value does not fit buffer");
    return std::string(buf, end);
}

}  // namespace hydronet
