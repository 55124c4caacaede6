#include "gpfi/digest.hpp"

#include <cstdio>

namespace gpfi {

void Fnv1a::update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ULL;
    }
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
}

std::string digest_hex(std::string_view s) {
    Fnv1a f;
    f.update(s);
    return f.hex();
}

}  // namespace gpfi
