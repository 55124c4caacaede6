#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace gpfi {

/// 64-bit FNV-1a, incremental.
class Fnv1a {
public:
    void update(const void* data, std::size_t len);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }
    std::string hex() const;

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::string_view s);

}  // namespace gpfi
