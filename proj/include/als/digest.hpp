#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace als {

using Digest = std::array<std::uint8_t, 32>;

// Incremental SHA-256 over length-prefixed fields, so ("ab","c") and
// ("a","bc") hash differently.
class Hasher {
  public:
    Hasher();
    ~Hasher();
    Hasher(const Hasher &) = delete;
    Hasher &operator=(const Hasher &) = delete;

    Hasher &bytes(std::span<const std::uint8_t> data);
    Hasher &field(std::string_view text);
    Hasher &field(std::span<const float> values);
    Hasher &field(std::span<const int> values);
    Hasher &u64(std::uint64_t value);

    Digest finish();

  private:
    void *ctx_;
};

std::string to_hex(const Digest &d);
Digest digest_from_hex(std::string_view hex);

} // namespace als
