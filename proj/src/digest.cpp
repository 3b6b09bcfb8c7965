#include "als/digest.hpp"

#include <openssl/evp.h>

#include <cstring>

#include "als/error.hpp"

namespace als {

Hasher::Hasher() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(static_cast<EVP_MD_CTX *>(ctx_), EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorKind::InvalidConfig, "sha256 init failed");
    }
}

Hasher::~Hasher() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX *>(ctx_)); }

Hasher &Hasher::bytes(std::span<const std::uint8_t> data) {
    EVP_DigestUpdate(static_cast<EVP_MD_CTX *>(ctx_), data.data(), data.size());
    return *this;
}

Hasher &Hasher::u64(std::uint64_t value) {
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) {
        buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
    }
    return bytes(buf);
}

Hasher &Hasher::field(std::string_view text) {
    u64(text.size());
    return bytes({reinterpret_cast<const std::uint8_t *>(text.data()), text.size()});
}

Hasher &Hasher::field(std::span<const float> values) {
    u64(values.size());
    for (float v : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        std::uint8_t buf[4] = {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8),
                               static_cast<std::uint8_t>(bits >> 16),
                               static_cast<std::uint8_t>(bits >> 24)};
        bytes(buf);
    }
    return *this;
}

Hasher &Hasher::field(std::span<const int> values) {
    u64(values.size());
    for (int v : values) {
        u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(v)));
    }
    return *this;
}

Digest Hasher::finish() {
    Digest out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(static_cast<EVP_MD_CTX *>(ctx_), out.data(), &len);
    return out;
}

std::string to_hex(const Digest &d) {
    static const char *digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (std::uint8_t b : d) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 15]);
    }
    return s;
}

Digest digest_from_hex(std::string_view hex) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (hex.size() != 64) {
        throw Error(ErrorKind::CorruptFile, "digest hex must be 64 characters");
    }
    Digest d{};
    for (std::size_t i = 0; i < 32; ++i) {
        const int hi = nibble(hex[2 * i]);
        const int lo = nibble(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) {
            throw Error(ErrorKind::CorruptFile, "digest hex has a non-hex character");
        }
        d[i] = static_cast<std::uint8_t>(hi * 16 + lo);
    }
    return d;
}

} // namespace als
