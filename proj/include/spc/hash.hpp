#pragma once

// SHA-256 helpers over buffers and files (OpenSSL libcrypto, EVP API).

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "spc/common.hpp"

namespace spc {

using Sha256 = std::array<std::uint8_t, 32>;

inline Sha256 sha256(const void* data, std::size_t len) {
  Sha256 out{};
  unsigned int got = 0;
  EVP_Digest(data, len, out.data(), &got, EVP_sha256(), nullptr);
  return out;
}

inline Sha256 sha256(const std::vector<std::uint8_t>& bytes) {
  return sha256(bytes.data(), bytes.size());
}

inline std::string hex(const Sha256& h) {
  static const char* digits = "0123456789abcdef";
  std::string s(64, '0');
  for (int i = 0; i < 32; ++i) {
    s[2 * i] = digits[h[i] >> 4];
    s[2 * i + 1] = digits[h[i] & 0xf];
  }
  return s;
}

inline Sha256 sha256_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open for hashing: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<unsigned char> buf(1 << 16);
  std::size_t got;
  while ((got = std::fread(buf.data(), 1, buf.size(), f)) > 0)
    EVP_DigestUpdate(ctx, buf.data(), got);
  std::fclose(f);
  Sha256 out{};
  unsigned int n = 0;
  EVP_DigestFinal_ex(ctx, out.data(), &n);
  EVP_MD_CTX_free(ctx);
  return out;
}

}  // namespace spc
