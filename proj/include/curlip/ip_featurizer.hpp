#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "curlip/errors.hpp"

namespace curlip {

struct IPv4 {
  std::array<uint8_t, 4> octets{0, 0, 0, 0};

  std::string to_string() const;
  uint32_t as_u32() const {
    return ((uint32_t)octets[0] << 24) | ((uint32_t)octets[1] << 16) |
           ((uint32_t)octets[2] << 8) | (uint32_t)octets[3];
  }
  bool operator==(const IPv4&) const = default;
};

enum class IpClass { A, B, C, D, E };

const char* ip_class_name(IpClass c);

// Strict dotted-quad parse; leading zeros are fine, CIDR suffixes are not.
IPv4 parse_ipv4(const std::string& text);

// Classful partition by first octet: 0-127 A, 128-191 B, 192-223 C,
// 224-239 D, 240-255 E.
IpClass ip_class(const IPv4& ip);

// 64-bit FNV-1a.
uint64_t fnv1a64(const void* data, size_t len);
inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline constexpr int kIpFeatureDim = 13;

// Deterministic 13-d featurization: 4 octets scaled to [0,1], 5-way class
// one-hot, and a 4-way /16-prefix hash bucket one-hot.
struct IpFeature {
  std::vector<float> values;  // length kIpFeatureDim
};

IpFeature ip_embed_input(const IPv4& ip);

// Pseudo-IP from a URL's hash signature: the four low-order bytes of
// FNV-1a64 over the URL text, little-endian.
IPv4 derive_ip_from_hash(const std::string& url);

}  // namespace curlip
