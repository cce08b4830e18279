#include "curlip/ip_featurizer.hpp"

#include <cstdio>

namespace curlip {

std::string IPv4::to_string() const {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u", octets[0], octets[1], octets[2], octets[3]);
  return buf;
}

const char* ip_class_name(IpClass c) {
  switch (c) {
    case IpClass::A: return "A";
    case IpClass::B: return "B";
    case IpClass::C: return "C";
    case IpClass::D: return "D";
    case IpClass::E: return "E";
  }
  return "A";
}

IPv4 parse_ipv4(const std::string& text) {
  IPv4 ip;
  int field = 0;
  long value = 0;
  bool have_digit = false;
  for (char c : text) {
    if (c >= '0' && c <= '9') {
      value = value * 10 + (c - '0');
      have_digit = true;
      if (value > 255) throw BadIp("octet out of range in '" + text + "'");
    } else if (c == '.') {
      if (!have_digit || field == 3) throw BadIp("malformed IPv4 '" + text + "'");
      ip.octets[(size_t)field++] = (uint8_t)value;
      value = 0;
      have_digit = false;
    } else {
      throw BadIp("non-digit in IPv4 '" + text + "'");
    }
  }
  if (!have_digit || field != 3) throw BadIp("wrong field count in IPv4 '" + text + "'");
  ip.octets[3] = (uint8_t)value;
  return ip;
}

IpClass ip_class(const IPv4& ip) {
  const uint8_t o = ip.octets[0];
  if (o <= 127) return IpClass::A;
  if (o <= 191) return IpClass::B;
  if (o <= 223) return IpClass::C;
  if (o <= 239) return IpClass::D;
  return IpClass::E;
}

uint64_t fnv1a64(const void* data, size_t len) {
  const unsigned char* p = (const unsigned char*)data;
  uint64_t h = 14695981039346656037ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

IpFeature ip_embed_input(const IPv4& ip) {
  IpFeature f;
  f.values.assign(kIpFeatureDim, 0.0f);
  for (int i = 0; i < 4; ++i) f.values[(size_t)i] = (float)ip.octets[(size_t)i] / 255.0f;
  f.values[(size_t)(4 + (int)ip_class(ip))] = 1.0f;
  const uint8_t prefix[2] = {ip.octets[0], ip.octets[1]};
  const uint64_t bucket = fnv1a64(prefix, 2) % 4;
  f.values[(size_t)(9 + bucket)] = 1.0f;
  return f;
}

IPv4 derive_ip_from_hash(const std::string& url) {
  if (url.empty()) throw EmptyInput("derive_ip_from_hash: empty URL");
  const uint64_t h = fnv1a64(url);
  IPv4 ip;
  ip.octets[0] = (uint8_t)(h & 0xff);
  ip.octets[1] = (uint8_t)((h >> 8) & 0xff);
  ip.octets[2] = (uint8_t)((h >> 16) & 0xff);
  ip.octets[3] = (uint8_t)((h >> 24) & 0xff);
  return ip;
}

}  // namespace curlip
