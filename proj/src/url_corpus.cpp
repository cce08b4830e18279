#include "curlip/url_corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "curlip/rng.hpp"

namespace curlip {

std::string label_to_string(Label l) {
  switch (l) {
    case Label::Benign: return "benign";
    case Label::Malicious: return "malicious";
    case Label::Phishing: return "phishing";
  }
  return "benign";
}

Label label_from_string(const std::string& s) {
  if (s == "benign") return Label::Benign;
  if (s == "malicious") return Label::Malicious;
  if (s == "phishing") return Label::Phishing;
  throw LabelError("unknown label token: '" + s + "'");
}

const char* tld_kind_name(TldKind k) {
  switch (k) {
    case TldKind::Com: return "com";
    case TldKind::CcTld: return "cctld";
    case TldKind::OtherGtld: return "other_gtld";
  }
  return "other_gtld";
}

std::string origin_to_string(Origin o) {
  return o == Origin::Clean ? "clean" : "adversarial";
}

Origin origin_from_string(const std::string& s) {
  if (s == "clean") return Origin::Clean;
  if (s == "adversarial") return Origin::Adversarial;
  throw SchemaError("unknown origin token: '" + s + "'");
}

namespace {

bool is_ascii_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_ascii_digit(char c) { return c >= '0' && c <= '9'; }

bool illegal_host_char(unsigned char c) {
  return c <= 0x20 || c == 0x7f;  // space and control characters
}

// Three-way taxonomy: "com" itself, two-letter country codes, everything else.
TldKind classify_tld(const std::string& tld) {
  if (tld == "com") return TldKind::Com;
  if (tld.size() == 2 && is_ascii_alpha(tld[0]) && is_ascii_alpha(tld[1])) return TldKind::CcTld;
  return TldKind::OtherGtld;
}

}  // namespace

bool is_ip_literal_host(const std::string& host) {
  int dots = 0;
  for (char c : host) {
    if (c == '.') {
      ++dots;
    } else if (!is_ascii_digit(c)) {
      return false;
    }
  }
  if (dots != 3) return false;
  try {
    (void)parse_ipv4(host);
    return true;
  } catch (const BadIp&) {
    return false;
  }
}

UrlRecord parse_url(const std::string& raw) {
  if (raw.empty()) throw MalformedUrl("empty URL");

  UrlRecord rec;
  rec.raw = raw;

  size_t pos = 0;
  const size_t scheme_sep = raw.find("://");
  if (scheme_sep != std::string::npos && scheme_sep > 0) {
    bool scheme_ok = is_ascii_alpha(raw[0]);
    for (size_t i = 1; i < scheme_sep && scheme_ok; ++i) {
      const char c = raw[i];
      if (!is_ascii_alpha(c) && !is_ascii_digit(c) && c != '+' && c != '-' && c != '.')
        scheme_ok = false;
    }
    if (scheme_ok) {
      rec.scheme = raw.substr(0, scheme_sep);
      std::transform(rec.scheme.begin(), rec.scheme.end(), rec.scheme.begin(),
                     [](unsigned char c) { return (char)std::tolower(c); });
      pos = scheme_sep + 3;
    }
  }
  if (rec.scheme.empty()) rec.scheme = "http";

  const size_t auth_end = raw.find_first_of("/?#", pos);
  std::string authority =
      auth_end == std::string::npos ? raw.substr(pos) : raw.substr(pos, auth_end - pos);
  rec.path_query = auth_end == std::string::npos ? "" : raw.substr(auth_end);

  size_t host_begin = pos;
  const size_t at = authority.rfind('@');
  if (at != std::string::npos) {
    host_begin += at + 1;
    authority = authority.substr(at + 1);
  }
  size_t host_len = authority.size();
  const size_t colon = authority.rfind(':');
  if (colon != std::string::npos) {
    bool all_digits = colon + 1 < authority.size();
    for (size_t i = colon + 1; i < authority.size(); ++i)
      if (!is_ascii_digit(authority[i])) all_digits = false;
    if (all_digits) host_len = colon;
  }
  std::string host = authority.substr(0, host_len);

  if (host.empty()) throw MalformedUrl("no host in URL: '" + raw + "'");
  for (unsigned char c : host)
    if (illegal_host_char(c))
      throw MalformedUrl("illegal character in host of URL: '" + raw + "'");

  std::transform(host.begin(), host.end(), host.begin(),
                 [](unsigned char c) { return (char)std::tolower(c); });
  rec.host = host;
  rec.host_begin = host_begin;
  rec.host_end = host_begin + host_len;

  const size_t last_dot = host.rfind('.');
  rec.tld = last_dot == std::string::npos ? host : host.substr(last_dot + 1);
  if (rec.tld.empty()) throw MalformedUrl("host ends with a dot: '" + raw + "'");
  rec.tld_kind = classify_tld(rec.tld);
  return rec;
}

void Dataset::recount() {
  class_counts.clear();
  for (const auto& r : records) class_counts[r.label] += 1;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file: " + path);

  std::string header;
  if (!std::getline(in, header)) throw SchemaError("dataset file is empty: " + path);
  header = strip_cr(header);
  bool with_origin = false;
  if (header == "url,ip,label") {
    with_origin = false;
  } else if (header == "url,ip,label,origin") {
    with_origin = true;
  } else {
    throw SchemaError("expected header 'url,ip,label', got '" + header + "'");
  }

  Dataset ds;
  ds.source_path = path;
  std::string line;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != (with_origin ? 4u : 3u)) {
      ds.skipped_rows += 1;
      continue;
    }
    try {
      UrlRecord rec = parse_url(fields[0]);
      if (!fields[1].empty()) rec.ip = parse_ipv4(fields[1]);
      rec.label = label_from_string(fields[2]);
      if (with_origin) rec.origin = origin_from_string(fields[3]);
      ds.records.push_back(std::move(rec));
    } catch (const MalformedUrl&) {
      ds.skipped_rows += 1;
    } catch (const BadIp&) {
      ds.skipped_rows += 1;
    }
  }
  ds.recount();
  return ds;
}

void write_dataset_csv(const Dataset& ds, const std::string& path, bool with_origin) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file: " + path);
  out << (with_origin ? "url,ip,label,origin\n" : "url,ip,label\n");
  for (const auto& r : ds.records) {
    out << r.raw << ',' << (r.ip ? r.ip->to_string() : "") << ',' << label_to_string(r.label);
    if (with_origin) out << ',' << origin_to_string(r.origin);
    out << '\n';
  }
  if (!out) throw IoError("failed writing dataset file: " + path);
}

AsnMap AsnMap::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open ASN map file: " + path);
  AsnMap map;
  std::string line;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 2) throw SchemaError("bad ASN map row: '" + line + "'");
    map.add(fields[0], std::stoll(fields[1]));
  }
  return map;
}

void AsnMap::add(const std::string& cidr, int64_t asn) {
  const size_t slash = cidr.find('/');
  if (slash == std::string::npos) throw SchemaError("CIDR needs a /bits suffix: " + cidr);
  const IPv4 base = parse_ipv4(cidr.substr(0, slash));
  const int bits = std::stoi(cidr.substr(slash + 1));
  if (bits < 0 || bits > 32) throw SchemaError("CIDR bits out of range: " + cidr);
  entries_.push_back({base.as_u32(), bits, asn});
}

std::optional<int64_t> AsnMap::lookup(const IPv4& ip) const {
  const uint32_t v = ip.as_u32();
  int best_bits = -1;
  int64_t best_asn = 0;
  for (const auto& e : entries_) {
    const uint32_t mask = e.bits == 0 ? 0u : (e.bits == 32 ? 0xffffffffu : ~0u << (32 - e.bits));
    if ((v & mask) == (e.prefix & mask) && e.bits > best_bits) {
      best_bits = e.bits;
      best_asn = e.asn;
    }
  }
  if (best_bits < 0) return std::nullopt;
  return best_asn;
}

StatsReport dataset_stats(const Dataset& ds, const AsnMap* asn_map) {
  StatsReport rep;
  for (Label l : {Label::Benign, Label::Malicious, Label::Phishing})
    rep.per_label[l] = StatsReport::PerLabel{};

  std::map<Label, std::map<TldKind, int64_t>> tld_counts;
  std::map<Label, std::map<int64_t, int64_t>> asn_counts;
  for (const auto& r : ds.records) {
    auto& pl = rep.per_label[r.label];
    pl.n_records += 1;
    tld_counts[r.label][r.tld_kind] += 1;
    if (r.ip) {
      pl.n_with_ip += 1;
      const IpClass c = ip_class(*r.ip);
      const char* key = (c == IpClass::D || c == IpClass::E) ? "DE" : ip_class_name(c);
      pl.ip_class_counts[key] += 1;
      if (asn_map) {
        if (auto asn = asn_map->lookup(*r.ip)) asn_counts[r.label][*asn] += 1;
      }
    }
  }

  for (auto& [label, pl] : rep.per_label) {
    for (TldKind k : {TldKind::Com, TldKind::CcTld, TldKind::OtherGtld}) {
      const int64_t c = tld_counts[label][k];
      pl.tld_shares[k] = pl.n_records > 0 ? 100.0 * (double)c / (double)pl.n_records : 0.0;
    }
    for (const char* key : {"A", "B", "C", "DE"})
      if (!pl.ip_class_counts.count(key)) pl.ip_class_counts[key] = 0;

    std::vector<std::pair<int64_t, int64_t>> ranked(asn_counts[label].begin(),
                                                    asn_counts[label].end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (ranked.size() > 5) ranked.resize(5);
    pl.top_asn = std::move(ranked);
  }
  return rep;
}

nlohmann::json StatsReport::to_json() const {
  nlohmann::json tld_shares = nlohmann::json::object();
  nlohmann::json ip_counts = nlohmann::json::object();
  nlohmann::json top_asn = nlohmann::json::object();
  nlohmann::json class_counts = nlohmann::json::object();
  for (const auto& [label, pl] : per_label) {
    const std::string name = label_to_string(label);
    nlohmann::json shares = nlohmann::json::object();
    for (const auto& [kind, pct] : pl.tld_shares) shares[tld_kind_name(kind)] = pct;
    tld_shares[name] = shares;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [key, c] : pl.ip_class_counts) counts[key] = c;
    ip_counts[name] = counts;
    nlohmann::json asns = nlohmann::json::array();
    for (const auto& [asn, c] : pl.top_asn)
      asns.push_back({{"asn", asn}, {"count", c}});
    top_asn[name] = asns;
    class_counts[name] = pl.n_records;
  }
  return nlohmann::json{{"tld_shares", tld_shares},
                        {"ip_class_counts", ip_counts},
                        {"top_asn", top_asn},
                        {"class_counts", class_counts}};
}

std::array<Dataset, 3> split_dataset(const Dataset& ds, std::array<double, 3> ratios,
                                     uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r <= 0.0) throw BadRatios("split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw BadRatios("split ratios must sum to 1");

  const int64_t n = ds.size();
  std::vector<int64_t> idx((size_t)n);
  for (int64_t i = 0; i < n; ++i) idx[(size_t)i] = i;
  Rng rng(seed);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(idx[(size_t)i], idx[(size_t)rng.uniform_int((uint64_t)i + 1)]);

  const int64_t n_train_floor = (int64_t)(ratios[0] * (double)n);
  const int64_t n_val = (int64_t)(ratios[1] * (double)n);
  const int64_t n_test = (int64_t)(ratios[2] * (double)n);
  const int64_t n_train = n - n_val - n_test;  // leftover goes to train
  (void)n_train_floor;

  std::array<Dataset, 3> out;
  const std::array<int64_t, 3> sizes{n_train, n_val, n_test};
  int64_t cursor = 0;
  for (int part = 0; part < 3; ++part) {
    out[(size_t)part].source_path = ds.source_path;
    for (int64_t i = 0; i < sizes[(size_t)part]; ++i)
      out[(size_t)part].records.push_back(ds.records[(size_t)idx[(size_t)cursor++]]);
    out[(size_t)part].recount();
  }
  return out;
}

}  // namespace curlip
