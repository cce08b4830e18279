#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "curlip/errors.hpp"
#include "curlip/ip_featurizer.hpp"

namespace curlip {

enum class Label { Benign, Malicious, Phishing };
enum class TldKind { Com, CcTld, OtherGtld };
enum class Origin { Clean, Adversarial };

std::string label_to_string(Label l);
Label label_from_string(const std::string& s);  // throws LabelError
const char* tld_kind_name(TldKind k);
std::string origin_to_string(Origin o);
Origin origin_from_string(const std::string& s);

struct UrlRecord {
  std::string raw;
  std::string scheme;
  std::string host;  // lowercased
  std::string tld;
  TldKind tld_kind = TldKind::OtherGtld;
  std::string path_query;
  std::optional<IPv4> ip;
  Label label = Label::Benign;
  Origin origin = Origin::Clean;

  // Byte span of the host inside raw (original casing), used when a URL must
  // be edited in place without touching anything outside the authority.
  size_t host_begin = 0;
  size_t host_end = 0;
};

// Scheme defaults to http; host is lowercased with the port stripped; tld is
// the final host label. Throws MalformedUrl.
UrlRecord parse_url(const std::string& raw);

bool is_ip_literal_host(const std::string& host);

struct Dataset {
  std::vector<UrlRecord> records;
  std::string source_path;
  std::map<Label, int64_t> class_counts;
  int64_t skipped_rows = 0;

  int64_t size() const { return (int64_t)records.size(); }
  void recount();
};

// CSV with header "url,ip,label" (optionally plus ",origin"). Malformed rows
// are skipped and counted; unknown labels abort.
Dataset load_dataset(const std::string& path);

void write_dataset_csv(const Dataset& ds, const std::string& path, bool with_origin = false);

// CIDR prefix -> ASN id table, longest prefix wins. File rows: "cidr,asn".
class AsnMap {
 public:
  static AsnMap load(const std::string& path);
  void add(const std::string& cidr, int64_t asn);
  std::optional<int64_t> lookup(const IPv4& ip) const;
  bool empty() const { return entries_.empty(); }

 private:
  struct Entry {
    uint32_t prefix;
    int bits;
    int64_t asn;
  };
  std::vector<Entry> entries_;
};

struct StatsReport {
  struct PerLabel {
    std::map<TldKind, double> tld_shares;           // percentages
    std::map<std::string, int64_t> ip_class_counts; // A/B/C/DE buckets
    std::vector<std::pair<int64_t, int64_t>> top_asn;  // (asn, count), best five
    int64_t n_records = 0;
    int64_t n_with_ip = 0;
  };
  std::map<Label, PerLabel> per_label;

  nlohmann::json to_json() const;
};

StatsReport dataset_stats(const Dataset& ds, const AsnMap* asn_map = nullptr);

// Deterministic shuffled split; partitions are floored and the leftover rows
// go to train. Throws BadRatios.
std::array<Dataset, 3> split_dataset(const Dataset& ds, std::array<double, 3> ratios,
                                     uint64_t seed);

}  // namespace curlip
