#include "curlip/adversary.hpp"

#include <algorithm>

#include "curlip/rng.hpp"

namespace curlip {

AdversarialSample perturb_domain(const UrlRecord& rec, const Vocab& v, char evasion_char,
                                 int max_insertions) {
  if (is_ip_literal_host(rec.host)) throw NoDomain("host is an IP literal: " + rec.host);
  const size_t last_dot = rec.host.rfind('.');
  if (last_dot == std::string::npos)
    throw NoDomain("host has no second-level label: " + rec.host);
  const size_t sld_end_in_host = last_dot;
  size_t sld_begin_in_host = rec.host.rfind('.', last_dot - 1);
  sld_begin_in_host = sld_begin_in_host == std::string::npos ? 0 : sld_begin_in_host + 1;
  if (sld_begin_in_host >= sld_end_in_host)
    throw NoDomain("empty second-level label in host: " + rec.host);

  // Work on the raw bytes so the splice preserves everything else verbatim.
  const size_t sld_begin = rec.host_begin + sld_begin_in_host;
  const size_t sld_len = sld_end_in_host - sld_begin_in_host;
  const std::string sld = rec.raw.substr(sld_begin, sld_len);

  const std::vector<int> pieces = v.segment(sld);

  AdversarialSample out;
  out.original = rec;
  if (pieces.size() <= 1) {
    out.perturbed_url = rec.raw;
    out.pseudo_ip = derive_ip_from_hash(out.perturbed_url);
    out.single_piece = true;
    return out;
  }

  // Boundary offsets within the label, skipping ones already next to a
  // separator character.
  std::vector<size_t> boundaries;
  size_t off = 0;
  for (size_t i = 0; i + 1 < pieces.size(); ++i) {
    off += v.piece(pieces[i]).size();
    const char before = sld[off - 1];
    const char after = sld[off];
    if (before == '-' || before == '.' || after == '-' || after == '.') continue;
    boundaries.push_back(off);
  }
  if (max_insertions >= 0 && (int)boundaries.size() > max_insertions)
    boundaries.resize((size_t)max_insertions);

  std::string url = rec.raw;
  size_t shift = 0;
  for (size_t b : boundaries) {
    const size_t at = sld_begin + b + shift;
    url.insert(url.begin() + (long)at, evasion_char);
    out.inserted_positions.push_back(at);
    shift += 1;
  }
  out.perturbed_url = std::move(url);
  out.pseudo_ip = derive_ip_from_hash(out.perturbed_url);
  out.single_piece = boundaries.empty();
  return out;
}

AdversarialSetResult build_adversarial_set(const Dataset& ds, const Vocab& v,
                                           double fraction_malicious, uint64_t seed,
                                           char evasion_char, int max_insertions) {
  if (fraction_malicious < 0.0 || fraction_malicious > 1.0)
    throw Error("fraction_malicious must be in [0,1]");
  std::vector<int64_t> pool;
  for (int64_t i = 0; i < ds.size(); ++i)
    if (ds.records[(size_t)i].label != Label::Benign) pool.push_back(i);
  if (pool.empty()) throw EmptyInput("dataset has no malicious records");

  Rng rng(seed);
  for (size_t i = pool.size() - 1; i > 0; --i)
    std::swap(pool[i], pool[(size_t)rng.uniform_int((uint64_t)i + 1)]);
  const int64_t want = (int64_t)std::llround(fraction_malicious * (double)pool.size());
  pool.resize((size_t)std::min<int64_t>(want, (int64_t)pool.size()));
  std::sort(pool.begin(), pool.end());  // output order follows input order

  AdversarialSetResult res;
  res.dataset.records = ds.records;
  res.dataset.source_path = ds.source_path;
  for (int64_t i : pool) {
    const UrlRecord& src = ds.records[(size_t)i];
    try {
      AdversarialSample sample = perturb_domain(src, v, evasion_char, max_insertions);
      UrlRecord rec = parse_url(sample.perturbed_url);
      rec.label = src.label;
      rec.ip = sample.pseudo_ip;
      rec.origin = Origin::Adversarial;
      res.dataset.records.push_back(std::move(rec));
      res.generated += 1;
      if (sample.single_piece) res.single_piece += 1;
    } catch (const NoDomain&) {
      res.skipped += 1;
    }
  }
  res.dataset.recount();
  return res;
}

}  // namespace curlip
