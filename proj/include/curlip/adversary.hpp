#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "curlip/ip_featurizer.hpp"
#include "curlip/tokenizer.hpp"
#include "curlip/url_corpus.hpp"

namespace curlip {

struct AdversarialSample {
  UrlRecord original;
  std::string perturbed_url;
  std::vector<size_t> inserted_positions;  // byte offsets in perturbed_url
  IPv4 pseudo_ip;
  bool single_piece = false;  // segmentation gave one piece; URL unchanged
};

// Inserts the evasion character at internal subword boundaries of the
// second-level host label; scheme, path and TLD stay untouched. Throws
// NoDomain for IP-literal hosts or hosts without a second-level label.
AdversarialSample perturb_domain(const UrlRecord& rec, const Vocab& v, char evasion_char = '-',
                                 int max_insertions = -1);

struct AdversarialSetResult {
  Dataset dataset;         // clean records + appended adversarial records
  int64_t generated = 0;
  int64_t skipped = 0;     // records that had no perturbable domain
  int64_t single_piece = 0;
};

// Perturbs a seeded random fraction of the non-benign records and appends the
// results (labels kept, origin tagged, pseudo-IP attached).
AdversarialSetResult build_adversarial_set(const Dataset& ds, const Vocab& v,
                                           double fraction_malicious, uint64_t seed,
                                           char evasion_char = '-', int max_insertions = -1);

}  // namespace curlip
