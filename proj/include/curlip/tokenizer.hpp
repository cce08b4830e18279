#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "curlip/errors.hpp"

namespace curlip {

// Byte-level BPE vocabulary. Ids 0-4 are fixed specials, 5-260 the byte
// pieces, and everything above comes from learned merges. Byte fallback means
// encoding any string always succeeds.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecials = 5;
  static constexpr int kMinSize = kNumSpecials + 256;

  // Greedy pair-merge training over raw bytes. Frequency ties are broken by
  // the seed; merging stops early when no adjacent pair repeats.
  static Vocab train(const std::vector<std::string>& corpus, int vocab_size, uint64_t seed);

  int size() const { return (int)pieces_.size(); }
  const std::string& piece(int id) const { return pieces_[(size_t)id]; }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  // Greedy longest-match segmentation into piece ids (no specials attached).
  std::vector<int> segment(const std::string& text) const;

  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& o) const {
    return pieces_ == o.pieces_ && merges_ == o.merges_;
  }

 private:
  Vocab() = default;
  void rebuild_index();

  std::vector<std::string> pieces_;
  std::vector<std::pair<int, int>> merges_;
  std::unordered_map<std::string, int> id_of_;  // learned + byte pieces only
  size_t max_piece_len_ = 1;
};

// Fixed-length id sequence: [CLS] payload [SEP] padding.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<int> attn_mask;  // 1 on non-PAD positions

  int length() const { return (int)ids.size(); }
};

TokenSeq encode(const std::string& url, const Vocab& v, int max_len);

enum class ReplaceKind { Mask, Random, Keep };

// A TokenSeq after masking corruption; the original ids are recoverable.
struct MaskedSeq {
  std::vector<int> ids;
  std::vector<int> attn_mask;
  std::vector<int> mask_positions;
  std::vector<int> original_ids;
  std::vector<ReplaceKind> kinds;

  TokenSeq restored() const {
    TokenSeq s{ids, attn_mask};
    for (size_t i = 0; i < mask_positions.size(); ++i)
      s.ids[(size_t)mask_positions[i]] = original_ids[i];
    return s;
  }
};

// Standard masking protocol: each maskable position picked independently at
// `rate` (at least one is forced), then 80% MASK / 10% random / 10% kept.
MaskedSeq mask_tokens(const TokenSeq& s, const Vocab& v, double rate, uint64_t seed);

}  // namespace curlip
