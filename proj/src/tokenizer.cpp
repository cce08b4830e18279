#include "curlip/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "curlip/rng.hpp"

namespace curlip {

namespace {

const char* kSpecialNames[Vocab::kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
constexpr const char* kMergesSentinel = "#MERGES";

std::string escape_piece(const std::string& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    const unsigned char c = (unsigned char)s[i];
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\r') {
      out += "\\r";
    } else if (c < 0x20 || c >= 0x7f || (i == 0 && c == '[')) {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\x%02x", c);
      out += buf;
    } else {
      out.push_back((char)c);
    }
  }
  return out;
}

std::string unescape_piece(const std::string& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (i + 1 >= s.size()) throw SchemaError("dangling escape in vocab piece");
    const char c = s[++i];
    if (c == '\\') {
      out.push_back('\\');
    } else if (c == 'n') {
      out.push_back('\n');
    } else if (c == 'r') {
      out.push_back('\r');
    } else if (c == 'x') {
      if (i + 2 >= s.size()) throw SchemaError("truncated \\x escape in vocab piece");
      out.push_back((char)std::stoi(s.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      throw SchemaError("unknown escape in vocab piece");
    }
  }
  return out;
}

}  // namespace

void Vocab::rebuild_index() {
  id_of_.clear();
  max_piece_len_ = 1;
  for (int id = kNumSpecials; id < (int)pieces_.size(); ++id) {
    id_of_[pieces_[(size_t)id]] = id;
    max_piece_len_ = std::max(max_piece_len_, pieces_[(size_t)id].size());
  }
}

Vocab Vocab::train(const std::vector<std::string>& corpus, int vocab_size, uint64_t seed) {
  if (vocab_size < kMinSize)
    throw VocabTooSmall("vocab_size must be at least " + std::to_string(kMinSize) + ", got " +
                        std::to_string(vocab_size));

  Vocab v;
  for (const char* s : kSpecialNames) v.pieces_.emplace_back(s);
  for (int b = 0; b < 256; ++b) v.pieces_.push_back(std::string(1, (char)b));

  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& text : corpus) {
    std::vector<int> seq;
    seq.reserve(text.size());
    for (unsigned char c : text) seq.push_back(kNumSpecials + (int)c);
    if (!seq.empty()) seqs.push_back(std::move(seq));
  }

  Rng rng(seed);
  while ((int)v.pieces_.size() < vocab_size) {
    std::map<std::pair<int, int>, int64_t> counts;
    for (const auto& seq : seqs)
      for (size_t i = 0; i + 1 < seq.size(); ++i)
        counts[{seq[i], seq[i + 1]}] += 1;
    if (counts.empty()) break;

    int64_t best = 0;
    for (const auto& [_, c] : counts) best = std::max(best, c);
    if (best < 2) break;  // nothing left that repeats

    std::vector<std::pair<int, int>> candidates;
    for (const auto& [pair, c] : counts)
      if (c == best) candidates.push_back(pair);
    // candidates iterate in sorted order already (std::map); ties go to the seed
    const auto chosen = candidates[(size_t)rng.uniform_int(candidates.size())];

    const int new_id = (int)v.pieces_.size();
    v.pieces_.push_back(v.pieces_[(size_t)chosen.first] + v.pieces_[(size_t)chosen.second]);
    v.merges_.push_back(chosen);

    for (auto& seq : seqs) {
      std::vector<int> next;
      next.reserve(seq.size());
      for (size_t i = 0; i < seq.size();) {
        if (i + 1 < seq.size() && seq[i] == chosen.first && seq[i + 1] == chosen.second) {
          next.push_back(new_id);
          i += 2;
        } else {
          next.push_back(seq[i]);
          i += 1;
        }
      }
      seq = std::move(next);
    }
  }
  v.rebuild_index();
  return v;
}

std::vector<int> Vocab::segment(const std::string& text) const {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    const size_t longest = std::min(max_piece_len_, text.size() - i);
    int id = -1;
    size_t len = 1;
    for (size_t l = longest; l >= 1; --l) {
      auto it = id_of_.find(text.substr(i, l));
      if (it != id_of_.end()) {
        id = it->second;
        len = l;
        break;
      }
    }
    // byte fallback guarantees a hit at length 1
    out.push_back(id);
    i += len;
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw SchemaError("decode: id out of range");
    if (id < kNumSpecials) continue;
    out += pieces_[(size_t)id];
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file: " + path);
  for (int id = 0; id < size(); ++id) {
    if (id < kNumSpecials)
      out << pieces_[(size_t)id] << '\n';
    else
      out << escape_piece(pieces_[(size_t)id]) << '\n';
  }
  out << kMergesSentinel << '\n';
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  if (!out) throw IoError("failed writing vocab file: " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab file: " + path);
  Vocab v;
  std::string line;
  bool in_merges = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == kMergesSentinel) {
      in_merges = true;
      continue;
    }
    if (!in_merges) {
      if ((int)v.pieces_.size() < kNumSpecials) {
        if (line != kSpecialNames[v.pieces_.size()])
          throw SchemaError("vocab file: special line " + std::to_string(v.pieces_.size()) +
                            " must be " + kSpecialNames[v.pieces_.size()]);
        v.pieces_.push_back(line);
      } else {
        v.pieces_.push_back(unescape_piece(line));
      }
    } else {
      if (line.empty()) continue;
      const size_t sp = line.find(' ');
      if (sp == std::string::npos) throw SchemaError("vocab file: bad merge line '" + line + "'");
      v.merges_.emplace_back(std::stoi(line.substr(0, sp)), std::stoi(line.substr(sp + 1)));
    }
  }
  if ((int)v.pieces_.size() < kMinSize)
    throw SchemaError("vocab file holds fewer than " + std::to_string(kMinSize) + " pieces");
  if (v.pieces_.size() != (size_t)kMinSize + v.merges_.size())
    throw SchemaError("vocab file: merge count does not match piece count");
  v.rebuild_index();
  return v;
}

TokenSeq encode(const std::string& url, const Vocab& v, int max_len) {
  if (max_len < 3) throw Error("encode: max_len must be at least 3");
  std::vector<int> pieces = v.segment(url);
  const int payload = std::min((int)pieces.size(), max_len - 2);
  TokenSeq s;
  s.ids.reserve((size_t)max_len);
  s.ids.push_back(Vocab::kCls);
  for (int i = 0; i < payload; ++i) s.ids.push_back(pieces[(size_t)i]);
  s.ids.push_back(Vocab::kSep);
  while ((int)s.ids.size() < max_len) s.ids.push_back(Vocab::kPad);
  s.attn_mask.assign((size_t)max_len, 0);
  for (int i = 0; i < payload + 2; ++i) s.attn_mask[(size_t)i] = 1;
  return s;
}

MaskedSeq mask_tokens(const TokenSeq& s, const Vocab& v, double rate, uint64_t seed) {
  if (rate <= 0.0 || rate >= 1.0) throw Error("mask_tokens: rate must be in (0,1)");
  std::vector<int> maskable;
  for (size_t i = 0; i < s.ids.size(); ++i) {
    const int id = s.ids[i];
    if (id != Vocab::kPad && id != Vocab::kCls && id != Vocab::kSep) maskable.push_back((int)i);
  }
  if (maskable.empty()) throw NoMaskablePositions("sequence has no maskable tokens");

  Rng rng(seed);
  std::vector<int> selected;
  for (int pos : maskable)
    if (rng.bernoulli(rate)) selected.push_back(pos);
  if (selected.empty())
    selected.push_back(maskable[(size_t)rng.uniform_int(maskable.size())]);

  MaskedSeq m;
  m.ids = s.ids;
  m.attn_mask = s.attn_mask;
  const int n_normal = v.size() - Vocab::kNumSpecials;
  for (int pos : selected) {
    m.mask_positions.push_back(pos);
    m.original_ids.push_back(s.ids[(size_t)pos]);
    const double u = rng.uniform();
    if (u < 0.8) {
      m.ids[(size_t)pos] = Vocab::kMask;
      m.kinds.push_back(ReplaceKind::Mask);
    } else if (u < 0.9) {
      m.ids[(size_t)pos] = Vocab::kNumSpecials + (int)rng.uniform_int((uint64_t)n_normal);
      m.kinds.push_back(ReplaceKind::Random);
    } else {
      m.kinds.push_back(ReplaceKind::Keep);
    }
  }
  return m;
}

}  // namespace curlip
