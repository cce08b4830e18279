#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "curlip/model.hpp"

namespace curlip {

inline std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx((size_t)n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(idx[(size_t)i], idx[(size_t)rng.uniform_int((uint64_t)i + 1)]);
  return idx;
}

// ---- pretraining ------------------------------------------------------------

struct PretrainLogRow {
  int64_t step;
  double mlm;
  double tacl;
  double total;
};

struct PretrainResult {
  ModelStateF student;
  ModelStateF teacher;  // frozen snapshot of the initialization
  std::vector<PretrainLogRow> log;
  uint64_t teacher_checksum_before = 0;
  uint64_t teacher_checksum_after = 0;
};

// Student/teacher pretraining: the teacher is a frozen copy of the student's
// initial weights; each step runs the teacher on the clean batch, the student
// on the corrupted batch, and updates the student with AdamW.
inline PretrainResult pretrain(const std::vector<std::string>& urls, const Vocab& vocab,
                               RunConfig cfg, int steps, double lr, uint64_t seed) {
  if (urls.empty()) throw EmptyInput("pretrain: empty corpus");
  cfg.encoder.vocab_size = vocab.size();
  cfg.validate();

  PretrainResult res;
  res.student.config = cfg;
  Rng init_rng(seed);
  init_pretrain_params(res.student, init_rng);
  res.teacher = res.student;
  res.teacher.moments.clear();
  for (auto& [_, p] : res.teacher.params) p.trainable = false;
  res.teacher_checksum_before = res.teacher.checksum();

  std::vector<TokenSeq> encoded;
  encoded.reserve(urls.size());
  for (const auto& u : urls) encoded.push_back(encode(u, vocab, cfg.encoder.max_len));

  Rng order_rng(seed ^ 0x5eed0001ULL);
  Rng mask_seed_rng(seed ^ 0x5eed0002ULL);
  Rng drop_rng(seed ^ 0x5eed0003ULL);
  std::vector<int64_t> order = shuffled_indices((int64_t)urls.size(), order_rng);
  size_t cursor = 0;

  const int B = cfg.train.batch_size;
  for (int step = 0; step < steps; ++step) {
    std::vector<TokenSeq> clean;
    std::vector<MaskedSeq> corrupted;
    for (int i = 0; i < B; ++i) {
      if (cursor == order.size()) {
        order = shuffled_indices((int64_t)urls.size(), order_rng);
        cursor = 0;
      }
      const TokenSeq& s = encoded[(size_t)order[cursor++]];
      clean.push_back(s);
      corrupted.push_back(mask_tokens(s, vocab, cfg.train.mask_rate, mask_seed_rng.next_u64()));
    }
    TokenBatch clean_b = make_batch(clean);
    TokenBatch masked_b = make_masked_batch(corrupted);

    Tape<float> tape;
    auto teacher_pv = lift_params(tape, res.teacher, /*requires_grad=*/false);
    auto student_pv = lift_params(tape, res.student, /*requires_grad=*/true);
    auto teacher_out = encoder_forward(tape, clean_b, teacher_pv, cfg.encoder, false, nullptr);
    auto student_out =
        encoder_forward(tape, masked_b, student_pv, cfg.encoder, true, &drop_rng);
    auto logits = mlm_logits(tape, student_out.final_states, student_pv);
    auto l_mlm = mlm_loss(tape, logits, masked_b);
    typename Tape<float>::Var l_tacl{};
    if (cfg.train.lambda_tacl > 0.0)
      l_tacl = tacl_loss(tape, student_out.final_states, teacher_out.final_states, masked_b,
                         cfg.train.tau);
    auto total = total_pretrain_loss(tape, l_mlm, l_tacl, cfg.train.lambda_tacl);

    res.student.zero_grads();
    tape.backward(total);
    harvest_grads(tape, student_pv, res.student);
    adamw_step(res.student, lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay);

    res.log.push_back({step, tape.scalar(l_mlm),
                       l_tacl.valid() ? tape.scalar(l_tacl) : 0.0, tape.scalar(total)});
  }
  res.teacher_checksum_after = res.teacher.checksum();
  return res;
}

// ---- classifier training ----------------------------------------------------

struct EpochLogRow {
  int epoch;
  double train_loss;
  double val_loss;
};

struct FinetuneResult {
  ModelStateF best_state;
  std::vector<EpochLogRow> log;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
};

struct EncodedDataset {
  std::vector<TokenSeq> tokens;
  std::vector<int> labels;
  const Dataset* source = nullptr;
};

inline EncodedDataset encode_dataset(const Dataset& ds, const Vocab& vocab, int max_len,
                                     int n_classes) {
  EncodedDataset out;
  out.source = &ds;
  out.tokens.reserve(ds.records.size());
  for (const auto& r : ds.records) {
    out.tokens.push_back(encode(r.raw, vocab, max_len));
    out.labels.push_back(class_label(r, n_classes));
  }
  return out;
}

// Mean cross-entropy over a dataset in inference mode.
inline double dataset_ce_loss(const ModelStateF& state, const EncodedDataset& data,
                              int batch_size, bool zero_ip = false) {
  const int64_t n = (int64_t)data.tokens.size();
  double total = 0.0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(n, start + batch_size);
    std::vector<TokenSeq> seqs(data.tokens.begin() + start, data.tokens.begin() + end);
    std::vector<const UrlRecord*> recs;
    std::vector<int> labels;
    for (int64_t i = start; i < end; ++i) {
      recs.push_back(&data.source->records[(size_t)i]);
      labels.push_back(data.labels[(size_t)i]);
    }
    TokenBatch b = make_batch(seqs);
    Tape<float> tape;
    auto pv = lift_params(tape, state, false);
    auto out = model_forward(tape, b, ip_features_for<float>(recs), pv, state, false, nullptr,
                             nullptr, nullptr, zero_ip);
    auto loss = cross_entropy(tape, out.logits, labels);
    total += tape.scalar(loss) * (double)(end - start);
  }
  return total / (double)n;
}

// End-to-end training of the full classifier with per-epoch validation and
// best-validation-loss model selection.
inline FinetuneResult finetune(const Dataset& train, const Dataset& val, const Vocab& vocab,
                               const std::optional<ModelStateF>& pretrained, RunConfig cfg,
                               int epochs, double lr, uint64_t seed) {
  cfg.encoder.vocab_size = vocab.size();
  cfg.validate();

  ModelStateF state;
  state.config = cfg;
  Rng init_rng(seed);
  init_model_params(state, init_rng);
  if (pretrained) {
    for (auto& [name, p] : state.params) {
      if (name.rfind("enc.", 0) != 0) continue;
      if (!pretrained->has(name)) throw Error("pretrained checkpoint lacks parameter " + name);
      const auto& src = pretrained->at(name).value;
      if (!src.same_shape(p.value))
        throw ShapeMismatch("pretrained parameter " + name + " has shape " +
                            shape_str(src.shape()) + ", expected " + shape_str(p.value.shape()));
      p.value = src;
    }
  }

  EncodedDataset train_enc = encode_dataset(train, vocab, cfg.encoder.max_len, cfg.bmmc.n_classes);
  EncodedDataset val_enc = encode_dataset(val, vocab, cfg.encoder.max_len, cfg.bmmc.n_classes);

  FinetuneResult res;
  res.best_state = state;
  if (epochs == 0) {
    res.best_val_loss = val_enc.tokens.empty() ? 0.0
                                               : dataset_ce_loss(state, val_enc,
                                                                 cfg.train.batch_size);
    res.best_state.stored_val_loss = res.best_val_loss;
    return res;
  }

  Rng order_rng(seed ^ 0xf17e0001ULL);
  Rng drop_rng(seed ^ 0xf17e0002ULL);
  const int B = cfg.train.batch_size;
  const int64_t n = (int64_t)train_enc.tokens.size();

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int64_t> order = shuffled_indices(n, order_rng);
    double epoch_loss = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < n; start += B) {
      const int64_t end = std::min(n, start + (int64_t)B);
      std::vector<TokenSeq> seqs;
      std::vector<const UrlRecord*> recs;
      std::vector<int> labels;
      for (int64_t i = start; i < end; ++i) {
        const int64_t j = order[(size_t)i];
        seqs.push_back(train_enc.tokens[(size_t)j]);
        recs.push_back(&train.records[(size_t)j]);
        labels.push_back(train_enc.labels[(size_t)j]);
      }
      TokenBatch b = make_batch(seqs);
      Tape<float> tape;
      auto pv = lift_params(tape, state, true);
      BnUpdates<float> bn;
      auto out = model_forward(tape, b, ip_features_for<float>(recs), pv, state, true, &drop_rng,
                               &bn);
      auto loss = cross_entropy(tape, out.logits, labels);
      state.zero_grads();
      tape.backward(loss);
      harvest_grads(tape, pv, state);
      adamw_step(state, lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay);
      bn.apply(state);
      epoch_loss += tape.scalar(loss) * (double)(end - start);
      seen += end - start;
    }
    const double train_loss = epoch_loss / (double)seen;
    const double val_loss =
        val_enc.tokens.empty() ? train_loss : dataset_ce_loss(state, val_enc, B);
    res.log.push_back({epoch, train_loss, val_loss});
    if (val_loss < res.best_val_loss) {
      res.best_val_loss = val_loss;
      res.best_epoch = epoch;
      res.best_state = state;
    }
  }
  res.best_state.stored_val_loss = res.best_val_loss;
  return res;
}

// ---- scoring ----------------------------------------------------------------

struct ScoredDataset {
  std::vector<std::vector<double>> probs;  // (N, n_classes)
  std::vector<int> labels;
};

inline ScoredDataset score_dataset(const ModelStateF& state, const Dataset& ds, const Vocab& vocab,
                                   bool zero_ip = false, int batch_size = 64) {
  const RunConfig& cfg = state.config;
  ScoredDataset out;
  const int64_t n = ds.size();
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(n, start + (int64_t)batch_size);
    std::vector<TokenSeq> seqs;
    std::vector<const UrlRecord*> recs;
    for (int64_t i = start; i < end; ++i) {
      seqs.push_back(encode(ds.records[(size_t)i].raw, vocab, cfg.encoder.max_len));
      recs.push_back(&ds.records[(size_t)i]);
    }
    TokenBatch b = make_batch(seqs);
    Tape<float> tape;
    auto pv = lift_params(tape, state, false);
    auto fwd = model_forward(tape, b, ip_features_for<float>(recs), pv, state, false, nullptr,
                             nullptr, nullptr, zero_ip);
    auto probs = tape.softmax(fwd.logits, 1);
    const auto& pvl = tape.val(probs);
    for (int64_t i = 0; i < end - start; ++i) {
      std::vector<double> row((size_t)cfg.bmmc.n_classes);
      for (int c = 0; c < cfg.bmmc.n_classes; ++c) row[(size_t)c] = (double)pvl(i, c);
      out.probs.push_back(std::move(row));
      out.labels.push_back(class_label(ds.records[(size_t)(start + i)], cfg.bmmc.n_classes));
    }
  }
  return out;
}

}  // namespace curlip
