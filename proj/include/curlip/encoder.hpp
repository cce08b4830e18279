#pragma once

#include <memory>
#include <string>
#include <vector>

#include "curlip/model_state.hpp"
#include "curlip/tokenizer.hpp"

namespace curlip {

// A batch of sequences flattened to (B,T) row-major, plus mask bookkeeping
// for corrupted batches.
struct TokenBatch {
  int64_t batch = 0;
  int64_t len = 0;
  std::shared_ptr<std::vector<int32_t>> ids;    // B*T
  std::vector<float> attn;                      // B*T, 1.0 on non-PAD

  // Masked-batch extras; empty for clean batches.
  std::vector<int64_t> mask_rows_flat;          // b*len + t per masked position
  std::vector<int64_t> mask_original;           // original id per masked position
  std::vector<int64_t> masked_per_example;
};

inline TokenBatch make_batch(const std::vector<TokenSeq>& seqs) {
  TokenBatch b;
  b.batch = (int64_t)seqs.size();
  b.len = seqs.empty() ? 0 : (int64_t)seqs[0].ids.size();
  b.ids = std::make_shared<std::vector<int32_t>>();
  b.ids->reserve((size_t)(b.batch * b.len));
  b.attn.reserve((size_t)(b.batch * b.len));
  for (const auto& s : seqs) {
    if ((int64_t)s.ids.size() != b.len)
      throw ShapeMismatch("make_batch: ragged sequence lengths");
    for (int id : s.ids) b.ids->push_back((int32_t)id);
    for (int a : s.attn_mask) b.attn.push_back((float)a);
  }
  return b;
}

inline TokenBatch make_masked_batch(const std::vector<MaskedSeq>& seqs) {
  TokenBatch b;
  b.batch = (int64_t)seqs.size();
  b.len = seqs.empty() ? 0 : (int64_t)seqs[0].ids.size();
  b.ids = std::make_shared<std::vector<int32_t>>();
  for (int64_t e = 0; e < b.batch; ++e) {
    const auto& s = seqs[(size_t)e];
    if ((int64_t)s.ids.size() != b.len)
      throw ShapeMismatch("make_masked_batch: ragged sequence lengths");
    for (int id : s.ids) b.ids->push_back((int32_t)id);
    for (int a : s.attn_mask) b.attn.push_back((float)a);
    for (size_t k = 0; k < s.mask_positions.size(); ++k) {
      b.mask_rows_flat.push_back(e * b.len + s.mask_positions[k]);
      b.mask_original.push_back(s.original_ids[k]);
    }
    b.masked_per_example.push_back((int64_t)s.mask_positions.size());
  }
  return b;
}

template <typename T>
std::shared_ptr<Tensor<T>> attn_mask_tensor(const TokenBatch& b) {
  auto t = std::make_shared<Tensor<T>>(Shape{b.batch, b.len});
  for (int64_t i = 0; i < b.batch * b.len; ++i) t->at(i) = (T)b.attn[(size_t)i];
  return t;
}

// Additive key bias: 0 on real tokens, a large negative value on padding.
template <typename T>
std::shared_ptr<Tensor<T>> key_bias_tensor(const TokenBatch& b) {
  auto t = std::make_shared<Tensor<T>>(Shape{b.batch, b.len});
  for (int64_t i = 0; i < b.batch * b.len; ++i)
    t->at(i) = b.attn[(size_t)i] > 0.5f ? T(0) : (T)-1e9;
  return t;
}

// ---- parameters -----------------------------------------------------------

template <typename T>
void init_encoder_params(ModelState<T>& state, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t D = cfg.hidden, V = cfg.vocab_size, Tl = cfg.max_len;
  const int64_t F = (int64_t)cfg.ffn_mult * D;
  auto rnd = [&rng](Shape s, double sigma) { return Tensor<T>::randn(std::move(s), rng, sigma); };
  state.add("enc.tok_emb", rnd({V, D}, 0.02));
  state.add("enc.pos_emb", rnd({Tl, D}, 0.02));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    state.add(p + "ln1.g", Tensor<T>::full({D}, T(1)));
    state.add(p + "ln1.b", Tensor<T>::zeros({D}));
    state.add(p + "wq", rnd({D, D}, 0.02));
    state.add(p + "bq", Tensor<T>::zeros({D}));
    // no key bias: softmax is invariant to a per-query constant shift, so a
    // key-side bias can never receive gradient
    state.add(p + "wk", rnd({D, D}, 0.02));
    state.add(p + "wv", rnd({D, D}, 0.02));
    state.add(p + "bv", Tensor<T>::zeros({D}));
    state.add(p + "wo", rnd({D, D}, 0.02));
    state.add(p + "bo", Tensor<T>::zeros({D}));
    state.add(p + "ln2.g", Tensor<T>::full({D}, T(1)));
    state.add(p + "ln2.b", Tensor<T>::zeros({D}));
    state.add(p + "w1", rnd({D, F}, 0.02));
    state.add(p + "b1", Tensor<T>::zeros({F}));
    state.add(p + "w2", rnd({F, D}, 0.02));
    state.add(p + "b2", Tensor<T>::zeros({D}));
  }
  state.add("enc.lnf.g", Tensor<T>::full({D}, T(1)));
  state.add("enc.lnf.b", Tensor<T>::zeros({D}));
}

template <typename T>
void init_mlm_params(ModelState<T>& state, const EncoderConfig& cfg, Rng& rng) {
  state.add("mlm.w", Tensor<T>::randn({(int64_t)cfg.hidden, (int64_t)cfg.vocab_size}, rng, 0.02));
  state.add("mlm.b", Tensor<T>::zeros({(int64_t)cfg.vocab_size}));
}

// ---- forward --------------------------------------------------------------

template <typename T>
struct EncoderOut {
  typename Tape<T>::Var hidden_stack;                 // (B,L,T,D)
  typename Tape<T>::Var final_states;                 // (B,T,D)
  std::vector<typename Tape<T>::Var> layer_outputs;   // each (B,T,D)
};

// Pre-norm bidirectional transformer. Padded positions are masked out of the
// attention logits and zeroed in the residual stream, so every returned state
// is invariant to the id values stored at padding slots.
template <typename T>
EncoderOut<T> encoder_forward(Tape<T>& tape, const TokenBatch& batch, const ParamVars<T>& pv,
                              const EncoderConfig& cfg, bool training, Rng* dropout_rng) {
  using Var = typename Tape<T>::Var;
  if (batch.len != cfg.max_len)
    throw ShapeMismatch("encoder_forward: sequence length " + std::to_string(batch.len) +
                        " does not match configured " + std::to_string(cfg.max_len));
  const int64_t B = batch.batch, Tl = batch.len, D = cfg.hidden, H = cfg.n_heads;
  const int64_t hd = D / H;
  auto attn01 = attn_mask_tensor<T>(batch);
  auto key_bias = key_bias_tensor<T>(batch);
  const bool drop = training && cfg.dropout > 0.0 && dropout_rng != nullptr;

  Var x = tape.embedding(pv.at("enc.tok_emb"), batch.ids, B, Tl);
  x = tape.add_pos(x, pv.at("enc.pos_emb"));
  x = tape.mask_rows(x, attn01);
  if (drop) x = tape.dropout(x, cfg.dropout, *dropout_rng);

  EncoderOut<T> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l) + ".";
    Var a = tape.layernorm(x, pv.at(p + "ln1.g"), pv.at(p + "ln1.b"));
    Var q = tape.linear(a, pv.at(p + "wq"), pv.at(p + "bq"));
    Var k = tape.linear(a, pv.at(p + "wk"));
    Var v = tape.linear(a, pv.at(p + "wv"), pv.at(p + "bv"));
    auto heads = [&](Var m) {
      m = tape.reshape(m, {B, Tl, H, hd});
      m = tape.permute(m, {0, 2, 1, 3});
      return tape.reshape(m, {B * H, Tl, hd});
    };
    Var qh = heads(q), kh = heads(k), vh = heads(v);
    Var scores = tape.matmul_nt(qh, kh);
    scores = tape.scale(scores, 1.0 / std::sqrt((double)hd));
    scores = tape.add_key_bias(scores, key_bias);
    Var w = tape.softmax(scores, 2);
    Var ctx = tape.matmul(w, vh);
    ctx = tape.reshape(ctx, {B, H, Tl, hd});
    ctx = tape.permute(ctx, {0, 2, 1, 3});
    ctx = tape.reshape(ctx, {B, Tl, D});
    Var o = tape.linear(ctx, pv.at(p + "wo"), pv.at(p + "bo"));
    if (drop) o = tape.dropout(o, cfg.dropout, *dropout_rng);
    x = tape.add(x, o);
    x = tape.mask_rows(x, attn01);

    Var f = tape.layernorm(x, pv.at(p + "ln2.g"), pv.at(p + "ln2.b"));
    f = tape.linear(f, pv.at(p + "w1"), pv.at(p + "b1"));
    f = tape.gelu(f);
    f = tape.linear(f, pv.at(p + "w2"), pv.at(p + "b2"));
    if (drop) f = tape.dropout(f, cfg.dropout, *dropout_rng);
    x = tape.add(x, f);
    x = tape.mask_rows(x, attn01);
    out.layer_outputs.push_back(x);
  }
  out.hidden_stack = tape.stack_dim1(out.layer_outputs);
  Var fin = tape.layernorm(x, pv.at("enc.lnf.g"), pv.at("enc.lnf.b"));
  out.final_states = tape.mask_rows(fin, attn01);
  return out;
}

template <typename T>
typename Tape<T>::Var mlm_logits(Tape<T>& tape, typename Tape<T>::Var final_states,
                                 const ParamVars<T>& pv) {
  return tape.linear(final_states, pv.at("mlm.w"), pv.at("mlm.b"));
}

// ---- pretraining losses ---------------------------------------------------

// Token contrastive loss: every masked student state is pulled toward its
// clean teacher counterpart and pushed from the other non-PAD teacher states
// of the same sequence. Summed over masked positions, averaged over the batch.
template <typename T>
typename Tape<T>::Var tacl_loss(Tape<T>& tape, typename Tape<T>::Var student_final,
                                typename Tape<T>::Var teacher_final, const TokenBatch& masked,
                                double tau) {
  if (tau <= 0.0) throw Error("tacl_loss: tau must be positive");
  if (masked.mask_rows_flat.empty()) throw EmptyMaskSet("tacl_loss: no masked positions");
  for (int64_t c : masked.masked_per_example)
    if (c == 0) throw EmptyMaskSet("tacl_loss: an example has no masked positions");
  const auto& sv = tape.val(student_final);
  const int64_t B = sv.dim(0), Tl = sv.dim(1);
  auto key_bias = key_bias_tensor<T>(masked);

  auto sn = tape.l2_normalize_rows(student_final);
  auto tn = tape.l2_normalize_rows(teacher_final);
  auto sims = tape.matmul_nt(sn, tn);          // (B,T,T) cosine matrix
  sims = tape.scale(sims, 1.0 / tau);
  sims = tape.add_key_bias(sims, key_bias);    // drop PAD negatives
  auto logp = tape.log_softmax(tape.reshape(sims, {B * Tl, Tl}));
  auto rows = std::make_shared<std::vector<int64_t>>(masked.mask_rows_flat);
  auto cols = std::make_shared<std::vector<int64_t>>();
  cols->reserve(rows->size());
  for (int64_t r : *rows) cols->push_back(r % Tl);
  auto picked = tape.pick(logp, rows, cols);
  return tape.scale(tape.reduce_sum(picked, 0), -1.0 / (double)B);
}

// Masked-LM loss: mean over masked positions of the negative log-probability
// of the original id.
template <typename T>
typename Tape<T>::Var mlm_loss(Tape<T>& tape, typename Tape<T>::Var logits,
                               const TokenBatch& masked) {
  if (masked.mask_rows_flat.empty()) throw EmptyMaskSet("mlm_loss: no masked positions");
  const auto& lv = tape.val(logits);
  const int64_t B = lv.dim(0), Tl = lv.dim(1), V = lv.dim(2);
  auto logp = tape.log_softmax(tape.reshape(logits, {B * Tl, V}));
  auto rows = std::make_shared<std::vector<int64_t>>(masked.mask_rows_flat);
  auto cols = std::make_shared<std::vector<int64_t>>(masked.mask_original);
  auto picked = tape.pick(logp, rows, cols);
  return tape.scale(tape.reduce_sum(picked, 0), -1.0 / (double)rows->size());
}

// mlm + lambda * tacl; with lambda == 0 the contrastive term is skipped so the
// total reduces to the MLM loss exactly.
template <typename T>
typename Tape<T>::Var total_pretrain_loss(Tape<T>& tape, typename Tape<T>::Var mlm,
                                          typename Tape<T>::Var tacl, double lambda) {
  if (lambda < 0.0) throw Error("total_pretrain_loss: lambda must be >= 0");
  if (lambda == 0.0 || !tacl.valid()) return mlm;
  return tape.add(mlm, tape.scale(tacl, lambda));
}

}  // namespace curlip
