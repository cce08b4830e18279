#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "curlip/clmsa.hpp"
#include "curlip/model_state.hpp"

namespace curlip {

inline int64_t bmmc_blocks_for(int64_t channels, int64_t block_size) {
  return (channels + block_size - 1) / block_size;
}

template <typename T>
void init_bmmc_params(ModelState<T>& state, const BmmcConfig& cfg, int feature_dim, Rng& rng) {
  cfg.validate();
  const int64_t df = feature_dim;
  const int64_t n_blocks = 2 * bmmc_blocks_for(df, cfg.block_size);
  state.add("bmmc.ip.w", Tensor<T>::randn({(int64_t)cfg.ip_dim, df}, rng,
                                          std::sqrt(2.0 / (double)cfg.ip_dim)));
  state.add("bmmc.joint.w", Tensor<T>::randn({(int64_t)cfg.block_size, (int64_t)cfg.joint_dim},
                                             rng, std::sqrt(2.0 / (double)cfg.block_size)));
  state.add("bmmc.joint.bn.g", Tensor<T>::full({(int64_t)cfg.joint_dim}, T(1)));
  state.add("bmmc.joint.bn.b", Tensor<T>::zeros({(int64_t)cfg.joint_dim}));
  state.add("bmmc.joint.bn.running_mean", Tensor<T>::zeros({(int64_t)cfg.joint_dim}), false);
  state.add("bmmc.joint.bn.running_var", Tensor<T>::full({(int64_t)cfg.joint_dim}, T(1)), false);
  state.add("bmmc.attn.w", Tensor<T>::randn({(int64_t)cfg.joint_dim, n_blocks}, rng, 0.02));
  state.add("bmmc.attn.b", Tensor<T>::zeros({n_blocks}));
  state.add("head.w", Tensor<T>::randn({2 * df, (int64_t)cfg.n_classes}, rng, 0.02));
  state.add("head.b", Tensor<T>::zeros({(int64_t)cfg.n_classes}));
}

// IP branch: a ReLU-activated projection of the raw IP features into the
// shared feature width.
template <typename T>
typename Tape<T>::Var ip_branch(Tape<T>& tape, typename Tape<T>::Var feats,
                                const ParamVars<T>& pv) {
  return tape.relu(tape.linear(feats, pv.at("bmmc.ip.w")));
}

// (B,C) feature vector -> zero-padded channel blocks (B,N,C_b,1).
template <typename T>
typename Tape<T>::Var partition_blocks(Tape<T>& tape, typename Tape<T>::Var features,
                                       int64_t block_size) {
  const auto& fv = tape.val(features);
  if (fv.rank() != 2)
    throw ShapeMismatch("partition_blocks: expected (B,C), got " + shape_str(fv.shape()));
  const int64_t B = fv.dim(0), C = fv.dim(1);
  const int64_t N = bmmc_blocks_for(C, block_size);
  auto x = tape.reshape(features, {B, C, 1});
  if (N * block_size != C) x = tape.pad_dim1(x, N * block_size);
  return tape.reshape(x, {B, N, block_size, 1});
}

// Per-modality context: sum the blocks and average over the spatial extent.
template <typename T>
typename Tape<T>::Var modality_context(Tape<T>& tape, typename Tape<T>::Var blocks) {
  const auto& bv = tape.val(blocks);
  if (bv.rank() != 4)
    throw ShapeMismatch("modality_context: expected (B,N,C_b,D), got " + shape_str(bv.shape()));
  const int64_t B = bv.dim(0), Cb = bv.dim(2);
  auto s = tape.reduce_sum(blocks, 1);          // (B,1,C_b,D)
  s = tape.reshape(s, {B, Cb, bv.dim(3)});
  s = tape.reduce_mean(s, 2);                   // (B,C_b,1)
  return tape.reshape(s, {B, Cb});
}

// Shared joint extractor over the summed modality contexts.
template <typename T>
typename Tape<T>::Var joint_context(Tape<T>& tape, typename Tape<T>::Var g_raw,
                                    const ParamVars<T>& pv, const ModelState<T>& state,
                                    bool training, std::type_identity_t<BnUpdates<T>>* bn_updates) {
  auto g = tape.linear(g_raw, pv.at("bmmc.joint.w"));
  typename Tape<T>::BnBatchStats stats;
  g = tape.batchnorm(g, pv.at("bmmc.joint.bn.g"), pv.at("bmmc.joint.bn.b"),
                     state.at("bmmc.joint.bn.running_mean").value,
                     state.at("bmmc.joint.bn.running_var").value, training, 1e-6,
                     training && bn_updates ? &stats : nullptr);
  if (training && bn_updates)
    bn_updates->items.push_back(
        {"bmmc.joint.bn.running_mean", "bmmc.joint.bn.running_var", stats});
  return tape.relu(g);
}

// Softmax over all blocks of all modalities, then rescaled into
// [alpha_min, 1] so no block is fully silenced.
template <typename T>
typename Tape<T>::Var block_attention(Tape<T>& tape, typename Tape<T>::Var g,
                                      const ParamVars<T>& pv, double alpha_min) {
  auto raw = tape.linear(g, pv.at("bmmc.attn.w"), pv.at("bmmc.attn.b"));
  auto sm = tape.softmax(raw, 1);
  if (alpha_min == 0.0) return sm;
  return tape.add_scalar(tape.scale(sm, 1.0 - alpha_min), alpha_min);
}

template <typename T>
struct BmmcOut {
  typename Tape<T>::Var url_feature;  // (B,d_f) after rescale
  typename Tape<T>::Var ip_feature;   // (B,d_f) after rescale
  typename Tape<T>::Var alpha;        // (B,N_total)
  typename Tape<T>::Var logits;       // (B,n_classes)
};

// Blockwise coupling of the two modality features followed by the
// classification head. During training each block additionally gets a
// Bernoulli keep mask (no inverse-p compensation at inference).
template <typename T>
BmmcOut<T> bmmc_forward(Tape<T>& tape, typename Tape<T>::Var f_url, typename Tape<T>::Var f_ip,
                        const ParamVars<T>& pv, const ModelState<T>& state, const BmmcConfig& cfg,
                        bool training, Rng* rng, std::type_identity_t<BnUpdates<T>>* bn_updates,
                        ShapeTrace* trace = nullptr) {
  const auto& uv = tape.val(f_url);
  const auto& iv = tape.val(f_ip);
  if (!uv.same_shape(iv))
    throw ShapeMismatch("bmmc_forward: modality shapes differ, " + shape_str(uv.shape()) +
                        " vs " + shape_str(iv.shape()));
  const int64_t B = uv.dim(0), C = uv.dim(1);
  const int64_t Cb = cfg.block_size;
  const int64_t N = bmmc_blocks_for(C, Cb);

  auto blocks_url = partition_blocks(tape, f_url, Cb);
  auto blocks_ip = partition_blocks(tape, f_ip, Cb);
  if (trace) trace->add("blocks", tape.val(blocks_url).shape());

  auto g_raw = tape.add(modality_context(tape, blocks_url), modality_context(tape, blocks_ip));
  if (trace) trace->add("g_raw", tape.val(g_raw).shape());
  auto g = joint_context(tape, g_raw, pv, state, training, bn_updates);
  auto alpha = block_attention(tape, g, pv, cfg.alpha_min);

  auto apply = [&](typename Tape<T>::Var blocks, int64_t offset) {
    auto a = tape.narrow_lastdim(alpha, offset, N);
    if (training && cfg.block_dropout > 0.0 && rng != nullptr) {
      Tensor<T> mask({B, N});
      for (int64_t i = 0; i < B * N; ++i)
        mask.at(i) = rng->bernoulli(1.0 - cfg.block_dropout) ? T(1) : T(0);
      a = tape.mul(a, tape.constant(std::move(mask)));
    }
    auto scaled = tape.block_scale(blocks, a);
    scaled = tape.reshape(scaled, {B, N * Cb, 1});
    if (N * Cb != C) scaled = tape.narrow_dim1(scaled, 0, C);
    return tape.reshape(scaled, {B, C});
  };

  BmmcOut<T> out;
  out.alpha = alpha;
  out.url_feature = apply(blocks_url, 0);
  out.ip_feature = apply(blocks_ip, N);
  out.logits = tape.linear(tape.concat_lastdim(out.url_feature, out.ip_feature), pv.at("head.w"),
                           pv.at("head.b"));
  if (trace) trace->add("logits", tape.val(out.logits).shape());
  return out;
}

// Mean cross-entropy over the batch.
template <typename T>
typename Tape<T>::Var cross_entropy(Tape<T>& tape, typename Tape<T>::Var logits,
                                    const std::vector<int>& labels) {
  const auto& lv = tape.val(logits);
  if (lv.rank() != 2 || lv.dim(0) != (int64_t)labels.size())
    throw ShapeMismatch("cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
  const int64_t B = lv.dim(0);
  auto logp = tape.log_softmax(logits);
  auto rows = std::make_shared<std::vector<int64_t>>();
  auto cols = std::make_shared<std::vector<int64_t>>();
  for (int64_t i = 0; i < B; ++i) {
    rows->push_back(i);
    cols->push_back(labels[(size_t)i]);
  }
  auto picked = tape.pick(logp, rows, cols);
  return tape.scale(tape.reduce_sum(picked, 0), -1.0 / (double)B);
}

}  // namespace curlip
