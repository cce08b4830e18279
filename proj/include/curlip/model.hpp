#pragma once
#include <type_traits>

#include <vector>

#include "curlip/bmmc.hpp"
#include "curlip/clmsa.hpp"
#include "curlip/encoder.hpp"
#include "curlip/ip_featurizer.hpp"
#include "curlip/url_corpus.hpp"

namespace curlip {

// Whole classifier: encoder + cross-layer aggregator + IP branch + coupler +
// head. Parameter creation order is fixed so seeded init is reproducible.
template <typename T>
void init_model_params(ModelState<T>& state, Rng& rng) {
  const RunConfig& cfg = state.config;
  cfg.validate();
  if ((int64_t)cfg.clmsa.proj_dim < 1) throw ConfigError("clmsa.proj_dim must be positive");
  init_encoder_params(state, cfg.encoder, rng);
  init_clmsa_params(state, cfg.clmsa, cfg.encoder, rng);
  init_bmmc_params(state, cfg.bmmc, cfg.clmsa.proj_dim, rng);
}

template <typename T>
void init_pretrain_params(ModelState<T>& state, Rng& rng) {
  state.config.validate();
  init_encoder_params(state, state.config.encoder, rng);
  init_mlm_params(state, state.config.encoder, rng);
}

// Builds the (B,F) IP feature tensor; records without an address contribute a
// zero row (projected through the branch this stays exactly zero).
template <typename T>
Tensor<T> ip_features_for(const std::vector<const UrlRecord*>& records) {
  Tensor<T> t({(int64_t)records.size(), (int64_t)kIpFeatureDim});
  for (size_t i = 0; i < records.size(); ++i) {
    if (!records[i]->ip) continue;
    const IpFeature f = ip_embed_input(*records[i]->ip);
    for (int d = 0; d < kIpFeatureDim; ++d) t.at((int64_t)(i * kIpFeatureDim + d)) = (T)f.values[(size_t)d];
  }
  return t;
}

template <typename T>
struct ModelOut {
  typename Tape<T>::Var logits;
  typename Tape<T>::Var f_url;
  typename Tape<T>::Var f_ip;
  typename Tape<T>::Var alpha;
};

template <typename T>
ModelOut<T> model_forward(Tape<T>& tape, const TokenBatch& batch, const Tensor<T>& ip_feats,
                          const ParamVars<T>& pv, const ModelState<T>& state, bool training,
                          Rng* rng, std::type_identity_t<BnUpdates<T>>* bn_updates,
                          ShapeTrace* trace = nullptr, bool zero_ip = false) {
  const RunConfig& cfg = state.config;
  auto enc = encoder_forward(tape, batch, pv, cfg.encoder, training, rng);
  auto f_url = clmsa_forward(tape, enc.hidden_stack, pv, state, cfg.clmsa, training, bn_updates,
                             trace);
  typename Tape<T>::Var feats =
      zero_ip ? tape.constant(Tensor<T>::zeros(ip_feats.shape())) : tape.constant(ip_feats);
  auto f_ip = ip_branch(tape, feats, pv);
  if (trace) trace->add("f_ip", tape.val(f_ip).shape());
  auto out = bmmc_forward(tape, f_url, f_ip, pv, state, cfg.bmmc, training, rng, bn_updates,
                          trace);
  ModelOut<T> r;
  r.logits = out.logits;
  r.f_url = f_url;
  r.f_ip = f_ip;
  r.alpha = out.alpha;
  return r;
}

inline int class_label(const UrlRecord& rec, int n_classes) {
  if (n_classes == 2) return rec.label == Label::Benign ? 0 : 1;
  switch (rec.label) {
    case Label::Benign: return 0;
    case Label::Malicious: return 1;
    case Label::Phishing: return 2;
  }
  return 0;
}

}  // namespace curlip
