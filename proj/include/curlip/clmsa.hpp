#pragma once

#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include "curlip/model_state.hpp"

namespace curlip {

// Names and shapes of intermediate tensors, recorded on demand.
struct ShapeTrace {
  std::vector<std::pair<std::string, Shape>> entries;
  void add(const std::string& name, const Shape& s) { entries.emplace_back(name, s); }
  const Shape* find(const std::string& name) const {
    for (const auto& [n, s] : entries)
      if (n == name) return &s;
    return nullptr;
  }
};

// Batch-stat sink so a training step can refresh running estimates after the
// optimizer update. apply() uses the unbiased variance, momentum-weighted.
template <typename T>
struct BnUpdates {
  struct Item {
    std::string mean_name;
    std::string var_name;
    typename Tape<T>::BnBatchStats stats;
  };
  std::vector<Item> items;

  void apply(ModelState<T>& state, double momentum = 0.1) {
    for (const auto& it : items) {
      auto& rm = state.at(it.mean_name).value;
      auto& rv = state.at(it.var_name).value;
      for (int64_t i = 0; i < rm.numel(); ++i) {
        rm.at(i) = (T)((1.0 - momentum) * (double)rm.at(i) +
                       momentum * (double)it.stats.mean.at(i));
        rv.at(i) = (T)((1.0 - momentum) * (double)rv.at(i) +
                       momentum * (double)it.stats.var_unbiased.at(i));
      }
    }
  }
};

// Shared conv+batchnorm+relu step. Collects batch stats when training.
template <typename T>
typename Tape<T>::Var conv_bn_relu(Tape<T>& tape, typename Tape<T>::Var x, const ParamVars<T>& pv,
                                   const ModelState<T>& state, const std::string& prefix,
                                   bool training, std::type_identity_t<BnUpdates<T>>* bn_updates) {
  x = tape.conv2d(x, pv.at(prefix + ".w"));
  typename Tape<T>::BnBatchStats stats;
  x = tape.batchnorm(x, pv.at(prefix + ".bn.g"), pv.at(prefix + ".bn.b"),
                     state.at(prefix + ".bn.running_mean").value,
                     state.at(prefix + ".bn.running_var").value, training, 1e-6,
                     training && bn_updates ? &stats : nullptr);
  if (training && bn_updates)
    bn_updates->items.push_back({prefix + ".bn.running_mean", prefix + ".bn.running_var", stats});
  return tape.relu(x);
}

template <typename T>
void init_clmsa_params(ModelState<T>& state, const ClmsaConfig& cfg, const EncoderConfig& enc,
                       Rng& rng) {
  cfg.validate();
  int64_t cin = enc.n_layers;
  for (int i = 0; i < 4; ++i) {
    const int64_t cout = cfg.channel_pyramid[(size_t)i];
    const std::string p = "clmsa.conv" + std::to_string(i) + ".";
    state.add(p + "w", Tensor<T>::randn({cout, cin, 3, 3}, rng,
                                        std::sqrt(2.0 / (double)(cin * 9))));
    state.add(p + "bn.g", Tensor<T>::full({cout}, T(1)));
    state.add(p + "bn.b", Tensor<T>::zeros({cout}));
    state.add(p + "bn.running_mean", Tensor<T>::zeros({cout}), /*trainable=*/false);
    state.add(p + "bn.running_var", Tensor<T>::full({cout}, T(1)), /*trainable=*/false);
    cin = cout;
  }
  const int64_t flat = cfg.flat_width();
  const int64_t df = cfg.proj_dim;
  const int64_t e = (int64_t)cfg.gmlp_expansion * df;
  const int64_t half = e / 2;
  const int64_t P = cfg.pool_p;
  state.add("clmsa.proj.w", Tensor<T>::randn({flat, df}, rng, 0.02));
  state.add("clmsa.proj.b", Tensor<T>::zeros({df}));
  state.add("clmsa.gmlp.ln_in.g", Tensor<T>::full({df}, T(1)));
  state.add("clmsa.gmlp.ln_in.b", Tensor<T>::zeros({df}));
  state.add("clmsa.gmlp.fc_in.w", Tensor<T>::randn({df, e}, rng, 0.02));
  state.add("clmsa.gmlp.fc_in.b", Tensor<T>::zeros({e}));
  state.add("clmsa.gmlp.ln_gate.g", Tensor<T>::full({half}, T(1)));
  state.add("clmsa.gmlp.ln_gate.b", Tensor<T>::zeros({half}));
  // Spatial gate opens near identity: tiny weights, unit bias.
  state.add("clmsa.gmlp.spatial.w", Tensor<T>::randn({P, P}, rng, 1e-4));
  state.add("clmsa.gmlp.spatial.b", Tensor<T>::full({P}, T(1)));
  state.add("clmsa.gmlp.fc_out.w", Tensor<T>::randn({half, df}, rng, 0.02));
  state.add("clmsa.gmlp.fc_out.b", Tensor<T>::zeros({df}));
}

// Gated MLP over the token axis: channel expansion with GELU, a learned
// spatial mixing gate, channel projection back, residual add.
template <typename T>
typename Tape<T>::Var gmlp_block(Tape<T>& tape, typename Tape<T>::Var x, const ParamVars<T>& pv,
                                 const ClmsaConfig& cfg) {
  const auto& xv = tape.val(x);
  if (xv.rank() != 3 || xv.dim(2) != cfg.proj_dim)
    throw ShapeMismatch("gmlp_block: expected (B,P," + std::to_string(cfg.proj_dim) + "), got " +
                        shape_str(xv.shape()));
  const int64_t e = (int64_t)cfg.gmlp_expansion * cfg.proj_dim;
  const int64_t half = e / 2;
  auto shortcut = x;
  auto y = tape.layernorm(x, pv.at("clmsa.gmlp.ln_in.g"), pv.at("clmsa.gmlp.ln_in.b"));
  y = tape.linear(y, pv.at("clmsa.gmlp.fc_in.w"), pv.at("clmsa.gmlp.fc_in.b"));
  y = tape.gelu(y);
  auto u = tape.narrow_lastdim(y, 0, half);
  auto v = tape.narrow_lastdim(y, half, half);
  v = tape.layernorm(v, pv.at("clmsa.gmlp.ln_gate.g"), pv.at("clmsa.gmlp.ln_gate.b"));
  v = tape.token_mix(v, pv.at("clmsa.gmlp.spatial.w"), pv.at("clmsa.gmlp.spatial.b"));
  auto gated = tape.mul(u, v);
  auto o = tape.linear(gated, pv.at("clmsa.gmlp.fc_out.w"), pv.at("clmsa.gmlp.fc_out.b"));
  return tape.add(shortcut, o);
}

// Cross-layer aggregation: permute the layer stack, run the four-block conv
// pyramid, pool adaptively, project token-wise, gate with the gMLP, and mean
// over the token axis.
template <typename T>
typename Tape<T>::Var clmsa_forward(Tape<T>& tape, typename Tape<T>::Var hidden_stack,
                                    const ParamVars<T>& pv, const ModelState<T>& state,
                                    const ClmsaConfig& cfg, bool training,
                                    std::type_identity_t<BnUpdates<T>>* bn_updates,
                                    ShapeTrace* trace = nullptr) {
  const auto& hv = tape.val(hidden_stack);
  if (hv.rank() != 4)
    throw ShapeMismatch("clmsa_forward: expected (B,L,T,D), got " + shape_str(hv.shape()));
  const int64_t B = hv.dim(0);
  if (trace) trace->add("stack", hv.shape());

  auto x = tape.permute(hidden_stack, {0, 1, 3, 2});  // (B,L,D,T)
  if (trace) trace->add("permute", tape.val(x).shape());

  for (int i = 0; i < 4; ++i)
    x = conv_bn_relu(tape, x, pv, state, "clmsa.conv" + std::to_string(i), training, bn_updates);
  if (trace) trace->add("conv_pyramid", tape.val(x).shape());

  x = tape.adaptive_avg_pool2d(x, cfg.pool_p, cfg.pool_q);
  if (trace) trace->add("pool", tape.val(x).shape());

  x = tape.permute(x, {0, 2, 1, 3});  // (B,P,C,Q), channel-major within token
  x = tape.reshape(x, {B, (int64_t)cfg.pool_p, (int64_t)cfg.flat_width()});
  if (trace) trace->add("flat", tape.val(x).shape());

  x = tape.linear(x, pv.at("clmsa.proj.w"), pv.at("clmsa.proj.b"));
  if (trace) trace->add("proj", tape.val(x).shape());

  x = gmlp_block(tape, x, pv, cfg);
  if (trace) trace->add("gmlp", tape.val(x).shape());

  x = tape.reduce_mean(x, 1);
  x = tape.reshape(x, {B, (int64_t)cfg.proj_dim});
  if (trace) trace->add("f_url", tape.val(x).shape());
  return x;
}

}  // namespace curlip
