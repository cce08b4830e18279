#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "curlip/errors.hpp"

namespace curlip {

struct EncoderConfig {
  int n_layers = 4;
  int hidden = 64;
  int n_heads = 4;
  int ffn_mult = 2;
  int max_len = 64;
  int vocab_size = 512;
  double dropout = 0.1;

  void validate() const {
    if (hidden % n_heads != 0)
      throw ConfigError("encoder.hidden must be divisible by encoder.n_heads");
    if (n_layers < 1 || hidden < 1 || max_len < 3)
      throw ConfigError("encoder config out of range");
  }
};

struct ClmsaConfig {
  std::vector<int> channel_pyramid{16, 8, 8, 4};
  int pool_p = 8;
  int pool_q = 16;
  int proj_dim = 64;
  int gmlp_expansion = 2;

  int last_channels() const { return channel_pyramid.back(); }
  int flat_width() const { return last_channels() * pool_q; }

  void validate() const {
    if (channel_pyramid.size() != 4)
      throw ConfigError("clmsa.channel_pyramid must list exactly four block widths");
    for (int c : channel_pyramid)
      if (c < 1) throw ConfigError("clmsa.channel_pyramid entries must be positive");
    if (proj_dim < 1 || pool_p < 1 || pool_q < 1 || gmlp_expansion < 1)
      throw ConfigError("clmsa config out of range");
  }
};

struct BmmcConfig {
  int block_size = 16;
  double alpha_min = 0.1;
  double block_dropout = 0.1;
  int n_classes = 2;
  int joint_dim = 16;
  int ip_dim = 13;

  void validate() const {
    if (block_size < 1) throw ConfigError("bmmc.block_size must be >= 1");
    if (alpha_min < 0.0 || alpha_min >= 1.0) throw ConfigError("bmmc.alpha_min must be in [0,1)");
    if (block_dropout < 0.0 || block_dropout >= 1.0)
      throw ConfigError("bmmc.block_dropout must be in [0,1)");
    if (n_classes != 2 && n_classes != 3) throw ConfigError("bmmc.n_classes must be 2 or 3");
  }
};

struct TrainConfig {
  int batch_size = 16;
  double lr = 2e-5;
  double weight_decay = 1e-4;
  int epochs = 10;
  int pretrain_steps = 200;
  double lambda_tacl = 1.0;
  double tau = 0.1;
  double mask_rate = 0.15;
  double val_fraction = 0.1;

  void validate() const {
    if (batch_size < 1 || epochs < 0 || pretrain_steps < 0)
      throw ConfigError("train config out of range");
    if (mask_rate <= 0.0 || mask_rate >= 1.0) throw ConfigError("train.mask_rate must be in (0,1)");
    if (tau <= 0.0) throw ConfigError("train.tau must be positive");
    if (lambda_tacl < 0.0) throw ConfigError("train.lambda must be >= 0");
  }
};

struct EvalConfig {
  double threshold = 0.5;

  void validate() const {
    if (threshold < 0.0 || threshold > 1.0) throw ConfigError("eval.threshold must be in [0,1]");
  }
};

// Everything a run needs; embedded verbatim in checkpoints.
struct RunConfig {
  EncoderConfig encoder;
  ClmsaConfig clmsa;
  BmmcConfig bmmc;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    encoder.validate();
    clmsa.validate();
    bmmc.validate();
    train.validate();
    eval.validate();
  }

  // Small laptop-friendly preset used throughout the tests.
  static RunConfig desk() { return RunConfig{}; }

  // Full-size preset matching the published architecture dimensions.
  static RunConfig paper() {
    RunConfig c;
    c.encoder = EncoderConfig{12, 768, 12, 4, 200, 30522, 0.1};
    c.clmsa = ClmsaConfig{{64, 32, 16, 8}, 25, 96, 128, 2};
    c.bmmc = BmmcConfig{16, 0.1, 0.1, 2, 16, 13};
    return c;
  }

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  // Overlays values from a TOML-style key/value file with [encoder], [clmsa],
  // [bmmc], [train], [eval] sections. Unknown sections or keys are rejected.
  void apply_file(const std::string& path);
};

}  // namespace curlip
