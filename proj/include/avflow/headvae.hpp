#pragma once

#include <utility>
#include <vector>

#include "avflow/nn.hpp"
#include "avflow/optim.hpp"

namespace avflow {

struct HeadVaeConfig {
  int64_t pose_dim = 7;
  int64_t latent_dim = 8;
  int64_t model_dim = 32;
  int64_t hidden = 64;
  int heads = 4;
  int64_t window = 32;
  float kl_weight = 1e-3f;
  float lr = 1e-3f;
  int64_t steps = 400;
  int64_t batch = 8;
  uint64_t seed = 0;
};

// mean over elements of -0.5 (1 + logvar - mu^2 - e^logvar); zero when the
// posterior equals the standard-normal prior
Var vae_kl(Tape& t, Var mu, Var logvar);

// Temporal VAE over head poses (quaternion + translation). One transformer
// encoder layer on each side, 8-d per-frame latents. Sequences are processed
// in fixed windows with tile-local positions.
class HeadVae {
 public:
  explicit HeadVae(HeadVaeConfig cfg = {});

  struct TrainStats {
    double final_recon = 0.0;
    double final_kl = 0.0;
  };
  // KL weight warms up linearly over the first 10% of steps.
  TrainStats train(const std::vector<Tensor>& pose_seqs);

  Tensor encode(const Tensor& poses) const;   // [n,7] -> [n,8] posterior mean
  Tensor decode(const Tensor& latents) const; // [n,8] -> [n,7], unit quaternion part

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  const HeadVaeConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  Var run_encoder(Tape& t, ParamBinder& p, Var x, const std::vector<int64_t>& pos) const;
  Var run_decoder(Tape& t, ParamBinder& p, Var z, const std::vector<int64_t>& pos) const;

  HeadVaeConfig cfg_;
  mutable ParamStore params_;
  bool trained_ = false;
};

// w >= 0 and unit norm on the quaternion columns of an [n,7] pose matrix
void canonicalize_poses(Tensor& poses);

}  // namespace avflow
