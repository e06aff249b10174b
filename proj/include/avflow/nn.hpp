#pragma once

#include <string>
#include <vector>

#include "avflow/autodiff.hpp"
#include "avflow/params.hpp"

namespace avflow {

// Parameter creation uses 1/sqrt(fan_in) scaling; biases start at zero.
void create_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng);
Var linear(Tape& t, ParamBinder& p, const std::string& prefix, Var x);

// LayerNorm with learnable gain/bias ("<prefix>.gain", "<prefix>.bias").
void create_layernorm(ParamStore& ps, const std::string& prefix, int64_t dim);
Var layernorm_affine(Tape& t, ParamBinder& p, const std::string& prefix, Var x);

struct AttentionSpec {
  int64_t dim = 0;
  int heads = 1;
  bool rope = true;
};

// Multi-head self-attention over one chunk. mask_bias is an additive [n,n]
// tensor (0 allowed, large negative blocked) or an undefined tensor for full
// attention. positions feed the rotary embedding.
void create_attention(ParamStore& ps, const std::string& prefix, const AttentionSpec& spec,
                      Rng& rng);
Var self_attention(Tape& t, ParamBinder& p, const std::string& prefix, const AttentionSpec& spec,
                   Var x, const std::vector<int64_t>& positions, const Tensor& mask_bias);

struct BlockSpec {
  int64_t dim = 0;
  int64_t hidden = 0;
  int heads = 1;
  bool rope = true;
};

// Pre-norm transformer block: attention + MLP, both residual.
void create_block(ParamStore& ps, const std::string& prefix, const BlockSpec& spec, Rng& rng);
Var transformer_block(Tape& t, ParamBinder& p, const std::string& prefix, const BlockSpec& spec,
                      Var x, const std::vector<int64_t>& positions, const Tensor& mask_bias);

// Sinusoidal embedding of a scalar in [0,1], width dim.
Tensor time_embedding(double tval, int64_t dim);

// 1/0 allowed matrix -> additive bias with kMaskedBias on blocked entries.
constexpr float kMaskedBias = -1e30f;
Tensor mask_to_bias(const Tensor& mask01);

}  // namespace avflow
