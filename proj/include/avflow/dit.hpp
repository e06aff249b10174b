#pragma once

#include <string>
#include <utility>

#include "avflow/nn.hpp"

namespace avflow {

enum class Variant { AvFlow, Separate, Shared, Cascaded };
enum class Guidance { None, Audio, Visual, AudioVisual };

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);
Guidance guidance_from_string(const std::string& s);
std::string guidance_name(Guidance g);

struct DitConfig {
  int blocks = 8;
  int64_t dim = 512;
  int64_t hidden = 1024;
  int heads = 4;
  int window = 10;
  int lookahead = 2;
  int64_t token_dim = 29;
  int64_t mel_dim = 80;
  int64_t head_latent_dim = 8;
  int64_t face_dim = 256;
  int64_t participant_dim = 56;
  Variant variant = Variant::AvFlow;
  Guidance guidance = Guidance::None;
  uint64_t seed = 0;

  int64_t vision_dim() const { return head_latent_dim + face_dim; }
  // tokens plus zero-padded dyadic channels; one checkpoint serves both modes
  int64_t cond_dim() const { return token_dim + participant_dim + token_dim; }
  int64_t vision_cond_dim() const {
    return (variant == Variant::Cascaded ? mel_dim : token_dim) + participant_dim + token_dim;
  }
  void validate() const;
};

struct ConditionBundle {
  Tensor tokens;              // [n, token_dim]
  double t = 0.0;
  Tensor participant_feats;   // [n, 56], optional
  Tensor participant_tokens;  // [n, token_dim], optional
  Tensor cascade_audio;       // [n, mel_dim], vision conditioning for the cascaded variant
};

// Band attention mask: frame i may attend to frames
// [i-(window-1-lookahead), i+lookahead], clamped to [0,n). 1 = allowed.
Tensor window_mask(int64_t n, int window, int lookahead);

// Residual linear fusion between the two stream activations:
//   y_a = x_a + U^T [x_a; x_v] + b,  y_v = x_v + V^T [x_a; x_v] + c
std::pair<Var, Var> fuse(Tape& t, Var x_audio, Var x_vision, Var u, Var b, Var v, Var c);

enum class Stream { Audio, Vision };

// The dual diffusion-transformer velocity network. Sequences are tiled into
// `window`-frame chunks that run through the whole stack independently, so
// emitting a frame never waits for more than one window of input. Fusion is
// applied after every block; all-zero fusion parameters short-circuit to the
// identity so the separate variant and zero-fusion runs share one code path.
class AvFlowModel {
 public:
  explicit AvFlowModel(DitConfig cfg);

  std::pair<Var, Var> forward(Tape& t, ParamBinder& p, Var noisy_audio, Var noisy_vision,
                              const ConditionBundle& cond);
  // Single-stream pass; only meaningful when the streams are uncoupled
  // (separate / cascaded).
  Var forward_stream(Tape& t, ParamBinder& p, Stream which, Var noisy,
                     const ConditionBundle& cond);

  std::pair<Tensor, Tensor> forward_values(const Tensor& noisy_audio, const Tensor& noisy_vision,
                                           const ConditionBundle& cond);

  static int64_t expected_param_count(const DitConfig& cfg);

  DitConfig config;
  ParamStore params;

 private:
  Tensor cond_block(const ConditionBundle& cond, int64_t n, bool vision_stream) const;
  bool fusion_all_zero(int block) const;
};

}  // namespace avflow
