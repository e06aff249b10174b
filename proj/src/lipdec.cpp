#include "avflow/lipdec.hpp"

#include <cmath>

#include "avflow/checkpoint.hpp"

namespace avflow {

namespace {
constexpr uint64_t kDecoderSeed = 0xA77F10u;
constexpr float kCornerBase = 0.5f;
constexpr float kCornerGain = 1.0f;
}  // namespace

LipDecoder LipDecoder::canonical(int64_t face_dim, float gain) {
  if (face_dim < 2) fail(ErrKind::DimensionMismatch, "face dim must be >= 2");
  LipDecoder d;
  d.gain_ = gain;
  Rng rng(kDecoderSeed);
  d.weight_ = Tensor::randn({face_dim, kVertices * 3}, rng, 0.05f);
  d.bias_ = Tensor::randn({kVertices * 3}, rng, 0.1f);
  float* w = d.weight_.mutable_data();
  float* b = d.bias_.mutable_data();
  // upper/lower lip rows must agree except for the code[0] z-component, so
  // their distance is exactly gain * code[0]
  for (int64_t c = 0; c < face_dim; ++c) {
    for (int k = 0; k < 3; ++k) w[c * kVertices * 3 + 3 + k] = w[c * kVertices * 3 + k];
  }
  for (int k = 0; k < 3; ++k) b[3 + k] = b[k];
  for (int64_t c = 0; c < face_dim; ++c) {
    w[c * kVertices * 3 + 2] = 0.0f;  // upper z
    w[c * kVertices * 3 + 5] = 0.0f;  // lower z
  }
  w[0 * kVertices * 3 + 2] = +gain * 0.5f;
  w[0 * kVertices * 3 + 5] = -gain * 0.5f;
  // mouth corners: distance along x driven by code[1]
  for (int64_t c = 0; c < face_dim; ++c) {
    for (int k = 0; k < 3; ++k) w[c * kVertices * 3 + 9 + k] = w[c * kVertices * 3 + 6 + k];
    w[c * kVertices * 3 + 6] = 0.0f;
    w[c * kVertices * 3 + 9] = 0.0f;
  }
  for (int k = 0; k < 3; ++k) b[9 + k] = b[6 + k];
  w[1 * kVertices * 3 + 6] = +kCornerGain * 0.5f;
  w[1 * kVertices * 3 + 9] = -kCornerGain * 0.5f;
  b[6] += kCornerBase * 0.5f;
  b[9] -= kCornerBase * 0.5f;
  return d;
}

Tensor LipDecoder::decode(const Tensor& codes) const {
  if (codes.rank() != 2 || codes.dim(1) != weight_.dim(0))
    fail(ErrKind::DimensionMismatch, "face codes " + shape_str(codes.shape()) +
                                         " do not match decoder input " +
                                         std::to_string(weight_.dim(0)));
  int64_t n = codes.dim(0);
  int64_t out_w = weight_.dim(1);
  Tensor out({n, kVertices, 3});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < out_w; ++j) {
      double acc = bias_.at(j);
      for (int64_t c = 0; c < weight_.dim(0); ++c)
        acc += static_cast<double>(codes.at(i * codes.dim(1) + c)) * weight_.at(c * out_w + j);
      out.at(i * out_w + j) = static_cast<float>(acc);
    }
  }
  return out;
}

namespace {
Tensor vertex_pair_distance(const Tensor& verts, int a, int b) {
  int64_t n = verts.dim(0);
  Tensor out({n});
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) {
      double d = static_cast<double>(verts.at(i * LipDecoder::kVertices * 3 + a * 3 + k)) -
                 verts.at(i * LipDecoder::kVertices * 3 + b * 3 + k);
      s += d * d;
    }
    out.at(i) = static_cast<float>(std::sqrt(s));
  }
  return out;
}
}  // namespace

Tensor LipDecoder::lip_distance(const Tensor& codes) const {
  return vertex_pair_distance(decode(codes), 0, 1);
}

Tensor LipDecoder::corner_distance(const Tensor& codes) const {
  return vertex_pair_distance(decode(codes), 2, 3);
}

void LipDecoder::save(const std::string& path) const {
  write_checkpoint_atomic(path, {{"lipdec", weight_},
                                 {"lipdec.bias", bias_},
                                 {"lipdec.gain", Tensor::scalar(gain_)}});
}

LipDecoder LipDecoder::load(const std::string& path) {
  LipDecoder d;
  bool have_w = false, have_b = false;
  for (auto& [name, t] : read_checkpoint(path)) {
    if (name == "lipdec") {
      d.weight_ = t;
      have_w = true;
    } else if (name == "lipdec.bias") {
      d.bias_ = t;
      have_b = true;
    } else if (name == "lipdec.gain") {
      d.gain_ = t.at(0);
    }
  }
  if (!have_w || !have_b) fail(ErrKind::CorruptRecord, path + " lacks decoder tensors");
  return d;
}

}  // namespace avflow
