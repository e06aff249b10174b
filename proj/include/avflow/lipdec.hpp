#pragma once

#include <string>

#include "avflow/tensor.hpp"

namespace avflow {

// Fixed linear map from face codes to a handful of mouth vertices. Vertex 0
// is the inner upper lip, vertex 1 the inner lower lip; their distance is
// gain * code[0] by construction. Vertices 2/3 are the mouth corners and
// their distance is corner_base + corner_gain * code[1].
class LipDecoder {
 public:
  static constexpr int kVertices = 4;

  static LipDecoder canonical(int64_t face_dim, float gain = 1.0f);

  // codes [n, face_dim] -> vertices [n, kVertices, 3]
  Tensor decode(const Tensor& codes) const;
  // convenience: per-frame inner-lip distance [n]
  Tensor lip_distance(const Tensor& codes) const;
  // per-frame mouth-corner distance [n]
  Tensor corner_distance(const Tensor& codes) const;

  int64_t face_dim() const { return weight_.dim(0); }
  float gain() const { return gain_; }

  void save(const std::string& path) const;
  static LipDecoder load(const std::string& path);

 private:
  Tensor weight_;  // [face_dim, kVertices*3]
  Tensor bias_;    // [kVertices*3]
  float gain_ = 1.0f;
};

}  // namespace avflow
