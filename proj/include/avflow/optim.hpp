#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avflow/params.hpp"
#include "avflow/tensor.hpp"

namespace avflow {

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-9f;
  float weight_decay = 0.01f;
};

// AdamW with decoupled weight decay. Moment tensors are created lazily per
// parameter name on the first step that touches it.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  void step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads);

  // Moments and the step counter, for checkpointing ("opt." prefix).
  std::vector<std::pair<std::string, Tensor>> state_entries() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& entries);

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::unordered_map<std::string, Moments> state_;
  std::vector<std::string> order_;
};

}  // namespace avflow
