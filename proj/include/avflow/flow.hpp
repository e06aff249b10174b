#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "avflow/dit.hpp"

namespace avflow {

struct FlowConfig {
  float sigma_min = 1e-6f;
  float lambda_s = 3.0f;
  float lambda_h = 0.2f;
  float lambda_f = 1.0f;
  int steps = 8;
  std::string solver = "euler";
  void validate() const;
};

// Straight-line probability path between noise x0 and data x1.
Tensor ot_path(const Tensor& x0, const Tensor& x1, double t, double sigma_min);
// Its constant-in-t velocity.
Tensor target_velocity(const Tensor& x0, const Tensor& x1, double sigma_min);

struct PathSample {
  Tensor x0;
  Tensor x1;
  double t = 0.0;
  Tensor x_t;
  Tensor u_target;
};
PathSample make_path_sample(const Tensor& x1, double t, double sigma_min, Rng& rng);

// Per-channel z-normalization of the three streams; the model always works
// in normalized space and samples are mapped back on the way out.
struct NormStats {
  Tensor mel_mean, mel_std;
  Tensor head_mean, head_std;
  Tensor face_mean, face_std;

  static NormStats identity(int64_t mel, int64_t head, int64_t face);
  bool defined() const { return mel_mean.defined(); }
  std::vector<std::pair<std::string, Tensor>> entries() const;
  static NormStats from_entries(const std::vector<std::pair<std::string, Tensor>>& entries);
};

Tensor normalize_rows(const Tensor& x, const Tensor& mean, const Tensor& stddev);
Tensor denormalize_rows(const Tensor& x, const Tensor& mean, const Tensor& stddev);

enum class StreamSelect { Both, AudioOnly, VisionOnly };

struct CfmBatchItem {
  Tensor tokens;  // [n, 29]
  Tensor mel;     // [n, 80]
  Tensor head;    // [n, 8]
  Tensor face;    // [n, Df]
  Tensor participant_feats;   // optional [n,56]
  Tensor participant_tokens;  // optional [n,29]
  Tensor cascade_audio;       // optional [n,80]
};

struct CfmLoss {
  double total = 0.0;
  double ls = 0.0;
  double lh = 0.0;
  double lf = 0.0;
};

// Velocity callback over normalized noisy streams; the testable core of the
// objective. Undefined vision input means audio-only (and vice versa).
using VelocityFn =
    std::function<std::pair<Var, Var>(Tape&, Var xt_audio, Var xt_vision, double t)>;

struct CfmLossVars {
  Var total;
  Var ls, lh, lf;
};
CfmLossVars cfm_loss_core(Tape& t, const VelocityFn& velocity, const Tensor& mel_n,
                          const Tensor& head_n, const Tensor& face_n, const FlowConfig& cfg,
                          double tval, const Tensor& x0_audio, const Tensor& x0_vision,
                          StreamSelect select = StreamSelect::Both);

// Full objective on one frame-aligned item: draws one shared t and one noise
// realization, optionally returns parameter gradients.
CfmLoss cfm_loss(AvFlowModel& model, const CfmBatchItem& item, const FlowConfig& cfg,
                 const NormStats& stats, Rng& rng,
                 std::vector<std::pair<std::string, Tensor>>* grads_out = nullptr,
                 StreamSelect select = StreamSelect::Both);

// Explicit Euler for dx/dt = field(t, x) from t=0 to t=1 in uniform steps.
Tensor euler_solve(const std::function<Tensor(double, const Tensor&)>& field, const Tensor& x0,
                   int steps);

struct SampleOutput {
  Tensor mel;   // [n, 80]
  Tensor head;  // [n, 8]
  Tensor face;  // [n, Df]
};

// Integrates the trained velocity field from noise to data and splits the
// vision stream into head latents and face codes.
SampleOutput sample(AvFlowModel& model, const Tensor& tokens, const FlowConfig& cfg,
                    const NormStats& stats, Rng& rng, const ConditionBundle& extras = {});

}  // namespace avflow
