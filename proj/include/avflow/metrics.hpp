#pragma once

#include <string>
#include <vector>

#include "avflow/lipdec.hpp"
#include "avflow/tensor.hpp"

namespace avflow {

struct EvalReport {
  double f1_lips = 0.0;
  double fd_e = 0.0;
  double div_h = 0.0;
  double div_e = 0.0;
  double bc_h = 0.0;
  double bc_e = 0.0;
  double mcd = 0.0;
  int64_t frames = 0;
  int64_t sequences = 0;
  std::string config_echo;

  bool any_nan() const;
  std::string to_json() const;
  std::string pretty() const;
};

// Greedy matching of sorted event frames with +-slack; F1 of the two sets.
// Two empty sets count as perfect agreement.
double event_f1(const std::vector<int64_t>& pred, const std::vector<int64_t>& gt, int64_t slack);

// Closure events are frames whose decoded inner-lip distance falls below the
// threshold; matched with one frame of slack.
double f1_lip_closures(const Tensor& pred_codes, const Tensor& gt_codes, const LipDecoder& dec,
                       double threshold = 1e-2);
std::vector<int64_t> closure_frames(const Tensor& codes, const LipDecoder& dec,
                                    double threshold = 1e-2);

// Frechet distance between Gaussians fitted to per-frame codes pooled across
// sequences.
double frechet_expression_distance(const std::vector<Tensor>& pred_sets,
                                   const std::vector<Tensor>& gt_sets);

// Mean over channels of the across-sample standard deviation of per-sequence
// mean vectors.
double diversity(const std::vector<Tensor>& samples);

// Audio beats: peaks of half-wave-rectified mel flux with mean+1-sigma
// prominence. Motion beats: local minima of per-frame kinetic velocity.
std::vector<int64_t> audio_beats(const Tensor& mel);
std::vector<int64_t> motion_beats(const Tensor& motion);

// Mean Gaussian proximity of motion beats to their nearest audio beat.
// Returns 0 when no audio beat is detected.
double beat_align(const Tensor& mel, const Tensor& motion, double sigma = 3.0);

// Mel cepstral distortion over a DTW alignment; coefficients 1..n_cep of the
// orthonormal DCT-II of log(mel + eps), c0 excluded.
double mcd(const Tensor& pred_mel, const Tensor& gt_mel, int n_cep = 13);

constexpr double kMcdLogEps = 1e-5;

// full orthonormal DCT-II of log(mel + eps) and its inverse; the pair is used
// to build closed-form test cases
Tensor log_mel_dct(const Tensor& mel);
Tensor mel_from_log_dct(const Tensor& cep);
// coefficients 1..n_cep only
Tensor mel_cepstra(const Tensor& mel, int n_cep);

}  // namespace avflow
