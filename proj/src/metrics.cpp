#include "avflow/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace avflow {

bool EvalReport::any_nan() const {
  for (double v : {f1_lips, fd_e, div_h, div_e, bc_h, bc_e, mcd})
    if (!std::isfinite(v)) return true;
  return false;
}

std::string EvalReport::to_json() const {
  nlohmann::json j = {{"f1_lips", f1_lips}, {"fd_e", fd_e}, {"div_h", div_h},
                      {"div_e", div_e},     {"bc_h", bc_h}, {"bc_e", bc_e},
                      {"mcd", mcd},         {"frames", frames},
                      {"sequences", sequences}};
  if (!config_echo.empty()) j["config"] = nlohmann::json::parse(config_echo, nullptr, false);
  return j.dump(2);
}

std::string EvalReport::pretty() const {
  std::ostringstream os;
  os << "F1_lips " << f1_lips << "\nFD_e    " << fd_e << "\nDiv_h   " << div_h << "\nDiv_e   "
     << div_e << "\nBC_h    " << bc_h << "\nBC_e    " << bc_e << "\nMCD     " << mcd
     << "\nframes  " << frames << "  sequences " << sequences << "\n";
  return os.str();
}

double event_f1(const std::vector<int64_t>& pred, const std::vector<int64_t>& gt, int64_t slack) {
  if (pred.empty() && gt.empty()) return 1.0;
  if (pred.empty() || gt.empty()) return 0.0;
  size_t i = 0, j = 0, matched = 0;
  while (i < pred.size() && j < gt.size()) {
    int64_t d = pred[i] - gt[j];
    if (std::llabs(d) <= slack) {
      ++matched;
      ++i;
      ++j;
    } else if (d < 0) {
      ++i;
    } else {
      ++j;
    }
  }
  double precision = static_cast<double>(matched) / static_cast<double>(pred.size());
  double recall = static_cast<double>(matched) / static_cast<double>(gt.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<int64_t> closure_frames(const Tensor& codes, const LipDecoder& dec,
                                    double threshold) {
  Tensor dist = dec.lip_distance(codes);
  std::vector<int64_t> out;
  for (int64_t i = 0; i < dist.numel(); ++i)
    if (dist.at(i) < threshold) out.push_back(i);
  return out;
}

double f1_lip_closures(const Tensor& pred_codes, const Tensor& gt_codes, const LipDecoder& dec,
                       double threshold) {
  if (pred_codes.dim(0) != gt_codes.dim(0))
    fail(ErrKind::LengthMismatch, "closure F1 needs equal frame counts");
  return event_f1(closure_frames(pred_codes, dec, threshold),
                  closure_frames(gt_codes, dec, threshold), 1);
}

namespace {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int64_t rows = 0;
};

Gaussian fit_gaussian(const std::vector<Tensor>& sets) {
  int64_t total = 0;
  int64_t dim = -1;
  for (const Tensor& t : sets) {
    if (t.rank() != 2) fail(ErrKind::DimensionMismatch, "code sets must be [n,d]");
    if (dim < 0) dim = t.dim(1);
    if (t.dim(1) != dim) fail(ErrKind::DimensionMismatch, "code widths differ across sets");
    total += t.dim(0);
  }
  if (total < 2) fail(ErrKind::TooFewSamples, "need at least two pooled frames");
  Gaussian g;
  g.rows = total;
  g.mean = Eigen::VectorXd::Zero(dim);
  for (const Tensor& t : sets)
    for (int64_t i = 0; i < t.dim(0); ++i)
      for (int64_t c = 0; c < dim; ++c) g.mean(c) += t.at(i * dim + c);
  g.mean /= static_cast<double>(total);
  g.cov = Eigen::MatrixXd::Zero(dim, dim);
  for (const Tensor& t : sets) {
    for (int64_t i = 0; i < t.dim(0); ++i) {
      Eigen::VectorXd x(dim);
      for (int64_t c = 0; c < dim; ++c) x(c) = t.at(i * dim + c) - g.mean(c);
      g.cov.noalias() += x * x.transpose();
    }
  }
  g.cov /= static_cast<double>(total - 1);
  // regularize thin samples so the matrix square roots stay well posed
  if (total <= dim + 1) g.cov.diagonal().array() += 1e-6;
  return g;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) fail(ErrKind::DegenerateCovariance, "covariance is not PSD");
    if (ev(i) < 0.0) ev(i) = 0.0;
    ev(i) = std::sqrt(ev(i));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_expression_distance(const std::vector<Tensor>& pred_sets,
                                   const std::vector<Tensor>& gt_sets) {
  Gaussian a = fit_gaussian(pred_sets);
  Gaussian b = fit_gaussian(gt_sets);
  if (a.mean.size() != b.mean.size())
    fail(ErrKind::DimensionMismatch, "code widths differ between sides");
  double mean_term = (a.mean - b.mean).squaredNorm();
  Eigen::MatrixXd sa = psd_sqrt(a.cov);
  Eigen::MatrixXd inner = sa * b.cov * sa;
  // symmetrize away rounding before the second root
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  double cross = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) {
    double ev = es.eigenvalues()(i);
    if (ev < -1e-8) fail(ErrKind::DegenerateCovariance, "cross covariance is not PSD");
    if (ev > 0.0) cross += std::sqrt(ev);
  }
  double fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  if (!std::isfinite(fd)) fail(ErrKind::DegenerateCovariance, "frechet distance diverged");
  return std::max(0.0, fd);
}

double diversity(const std::vector<Tensor>& samples) {
  if (samples.size() < 2) fail(ErrKind::TooFewSamples, "diversity needs at least two samples");
  int64_t dim = samples[0].dim(1);
  std::vector<std::vector<double>> means;
  for (const Tensor& t : samples) {
    if (t.dim(1) != dim) fail(ErrKind::DimensionMismatch, "sample widths differ");
    std::vector<double> m(static_cast<size_t>(dim), 0.0);
    for (int64_t i = 0; i < t.dim(0); ++i)
      for (int64_t c = 0; c < dim; ++c) m[static_cast<size_t>(c)] += t.at(i * dim + c);
    for (double& v : m) v /= static_cast<double>(t.dim(0));
    means.push_back(std::move(m));
  }
  double acc = 0.0;
  double count = static_cast<double>(means.size());
  for (int64_t c = 0; c < dim; ++c) {
    double mu = 0.0;
    for (const auto& m : means) mu += m[static_cast<size_t>(c)];
    mu /= count;
    double var = 0.0;
    for (const auto& m : means) {
      double d = m[static_cast<size_t>(c)] - mu;
      var += d * d;
    }
    acc += std::sqrt(var / count);
  }
  return acc / static_cast<double>(dim);
}

std::vector<int64_t> audio_beats(const Tensor& mel) {
  int64_t n = mel.dim(0), w = mel.dim(1);
  std::vector<double> flux(static_cast<size_t>(n), 0.0);
  for (int64_t i = 1; i < n; ++i) {
    double f = 0.0;
    for (int64_t c = 0; c < w; ++c) {
      double d = static_cast<double>(mel.at(i * w + c)) - mel.at((i - 1) * w + c);
      if (d > 0.0) f += d;
    }
    flux[static_cast<size_t>(i)] = f;
  }
  double mean = 0.0;
  for (int64_t i = 1; i < n; ++i) mean += flux[static_cast<size_t>(i)];
  mean /= std::max<int64_t>(1, n - 1);
  double var = 0.0;
  for (int64_t i = 1; i < n; ++i) {
    double d = flux[static_cast<size_t>(i)] - mean;
    var += d * d;
  }
  double prominence = mean + std::sqrt(var / std::max<int64_t>(1, n - 1));
  std::vector<int64_t> beats;
  for (int64_t i = 1; i + 1 < n; ++i) {
    double f = flux[static_cast<size_t>(i)];
    if (f > flux[static_cast<size_t>(i - 1)] && f >= flux[static_cast<size_t>(i + 1)] &&
        f >= prominence)
      beats.push_back(i);
  }
  return beats;
}

std::vector<int64_t> motion_beats(const Tensor& motion) {
  int64_t n = motion.dim(0), w = motion.dim(1);
  std::vector<double> vel(static_cast<size_t>(n), 0.0);
  for (int64_t i = 1; i < n; ++i) {
    double s = 0.0;
    for (int64_t c = 0; c < w; ++c) {
      double d = static_cast<double>(motion.at(i * w + c)) - motion.at((i - 1) * w + c);
      s += d * d;
    }
    vel[static_cast<size_t>(i)] = std::sqrt(s);
  }
  if (n > 1) vel[0] = vel[1];
  std::vector<int64_t> beats;
  for (int64_t i = 1; i + 1 < n; ++i) {
    if (vel[static_cast<size_t>(i)] < vel[static_cast<size_t>(i - 1)] &&
        vel[static_cast<size_t>(i)] <= vel[static_cast<size_t>(i + 1)])
      beats.push_back(i);
  }
  return beats;
}

double beat_align(const Tensor& mel, const Tensor& motion, double sigma) {
  if (mel.dim(0) != motion.dim(0))
    fail(ErrKind::LengthMismatch, "beat align needs equal frame counts");
  std::vector<int64_t> bm = motion_beats(motion);
  if (bm.empty()) fail(ErrKind::NoMotionBeats, "no kinetic-velocity minima found");
  std::vector<int64_t> ba = audio_beats(mel);
  if (ba.empty()) return 0.0;
  double acc = 0.0;
  for (int64_t b : bm) {
    double best = 1e18;
    for (int64_t a : ba) best = std::min(best, static_cast<double>(std::llabs(b - a)));
    acc += std::exp(-best * best / (2.0 * sigma * sigma));
  }
  return acc / static_cast<double>(bm.size());
}

Tensor log_mel_dct(const Tensor& mel) {
  int64_t n = mel.dim(0), w = mel.dim(1);
  Tensor out({n, w});
  double a0 = std::sqrt(1.0 / static_cast<double>(w));
  double ak = std::sqrt(2.0 / static_cast<double>(w));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < w; ++k) {
      double acc = 0.0;
      for (int64_t c = 0; c < w; ++c) {
        double x = std::log(static_cast<double>(mel.at(i * w + c)) + kMcdLogEps);
        acc += x * std::cos(3.14159265358979323846 * (2.0 * c + 1.0) * k / (2.0 * w));
      }
      out.at(i * w + k) = static_cast<float>(acc * (k == 0 ? a0 : ak));
    }
  }
  return out;
}

Tensor mel_from_log_dct(const Tensor& cep) {
  int64_t n = cep.dim(0), w = cep.dim(1);
  Tensor out({n, w});
  double a0 = std::sqrt(1.0 / static_cast<double>(w));
  double ak = std::sqrt(2.0 / static_cast<double>(w));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int64_t k = 0; k < w; ++k) {
        double alpha = (k == 0 ? a0 : ak);
        acc += alpha * cep.at(i * w + k) *
               std::cos(3.14159265358979323846 * (2.0 * c + 1.0) * k / (2.0 * w));
      }
      out.at(i * w + c) = static_cast<float>(std::exp(acc) - kMcdLogEps);
    }
  }
  return out;
}

Tensor mel_cepstra(const Tensor& mel, int n_cep) {
  Tensor full = log_mel_dct(mel);
  int64_t n = full.dim(0), w = full.dim(1);
  if (n_cep + 1 > w) fail(ErrKind::DimensionMismatch, "n_cep exceeds band count");
  Tensor out({n, n_cep});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < n_cep; ++k) out.at(i * n_cep + k) = full.at(i * w + k + 1);
  return out;
}

double mcd(const Tensor& pred_mel, const Tensor& gt_mel, int n_cep) {
  if (pred_mel.numel() == 0 || gt_mel.numel() == 0 || pred_mel.dim(0) == 0 || gt_mel.dim(0) == 0)
    fail(ErrKind::EmptyInput, "mcd needs non-empty spectrograms");
  Tensor ca = mel_cepstra(pred_mel, n_cep);
  Tensor cb = mel_cepstra(gt_mel, n_cep);
  int64_t n1 = ca.dim(0), n2 = cb.dim(0);
  auto cost = [&](int64_t i, int64_t j) {
    double s = 0.0;
    for (int k = 0; k < n_cep; ++k) {
      double d = static_cast<double>(ca.at(i * n_cep + k)) - cb.at(j * n_cep + k);
      s += d * d;
    }
    return std::sqrt(s);
  };
  const double inf = 1e300;
  std::vector<double> dp(static_cast<size_t>((n1 + 1) * (n2 + 1)), inf);
  auto at = [&](int64_t i, int64_t j) -> double& {
    return dp[static_cast<size_t>(i * (n2 + 1) + j)];
  };
  at(0, 0) = 0.0;
  for (int64_t i = 1; i <= n1; ++i) {
    for (int64_t j = 1; j <= n2; ++j) {
      double c = cost(i - 1, j - 1);
      at(i, j) = c + std::min({at(i - 1, j - 1), at(i - 1, j), at(i, j - 1)});
    }
  }
  // path length via backtrack
  int64_t i = n1, j = n2, len = 0;
  while (i > 0 && j > 0) {
    ++len;
    double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
    if (diag <= up && diag <= left) {
      --i;
      --j;
    } else if (up <= left) {
      --i;
    } else {
      --j;
    }
  }
  len += i + j;
  double mean_cost = at(n1, n2) / static_cast<double>(len);
  return (10.0 / std::log(10.0)) * std::sqrt(2.0) * mean_cost;
}

}  // namespace avflow
