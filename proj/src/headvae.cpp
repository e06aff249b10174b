#include "avflow/headvae.hpp"

#include <cmath>

namespace avflow {

Var vae_kl(Tape& t, Var mu, Var logvar) {
  Var mu2 = t.mul(mu, mu);
  Var ones = t.constant(Tensor::full(t.val(mu).shape(), 1.0f));
  Var inner = t.sub(t.add(ones, logvar), t.add(mu2, t.exp(logvar)));
  return t.scale(t.mean(inner), -0.5f);
}

void canonicalize_poses(Tensor& poses) {
  if (poses.rank() != 2 || poses.dim(1) != 7)
    fail(ErrKind::DimensionMismatch, "poses must be [n,7], got " + shape_str(poses.shape()));
  for (int64_t i = 0; i < poses.dim(0); ++i) {
    float* q = poses.mutable_data() + i * 7;
    double n = std::sqrt(static_cast<double>(q[0]) * q[0] + static_cast<double>(q[1]) * q[1] +
                         static_cast<double>(q[2]) * q[2] + static_cast<double>(q[3]) * q[3]);
    if (n <= 0.0) fail(ErrKind::NotARotation, "zero quaternion in pose row");
    double s = (q[0] < 0.0f ? -1.0 : 1.0) / n;
    for (int k = 0; k < 4; ++k) q[k] = static_cast<float>(q[k] * s);
  }
}

HeadVae::HeadVae(HeadVaeConfig cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed ^ 0x4eadull);
  BlockSpec blk{cfg_.model_dim, cfg_.hidden, cfg_.heads, true};
  create_linear(params_, "headvae.enc.in", cfg_.pose_dim, cfg_.model_dim, rng);
  create_block(params_, "headvae.enc.blk", blk, rng);
  create_linear(params_, "headvae.enc.mu", cfg_.model_dim, cfg_.latent_dim, rng);
  create_linear(params_, "headvae.enc.logvar", cfg_.model_dim, cfg_.latent_dim, rng);
  create_linear(params_, "headvae.dec.in", cfg_.latent_dim, cfg_.model_dim, rng);
  create_block(params_, "headvae.dec.blk", blk, rng);
  create_linear(params_, "headvae.dec.out", cfg_.model_dim, cfg_.pose_dim, rng);
}

Var HeadVae::run_encoder(Tape& t, ParamBinder& p, Var x, const std::vector<int64_t>& pos) const {
  BlockSpec blk{cfg_.model_dim, cfg_.hidden, cfg_.heads, true};
  Var h = linear(t, p, "headvae.enc.in", x);
  return transformer_block(t, p, "headvae.enc.blk", blk, h, pos, Tensor());
}

Var HeadVae::run_decoder(Tape& t, ParamBinder& p, Var z, const std::vector<int64_t>& pos) const {
  BlockSpec blk{cfg_.model_dim, cfg_.hidden, cfg_.heads, true};
  Var h = linear(t, p, "headvae.dec.in", z);
  h = transformer_block(t, p, "headvae.dec.blk", blk, h, pos, Tensor());
  return linear(t, p, "headvae.dec.out", h);
}

HeadVae::TrainStats HeadVae::train(const std::vector<Tensor>& pose_seqs) {
  std::vector<Tensor> seqs;
  for (const Tensor& s : pose_seqs)
    if (s.dim(0) >= cfg_.window) seqs.push_back(s.clone());
  if (seqs.empty())
    fail(ErrKind::InsufficientData, "need at least one pose sequence of length >= window");
  for (Tensor& s : seqs) canonicalize_poses(s);

  std::vector<int64_t> pos(static_cast<size_t>(cfg_.window));
  for (int64_t i = 0; i < cfg_.window; ++i) pos[static_cast<size_t>(i)] = i;

  Rng rng(cfg_.seed ^ 0x7a1eull);
  AdamW opt(AdamWConfig{cfg_.lr, 0.9f, 0.98f, 1e-9f, 0.0f});
  TrainStats stats;
  int64_t warmup = std::max<int64_t>(1, cfg_.steps / 10);
  for (int64_t step = 0; step < cfg_.steps; ++step) {
    float klw = cfg_.kl_weight *
                static_cast<float>(std::min<double>(1.0, static_cast<double>(step + 1) / warmup));
    std::vector<std::pair<std::string, Tensor>> grad_sum;
    double recon_acc = 0.0, kl_acc = 0.0;
    for (int64_t b = 0; b < cfg_.batch; ++b) {
      const Tensor& seq = seqs[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(seqs.size()) - 1))];
      int64_t start = rng.uniform_int(0, seq.dim(0) - cfg_.window);
      Tensor win({cfg_.window, cfg_.pose_dim});
      std::copy(seq.data() + start * cfg_.pose_dim,
                seq.data() + (start + cfg_.window) * cfg_.pose_dim, win.mutable_data());
      Tape tape;
      ParamBinder bind(tape, params_);
      Var x = tape.leaf(win);
      Var h = run_encoder(tape, bind, x, pos);
      Var mu = linear(tape, bind, "headvae.enc.mu", h);
      Var logvar = linear(tape, bind, "headvae.enc.logvar", h);
      Tensor eps({cfg_.window, cfg_.latent_dim});
      for (int64_t i = 0; i < eps.numel(); ++i) eps.at(i) = static_cast<float>(rng.normal());
      Var z = tape.add(mu, tape.mul(tape.exp(tape.scale(logvar, 0.5f)), tape.constant(eps)));
      Var recon = run_decoder(tape, bind, z, pos);
      Var recon_loss = tape.l1_loss(recon, x);
      Var kl = vae_kl(tape, mu, logvar);
      Var loss = tape.add(recon_loss, tape.scale(kl, klw));
      recon_acc += tape.val_scalar(recon_loss);
      kl_acc += tape.val_scalar(kl);
      GradMap g = tape.backward(loss);
      auto named = bind.collect(g);
      if (grad_sum.empty()) {
        grad_sum = std::move(named);
      } else {
        for (size_t i = 0; i < grad_sum.size(); ++i) {
          float* acc = grad_sum[i].second.mutable_data();
          const float* add = named[i].second.data();
          for (int64_t j = 0; j < grad_sum[i].second.numel(); ++j) acc[j] += add[j];
        }
      }
    }
    for (auto& [name, g] : grad_sum) {
      float* p = g.mutable_data();
      for (int64_t j = 0; j < g.numel(); ++j) p[j] /= static_cast<float>(cfg_.batch);
    }
    opt.step(params_, grad_sum);
    stats.final_recon = recon_acc / static_cast<double>(cfg_.batch);
    stats.final_kl = kl_acc / static_cast<double>(cfg_.batch);
  }
  trained_ = true;
  return stats;
}

Tensor HeadVae::encode(const Tensor& poses) const {
  if (!trained_) fail(ErrKind::ModelNotLoaded, "head VAE has not been trained or loaded");
  if (poses.rank() != 2 || poses.dim(1) != cfg_.pose_dim)
    fail(ErrKind::DimensionMismatch, "expected [n,7] poses");
  int64_t n = poses.dim(0);
  Tensor out({n, cfg_.latent_dim});
  for (int64_t start = 0; start < n; start += cfg_.window) {
    int64_t len = std::min(cfg_.window, n - start);
    Tensor win({len, cfg_.pose_dim});
    std::copy(poses.data() + start * cfg_.pose_dim, poses.data() + (start + len) * cfg_.pose_dim,
              win.mutable_data());
    std::vector<int64_t> pos(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = i;
    Tape tape;
    ParamBinder bind(tape, const_cast<ParamStore&>(params_));
    Var h = run_encoder(tape, bind, tape.leaf(win), pos);
    Var mu = linear(tape, bind, "headvae.enc.mu", h);
    const Tensor& m = tape.val(mu);
    std::copy(m.data(), m.data() + len * cfg_.latent_dim,
              out.mutable_data() + start * cfg_.latent_dim);
  }
  return out;
}

Tensor HeadVae::decode(const Tensor& latents) const {
  if (!trained_) fail(ErrKind::ModelNotLoaded, "head VAE has not been trained or loaded");
  if (latents.rank() != 2 || latents.dim(1) != cfg_.latent_dim)
    fail(ErrKind::DimensionMismatch, "expected [n,8] latents");
  int64_t n = latents.dim(0);
  Tensor out({n, cfg_.pose_dim});
  for (int64_t start = 0; start < n; start += cfg_.window) {
    int64_t len = std::min(cfg_.window, n - start);
    Tensor win({len, cfg_.latent_dim});
    std::copy(latents.data() + start * cfg_.latent_dim,
              latents.data() + (start + len) * cfg_.latent_dim, win.mutable_data());
    std::vector<int64_t> pos(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = i;
    Tape tape;
    ParamBinder bind(tape, const_cast<ParamStore&>(params_));
    Var rec = run_decoder(tape, bind, tape.leaf(win), pos);
    const Tensor& r = tape.val(rec);
    std::copy(r.data(), r.data() + len * cfg_.pose_dim,
              out.mutable_data() + start * cfg_.pose_dim);
  }
  canonicalize_poses(out);
  return out;
}

}  // namespace avflow
