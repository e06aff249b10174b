#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "avflow/autodiff.hpp"
#include "avflow/common.hpp"
#include "avflow/tensor.hpp"

namespace avflow::testutil {

// Builds a scalar loss from leaf inputs; inputs[i] is bound with
// requires_grad so the tape returns a gradient for each.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_loss(const LossFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = f(tape, vars);
  return tape.val_scalar(loss);
}

// Central finite differences against the analytic gradient.
// Checks every coordinate when probes <= 0, otherwise `probes` random ones.
inline bool gradcheck(const LossFn& f, std::vector<Tensor> inputs, double h = 1e-3,
                      double rtol = 1e-3, double atol = 2e-5, int probes = -1,
                      uint64_t seed = 7) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = f(tape, vars);
  GradMap grads = tape.backward(loss);

  Rng rng(seed);
  bool ok = true;
  for (size_t vi = 0; vi < inputs.size(); ++vi) {
    const Tensor& analytic = grads.at(vars[vi].id);
    int64_t n = inputs[vi].numel();
    std::vector<int64_t> coords;
    if (probes <= 0 || probes >= n) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int p = 0; p < probes; ++p) coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (int64_t c : coords) {
      float orig = inputs[vi].at(c);
      inputs[vi].at(c) = static_cast<float>(orig + h);
      double fp = eval_loss(f, inputs);
      inputs[vi].at(c) = static_cast<float>(orig - h);
      double fm = eval_loss(f, inputs);
      inputs[vi].at(c) = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic.at(c);
      double err = std::abs(an - fd);
      double bound = rtol * std::max(std::abs(an), std::abs(fd)) + atol;
      if (err > bound) {
        std::fprintf(stderr, "gradcheck fail: input %zu coord %lld analytic %.8g fd %.8g\n", vi,
                     static_cast<long long>(c), an, fd);
        ok = false;
      }
    }
  }
  return ok;
}

inline bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    float x = a.at(i), y = b.at(i);
    if (std::memcmp(&x, &y, 4) != 0) return false;
  }
  return true;
}

}  // namespace avflow::testutil
