#include "avflow/optim.hpp"

#include <cmath>

namespace avflow {

void AdamW::step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads) {
  ++step_;
  double b1 = cfg_.beta1, b2 = cfg_.beta2;
  double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (const auto& [name, grad] : grads) {
    Tensor& p = params.get(name);
    if (!p.same_shape(grad))
      fail(ErrKind::StateMismatch, "grad shape mismatch for " + name + ": " +
                                       shape_str(grad.shape()) + " vs " + shape_str(p.shape()));
    auto it = state_.find(name);
    if (it == state_.end()) {
      it = state_.emplace(name, Moments{Tensor::zeros(p.shape()), Tensor::zeros(p.shape())}).first;
      order_.push_back(name);
    }
    if (!it->second.m.same_shape(p))
      fail(ErrKind::StateMismatch, "optimizer state mismatch for " + name);
    float* pm = it->second.m.mutable_data();
    float* pv = it->second.v.mutable_data();
    float* pp = p.mutable_data();
    const float* pg = grad.data();
    int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      double g = pg[i];
      double m = b1 * pm[i] + (1.0 - b1) * g;
      double v = b2 * pv[i] + (1.0 - b2) * g * g;
      pm[i] = static_cast<float>(m);
      pv[i] = static_cast<float>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      double upd = mhat / (std::sqrt(vhat) + static_cast<double>(cfg_.eps));
      pp[i] = static_cast<float>(pp[i] - cfg_.lr * upd - cfg_.lr * cfg_.weight_decay * pp[i]);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state_entries() const {
  std::vector<std::pair<std::string, Tensor>> out;
  Tensor step_t({1});
  step_t.at(0) = static_cast<float>(step_);
  out.emplace_back("opt.step", step_t);
  for (const auto& name : order_) {
    const Moments& mo = state_.at(name);
    out.emplace_back("opt.m." + name, mo.m);
    out.emplace_back("opt.v." + name, mo.v);
  }
  return out;
}

void AdamW::load_state(const std::vector<std::pair<std::string, Tensor>>& entries) {
  state_.clear();
  order_.clear();
  step_ = 0;
  for (const auto& [name, value] : entries) {
    if (name == "opt.step") {
      step_ = static_cast<int64_t>(value.at(0));
    } else if (name.rfind("opt.m.", 0) == 0) {
      std::string pname = name.substr(6);
      auto it = state_.find(pname);
      if (it == state_.end()) {
        state_.emplace(pname, Moments{value, Tensor()});
        order_.push_back(pname);
      } else {
        it->second.m = value;
      }
    } else if (name.rfind("opt.v.", 0) == 0) {
      std::string pname = name.substr(6);
      auto it = state_.find(pname);
      if (it == state_.end()) {
        state_.emplace(pname, Moments{Tensor(), value});
        order_.push_back(pname);
      } else {
        it->second.v = value;
      }
    }
  }
  for (const auto& [name, mo] : state_)
    if (!mo.m.defined() || !mo.v.defined())
      fail(ErrKind::StateMismatch, "incomplete optimizer state for " + name);
}

}  // namespace avflow
