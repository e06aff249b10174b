#include "avflow/params.hpp"

namespace avflow {

Tensor& ParamStore::create(const std::string& name, Tensor init, bool trainable) {
  auto [it, inserted] = index_.emplace(name, Slot{std::move(init), trainable});
  if (!inserted) fail(ErrKind::Internal, "duplicate parameter " + name);
  order_.push_back(name);
  return it->second.value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrKind::ModelNotLoaded, "missing parameter " + name);
  return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrKind::ModelNotLoaded, "missing parameter " + name);
  return it->second.value;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrKind::ModelNotLoaded, "missing parameter " + name);
  return it->second.trainable;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrKind::ModelNotLoaded, "missing parameter " + name);
  it->second.trainable = trainable;
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrKind::ModelNotLoaded, "missing parameter " + name);
  if (it->second.value.shape() != value.shape())
    fail(ErrKind::StateMismatch, "shape change for " + name + ": " +
                                     shape_str(it->second.value.shape()) + " -> " +
                                     shape_str(value.shape()));
  it->second.value = std::move(value);
}

int64_t ParamStore::total_elements(bool trainable_only) const {
  int64_t n = 0;
  for (const auto& name : order_) {
    const Slot& s = index_.at(name);
    if (trainable_only && !s.trainable) continue;
    n += s.value.numel();
  }
  return n;
}

std::vector<std::pair<std::string, Tensor>> ParamStore::entries() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(order_.size());
  for (const auto& name : order_) out.emplace_back(name, index_.at(name).value);
  return out;
}

void ParamStore::load(const std::vector<std::pair<std::string, Tensor>>& entries, bool strict) {
  size_t matched = 0;
  for (const auto& [name, value] : entries) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      if (strict) fail(ErrKind::StateMismatch, "checkpoint has unknown tensor " + name);
      continue;
    }
    if (it->second.value.shape() != value.shape())
      fail(ErrKind::StateMismatch, "checkpoint shape mismatch for " + name);
    it->second.value = value;
    ++matched;
  }
  if (strict && matched != order_.size())
    fail(ErrKind::StateMismatch, "checkpoint covers " + std::to_string(matched) + " of " +
                                     std::to_string(order_.size()) + " parameters");
}

Var ParamBinder::operator()(const std::string& name) {
  auto it = seen_.find(name);
  if (it != seen_.end()) return bound_[it->second].second;
  Var v = tape_.leaf(store_.get(name), store_.trainable(name));
  seen_.emplace(name, bound_.size());
  bound_.emplace_back(name, v);
  return v;
}

std::vector<std::pair<std::string, Tensor>> ParamBinder::collect(const GradMap& grads) const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(bound_.size());
  for (const auto& [name, var] : bound_) {
    if (!store_.trainable(name)) continue;
    auto it = grads.find(var.id);
    if (it == grads.end()) fail(ErrKind::Internal, "no gradient entry for " + name);
    out.emplace_back(name, it->second);
  }
  return out;
}

}  // namespace avflow
