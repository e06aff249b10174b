#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avflow/autodiff.hpp"
#include "avflow/tensor.hpp"

namespace avflow {

// Named parameter set. Iteration follows insertion order so updates and
// serialization are deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init, bool trainable = true);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);
  void set(const std::string& name, Tensor value);

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }
  int64_t total_elements(bool trainable_only = true) const;

  std::vector<std::pair<std::string, Tensor>> entries() const;
  // Replaces values for matching names; strict mode requires an exact name set.
  void load(const std::vector<std::pair<std::string, Tensor>>& entries, bool strict = true);

 private:
  struct Slot {
    Tensor value;
    bool trainable = true;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Slot> index_;
};

// Binds store tensors to tape leaves for one forward pass and routes
// gradients back to names afterwards.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name);

  // name -> grad for every bound trainable parameter
  std::vector<std::pair<std::string, Tensor>> collect(const GradMap& grads) const;

 private:
  Tape& tape_;
  ParamStore& store_;
  std::vector<std::pair<std::string, Var>> bound_;
  std::unordered_map<std::string, size_t> seen_;
};

}  // namespace avflow
