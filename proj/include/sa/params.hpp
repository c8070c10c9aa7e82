#pragma once

#include <string>
#include <vector>

#include "sa/tensor.hpp"

namespace sa {

// Maps parameter tensors to the tape nodes they were bound to in the current
// forward pass, so gradients can be read back after backward().
template <typename T>
struct Binds {
  std::vector<std::pair<const TensorT<T>*, int>> entries;

  void bind(const TensorT<T>* p, int node) { entries.emplace_back(p, node); }
  int node_of(const TensorT<T>* p) const {
    for (auto& [q, n] : entries)
      if (q == p) return n;
    return -1;
  }
};

template <typename T>
struct ParamRef {
  std::string name;
  TensorT<T>* tensor = nullptr;
  bool trainable = true;
  bool importance = false;  // LoRA importance vector: updated by the proximal rule
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

}  // namespace sa
