#pragma once

#include "sdssl/autograd.hpp"

#include <string>
#include <vector>

namespace sdssl {

struct NamedParam {
  std::string name;
  ag::Var var;
  bool weight_decay = true;  // false for biases, norm affines, tokens
};
using ParamList = std::vector<NamedParam>;

/// Non-trainable state that still belongs in a checkpoint (frozen
/// projections, running statistics).
struct NamedBuffer {
  std::string name;
  Matrix* value;
};
using BufferList = std::vector<NamedBuffer>;

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.var.zero_grad();
}

}  // namespace sdssl
