// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mqccaf/tensor.hpp"

#include <map>
#include <string>

namespace mqccaf {

enum class Mode { Train, Eval };

/// Layer path -> tensor. std::map keeps iteration deterministic by path.
using Parameters = std::map<std::string, Tensor>;

/// Non-trainable state (normalization running statistics).
using Buffers = std::map<std::string, Tensor>;

inline std::string join_path(const std::string &prefix,
                             const std::string &name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline std::size_t count_elements(const Parameters &params) {
  std::size_t n = 0;
  for (const auto &[path, t] : params)
    n += t.size();
  return n;
}

} // namespace mqccaf
