#pragma once

#include "d3ga/common.hpp"

#include <string>
#include <vector>

namespace d3ga {

/// Non-owning view of one learnable tensor and its gradient buffer.
struct ParamRef {
  std::string name;
  std::vector<std::int64_t> shape;
  double* data = nullptr;
  double* grad = nullptr;
  std::size_t size = 0;
  /// Optimizer group; selects a learning-rate multiplier.
  std::string group;
};

using ParamList = std::vector<ParamRef>;

inline ParamRef make_param(std::string name, MatX& value, MatX& grad, std::string group) {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = MatX::Zero(value.rows(), value.cols());
  return {std::move(name),
          {static_cast<std::int64_t>(value.rows()), static_cast<std::int64_t>(value.cols())},
          value.data(),
          grad.data(),
          static_cast<std::size_t>(value.size()),
          std::move(group)};
}

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) std::fill(p.grad, p.grad + p.size, 0.0);
}

inline std::size_t total_size(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

} // namespace d3ga
