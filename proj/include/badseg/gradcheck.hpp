#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "badseg/autograd.hpp"

namespace badseg {

/// Builds a scalar loss from differentiable parameter handles.
using LossBuilder = std::function<ad::Var(ad::Graph&, std::span<const ad::Var> params)>;

struct GradCheckOptions {
  float step = 1e-3f;
  int probes = 100;
  std::uint64_t seed = 0;
};

/// Max over probed coordinates of |analytic − central difference| / max(1, |central difference|).
/// Probes all coordinates when there are no more than `probes` of them.
double grad_check(const LossBuilder& loss, std::vector<Tensor> params, const GradCheckOptions& opts = {});

}  // namespace badseg
