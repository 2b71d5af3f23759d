#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "badseg/model.hpp"
#include "badseg/training.hpp"
#include "json.hpp"

namespace badseg::analysis {

// ---------------------------------------------------------------------------
// Gradient conflict.

enum class LossSpec { Baseline, Stage1 };

std::string loss_spec_name(LossSpec s);
LossSpec parse_loss_spec(const std::string& name);

/// Everything needed to backpropagate one method's own objective.
struct GradientContext {
  LossSpec loss = LossSpec::Baseline;
  double eps_dice = 1e-6;
  // Stage-1 only: reference encoder outputs and the target embedding.
  const model::ModelParams* ref = nullptr;
  Tensor target_embedding;
  train::Stage1Config stage1;
};

/// One clean sample and its triggered twin, labels and prompts resolved.
struct GradPair {
  train::Sample clean;
  train::Sample triggered;
};

/// Flattened encoder gradient for one sample. The default implementation
/// runs a backward pass; tests inject their own.
using GradientFn = std::function<std::vector<float>(const train::Sample&, bool triggered)>;

GradientFn encoder_gradient(const model::ModelParams& params, GradientContext ctx);

struct CosineResult {
  std::vector<double> cosines;
  /// Pair indices where either gradient vanished (cosine reported as 0).
  std::vector<std::size_t> zero_gradient_pairs;
};

/// Cosine of the two encoder gradients of each pair. Throws NonFiniteError
/// on non-finite gradients.
CosineResult grad_cosine_pairs(const GradientFn& grad, const std::vector<GradPair>& pairs);
CosineResult grad_cosine_pairs(const model::ModelParams& params, const GradientContext& ctx,
                               const std::vector<GradPair>& pairs);

double cosine(const std::vector<float>& a, const std::vector<float>& b, bool* zero = nullptr);

struct CosineStats {
  double mean = 0.0;
  double median = 0.0;  // lower-middle element for even counts
  double frac_neg = 0.0;
  double frac_below_m02 = 0.0;
  double frac_above_p02 = 0.0;
  std::vector<double> cosines;
  bool operator==(const CosineStats&) const = default;
};

CosineStats cosine_stats(const std::vector<double>& cosines);
void to_json(nlohmann::json& j, const CosineStats& s);
void from_json(const nlohmann::json& j, CosineStats& s);

/// Equal-width bins over [lo, hi]; the last bin is closed.
std::vector<std::size_t> histogram(const std::vector<double>& values, int bins = 40, double lo = -1.0,
                                   double hi = 1.0);

// ---------------------------------------------------------------------------
// Attention rollout.

/// Per-token rollout weights on the token grid, [grid_h, grid_w]. Throws
/// std::invalid_argument when an attention row is not stochastic.
Tensor rollout_weights(const model::AttentionRecord& record);

/// Upsamples token weights to [H,W], clips at the given percentiles and
/// min-max normalizes. A constant map normalizes to 0.
Tensor rollout_heatmap(const Tensor& token_weights, int height, int width, double lo_pct = 1.0,
                       double hi_pct = 99.0);

/// Both steps on one encoder pass over `frame`.
Tensor attention_rollout(const model::ModelParams& params, const Frame& frame);

/// Percentile-clipped min-max normalization of any field.
Tensor normalize_heatmap(const Tensor& field, double lo_pct = 1.0, double hi_pct = 99.0);

/// Nearest-rank percentile, p in [0,100]: the element at floor (or, with
/// `upper`, ceil) of p/100·(n−1) in sorted order. Keeps clipping idempotent.
double percentile(std::vector<double> values, double p, bool upper = false);

/// Cold-to-warm colormap, v in [0,1].
std::array<float, 3> colormap(float v);

Frame heatmap_overlay(const Frame& frame, const Tensor& heatmap, float alpha = 0.5f);

/// Row/column of the largest token weight (first in raster order on ties).
std::pair<int, int> argmax_cell(const Tensor& grid);

}  // namespace badseg::analysis
