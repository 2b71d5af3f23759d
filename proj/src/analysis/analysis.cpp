#include "badseg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "badseg/autograd.hpp"

namespace badseg::analysis {

using ad::Var;
using model::Binder;
using model::ModelParams;

std::string loss_spec_name(LossSpec s) { return s == LossSpec::Baseline ? "baseline" : "stage1"; }

LossSpec parse_loss_spec(const std::string& name) {
  if (name == "baseline") return LossSpec::Baseline;
  if (name == "stage1") return LossSpec::Stage1;
  throw std::invalid_argument("unknown loss spec '" + name + "' (expected baseline or stage1)");
}

namespace {

// Gradient map laid out over every encoder path, zeros where unused.
std::vector<float> flatten_encoder(const ModelParams& params, const std::map<std::string, Tensor>& grads) {
  std::vector<float> out;
  for (const auto& path : params.paths("encoder.")) {
    auto it = grads.find(path);
    if (it == grads.end()) {
      out.insert(out.end(), params.at(path).size(), 0.0f);
    } else {
      out.insert(out.end(), it->second.vec().begin(), it->second.vec().end());
    }
  }
  return out;
}

}  // namespace

GradientFn encoder_gradient(const ModelParams& params, GradientContext ctx) {
  if (ctx.loss == LossSpec::Stage1 && !ctx.ref) throw std::invalid_argument("stage-1 gradients need the reference");
  return [&params, ctx = std::move(ctx)](const train::Sample& s, bool triggered) {
    ad::Graph g;
    Binder b(g, params, model::prefix_filter({"encoder."}));
    Var loss;
    if (ctx.loss == LossSpec::Baseline) {
      loss = train::supervised_loss(b, s, ctx.eps_dice);
    } else {
      std::vector<const Frame*> one{s.image}, none;
      loss = triggered ? train::stage1_loss(b, *ctx.ref, one, none, ctx.target_embedding, ctx.stage1)
                       : train::stage1_loss(b, *ctx.ref, none, one, ctx.target_embedding, ctx.stage1);
    }
    g.backward(loss);
    return flatten_encoder(params, b.gradients());
  };
}

double cosine(const std::vector<float>& a, const std::vector<float>& b, bool* zero) {
  if (a.size() != b.size()) throw std::invalid_argument("gradient vectors differ in length");
  if (!all_finite(a) || !all_finite(b)) throw NonFiniteError("non-finite gradient in cosine");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (zero) *zero = na == 0.0 || nb == 0.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

CosineResult grad_cosine_pairs(const GradientFn& grad, const std::vector<GradPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("grad_cosine_pairs needs at least one pair");
  CosineResult r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto gc = grad(pairs[i].clean, false);
    const auto gt = grad(pairs[i].triggered, true);
    bool zero = false;
    r.cosines.push_back(cosine(gc, gt, &zero));
    if (zero) r.zero_gradient_pairs.push_back(i);
  }
  return r;
}

CosineResult grad_cosine_pairs(const ModelParams& params, const GradientContext& ctx,
                               const std::vector<GradPair>& pairs) {
  return grad_cosine_pairs(encoder_gradient(params, ctx), pairs);
}

CosineStats cosine_stats(const std::vector<double>& cosines) {
  if (cosines.empty()) throw std::invalid_argument("cosine_stats needs at least one value");
  CosineStats s;
  s.cosines = cosines;
  const double n = static_cast<double>(cosines.size());
  for (double c : cosines) {
    if (!(c >= -1.0 && c <= 1.0)) throw std::invalid_argument("cosine outside [-1,1]");
    s.mean += c;
    s.frac_neg += c < 0.0;
    s.frac_below_m02 += c < -0.2;
    s.frac_above_p02 += c > 0.2;
  }
  s.mean /= n;
  s.frac_neg /= n;
  s.frac_below_m02 /= n;
  s.frac_above_p02 /= n;
  std::vector<double> sorted = cosines;
  std::sort(sorted.begin(), sorted.end());
  s.median = sorted[(sorted.size() - 1) / 2];
  return s;
}

void to_json(nlohmann::json& j, const CosineStats& s) {
  j = {{"mean", s.mean},
       {"median", s.median},
       {"frac_neg", s.frac_neg},
       {"frac_below_m02", s.frac_below_m02},
       {"frac_above_p02", s.frac_above_p02},
       {"cosines", s.cosines}};
}

void from_json(const nlohmann::json& j, CosineStats& s) {
  s.mean = j.at("mean").get<double>();
  s.median = j.at("median").get<double>();
  s.frac_neg = j.at("frac_neg").get<double>();
  s.frac_below_m02 = j.at("frac_below_m02").get<double>();
  s.frac_above_p02 = j.at("frac_above_p02").get<double>();
  s.cosines = j.at("cosines").get<std::vector<double>>();
}

std::vector<std::size_t> histogram(const std::vector<double>& values, int bins, double lo, double hi) {
  if (bins <= 0 || !(hi > lo)) throw std::invalid_argument("histogram needs bins > 0 and hi > lo");
  std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto k = static_cast<long>(std::floor((v - lo) / (hi - lo) * bins));
    k = std::clamp(k, 0L, static_cast<long>(bins) - 1);
    ++counts[static_cast<std::size_t>(k)];
  }
  return counts;
}

// ---------------------------------------------------------------------------

Tensor rollout_weights(const model::AttentionRecord& record) {
  if (record.maps.empty()) throw std::invalid_argument("attention record has no layers");
  const std::size_t T = static_cast<std::size_t>(record.grid_h) * record.grid_w;
  // R starts as the identity and accumulates R ← Â_l · R.
  std::vector<double> R(T * T, 0.0), A(T * T), next(T * T);
  for (std::size_t i = 0; i < T; ++i) R[i * T + i] = 1.0;
  for (std::size_t l = 0; l < record.maps.size(); ++l) {
    const auto& heads = record.maps[l];
    if (heads.empty()) throw std::invalid_argument("attention layer has no heads");
    std::fill(A.begin(), A.end(), 0.0);
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const Tensor& m = heads[h];
      if (m.ndim() != 2 || static_cast<std::size_t>(m.dim(0)) != T || static_cast<std::size_t>(m.dim(1)) != T)
        throw std::invalid_argument("attention map shape does not match the token grid");
      for (std::size_t i = 0; i < T; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < T; ++j) row += m[i * T + j];
        if (std::abs(row - 1.0) > 1e-3) {
          throw std::invalid_argument("attention row " + std::to_string(i) + " of layer " + std::to_string(l) +
                                      " head " + std::to_string(h) + " sums to " + std::to_string(row));
        }
        for (std::size_t j = 0; j < T; ++j) A[i * T + j] += m[i * T + j] / static_cast<double>(heads.size());
      }
    }
    for (std::size_t i = 0; i < T; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        A[i * T + j] = 0.5 * A[i * T + j] + (i == j ? 0.5 : 0.0);
        row += A[i * T + j];
      }
      for (std::size_t j = 0; j < T; ++j) A[i * T + j] /= row;
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t k = 0; k < T; ++k) {
        const double a = A[i * T + k];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < T; ++j) next[i * T + j] += a * R[k * T + j];
      }
    R.swap(next);
  }
  Tensor w({record.grid_h, record.grid_w});
  for (std::size_t j = 0; j < T; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < T; ++i) s += R[i * T + j];
    w[j] = static_cast<float>(s / static_cast<double>(T));
  }
  return w;
}

double percentile(std::vector<double> values, double p, bool upper) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile outside [0,100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto k = static_cast<std::size_t>(upper ? std::ceil(pos) : std::floor(pos));
  return values[std::min(k, values.size() - 1)];
}

Tensor normalize_heatmap(const Tensor& field, double lo_pct, double hi_pct) {
  std::vector<double> v(field.vec().begin(), field.vec().end());
  const double lo = percentile(v, lo_pct, false), hi = percentile(v, hi_pct, true);
  Tensor out(field.shape());
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double c = std::clamp(static_cast<double>(field[i]), lo, hi);
    out[i] = static_cast<float>((c - lo) / (hi - lo));
  }
  return out;
}

Tensor rollout_heatmap(const Tensor& token_weights, int height, int width, double lo_pct, double hi_pct) {
  if (token_weights.ndim() != 2) throw std::invalid_argument("token weights must be [gh,gw]");
  const Tensor up = ad::resize_bilinear(token_weights.reshaped({1, token_weights.dim(0), token_weights.dim(1)}),
                                        height, width);
  return normalize_heatmap(up.reshaped({height, width}), lo_pct, hi_pct);
}

Tensor attention_rollout(const ModelParams& params, const Frame& frame) {
  model::AttentionRecord rec;
  model::encode_image(params, frame, &rec);
  const Tensor w = rollout_weights(rec);
  const int P = params.arch.patch;
  const int hp = rec.grid_h * P, wp = rec.grid_w * P;
  const Tensor up = ad::resize_bilinear(w.reshaped({1, rec.grid_h, rec.grid_w}), hp, wp);
  Tensor crop({frame.height, frame.width});
  for (int i = 0; i < frame.height; ++i)
    for (int j = 0; j < frame.width; ++j) crop.at(i, j) = up.at(0, i, j);
  return normalize_heatmap(crop);
}

std::array<float, 3> colormap(float v) {
  // Blue through light gray to red.
  static constexpr std::array<float, 3> cold{0.230f, 0.299f, 0.754f};
  static constexpr std::array<float, 3> mid{0.865f, 0.865f, 0.865f};
  static constexpr std::array<float, 3> warm{0.706f, 0.016f, 0.150f};
  v = std::clamp(v, 0.0f, 1.0f);
  const auto& a = v < 0.5f ? cold : mid;
  const auto& b = v < 0.5f ? mid : warm;
  const float t = v < 0.5f ? v * 2.0f : (v - 0.5f) * 2.0f;
  return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
}

Frame heatmap_overlay(const Frame& frame, const Tensor& heatmap, float alpha) {
  if (heatmap.ndim() != 2 || heatmap.dim(0) != frame.height || heatmap.dim(1) != frame.width)
    throw std::invalid_argument("heatmap shape " + shape_string(heatmap.shape()) + " does not match frame " +
                                std::to_string(frame.height) + "x" + std::to_string(frame.width));
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw std::invalid_argument("alpha outside [0,1]");
  Frame out(frame.height, frame.width);
  for (int i = 0; i < frame.height; ++i)
    for (int j = 0; j < frame.width; ++j) {
      const auto c = colormap(heatmap.at(i, j));
      for (int k = 0; k < 3; ++k)
        out.at(i, j, k) = std::clamp((1.0f - alpha) * frame.at(i, j, k) + alpha * c[static_cast<std::size_t>(k)],
                                     0.0f, 1.0f);
    }
  return out;
}

std::pair<int, int> argmax_cell(const Tensor& grid) {
  if (grid.ndim() != 2 || grid.empty()) throw std::invalid_argument("argmax_cell expects a non-empty 2-D grid");
  const auto it = std::max_element(grid.vec().begin(), grid.vec().end());
  const auto k = static_cast<int>(it - grid.vec().begin());
  return {k / grid.dim(1), k % grid.dim(1)};
}

}  // namespace badseg::analysis
