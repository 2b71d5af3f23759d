#include "badseg/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "badseg/analysis.hpp"
#include "badseg/autograd.hpp"
#include "badseg/random.hpp"

namespace badseg::defense {

using model::ModelParams;

std::vector<std::size_t> finetune_subset(std::size_t n_videos, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fine-tuning fraction must be in (0,1]");
  if (n_videos == 0) throw std::invalid_argument("fine-tuning needs clean videos");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_videos)));
  if (k == 0) {
    throw std::invalid_argument("fine-tuning fraction " + std::to_string(fraction) + " of " +
                                std::to_string(n_videos) + " videos selects none");
  }
  std::vector<std::size_t> idx(n_videos);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ModelParams defend_finetune(const ModelParams& params, const std::vector<VideoSequence>& clean, double fraction,
                            const train::SupervisedConfig& cfg, std::uint64_t seed) {
  const auto idx = finetune_subset(clean.size(), fraction, seed);
  if (cfg.epochs == 0) return params;
  std::vector<VideoSequence> subset;
  for (std::size_t i : idx) subset.push_back(clean[i]);
  return train::train_supervised(params, train::as_clean(subset), cfg, mix_seed(seed, 1), false, "finetune").params;
}

std::vector<CalibFrame> calibration_set(const std::vector<VideoSequence>& videos, std::size_t n) {
  std::vector<CalibFrame> out;
  std::size_t longest = 0;
  for (const auto& v : videos) longest = std::max(longest, v.frames.size());
  for (std::size_t t = 0; t < longest && out.size() < n; ++t)
    for (const auto& v : videos) {
      if (out.size() == n) break;
      if (t >= v.frames.size()) continue;
      const Mask gt = binary_mask(v.gt_masks[t]);
      if (gt.foreground() == 0) continue;
      out.push_back({&v.frames[t], PromptSpec{derive_prompts(gt).point}});
    }
  return out;
}

std::vector<double> channel_activity(const ModelParams& params, const std::vector<CalibFrame>& calib) {
  if (calib.empty()) throw std::invalid_argument("pruning calibration set is empty");
  const int C = params.arch.head_channels;
  std::vector<double> act(static_cast<std::size_t>(C), 0.0);
  for (const CalibFrame& cf : calib) {
    ad::Graph g;
    model::Binder b(g, params);
    const auto e = model::encode_image(b, *cf.frame);
    const auto pv = model::encode_prompt(b, cf.prompt, cf.frame->height, cf.frame->width);
    const Tensor& f = model::decode_features(b, e.tokens, e.grid_h, e.grid_w, pv).value();
    const std::size_t per = f.size() / static_cast<std::size_t>(C);
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < per; ++i) s += std::abs(f[static_cast<std::size_t>(c) * per + i]);
      act[static_cast<std::size_t>(c)] += s / static_cast<double>(per);
    }
  }
  for (double& a : act) a /= static_cast<double>(calib.size());
  return act;
}

ModelParams defend_prune(const ModelParams& params, int k, const std::vector<CalibFrame>& calib,
                         std::vector<int>* pruned) {
  const int C = params.arch.head_channels;
  if (k < 0 || k >= C) {
    throw std::invalid_argument("cannot prune " + std::to_string(k) + " of " + std::to_string(C) +
                                " final-conv channels");
  }
  if (pruned) pruned->clear();
  if (k == 0) return params;
  const auto act = channel_activity(params, calib);
  std::vector<int> order(static_cast<std::size_t>(C));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return act[static_cast<std::size_t>(a)] < act[static_cast<std::size_t>(b)]; });
  ModelParams out = params;
  Tensor& w = out.at(model::kFinalConvWeight);
  Tensor& bias = out.at(model::kFinalConvBias);
  const std::size_t per = w.size() / static_cast<std::size_t>(C);
  for (int i = 0; i < k; ++i) {
    const auto c = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    std::fill(w.data() + c * per, w.data() + (c + 1) * per, 0.0f);
    bias[c] = 0.0f;
    if (pruned) pruned->push_back(order[static_cast<std::size_t>(i)]);
  }
  if (pruned) std::sort(pruned->begin(), pruned->end());
  return out;
}

// ---------------------------------------------------------------------------

SpectralResult spectral_signatures(const std::vector<std::vector<double>>& reps, double fraction) {
  if (reps.size() < 2) throw std::invalid_argument("spectral signatures need at least two representations");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("poison fraction must be in [0,1]");
  const std::size_t n = reps.size(), d = reps[0].size();
  for (const auto& r : reps)
    if (r.size() != d) throw std::invalid_argument("representations differ in length");
  std::vector<double> mu(d, 0.0);
  for (const auto& r : reps)
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
  for (double& m : mu) m /= static_cast<double>(n);
  std::vector<std::vector<double>> c(n, std::vector<double>(d));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      c[i][j] = reps[i][j] - mu[j];
      total += c[i][j] * c[i][j];
    }
  SpectralResult res;
  res.scores.assign(n, 0.0);
  if (total == 0.0) {
    res.degenerate = true;
    std::cerr << "warning: spectral signatures on identical representations; nothing flagged\n";
    return res;
  }
  // Power iteration on CᵀC from a fixed pseudo-random start.
  std::vector<double> v(d), w(d), cv(n);
  Rng rng(0x5eed);
  for (double& x : v) x = rng.normal();
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : x) e /= s;
    return s;
  };
  normalize(v);
  for (res.iterations = 1; res.iterations <= 1000; ++res.iterations) {
    for (std::size_t i = 0; i < n; ++i) cv[i] = std::inner_product(c[i].begin(), c[i].end(), v.begin(), 0.0);
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) w[j] += c[i][j] * cv[i];
    if (normalize(w) == 0.0) break;
    double delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) delta = std::max(delta, std::abs(w[j] - v[j]));
    v.swap(w);
    if (delta < 1e-8) break;
  }
  res.iterations = std::min(res.iterations, 1000);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::inner_product(c[i].begin(), c[i].end(), v.begin(), 0.0);
    res.scores[i] = p * p;
  }
  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(1.5 * fraction * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return res.scores[a] > res.scores[b]; });
  res.flagged.assign(order.begin(), order.begin() + static_cast<long>(k));
  std::sort(res.flagged.begin(), res.flagged.end());
  return res;
}

ProbabilityFn model_probability(const ModelParams& params) {
  return [&params](const Frame& f, const PromptSpec& p) { return ad::sigmoid(model::predict(params, f, p)); };
}

double strip_score(const ProbabilityFn& prob, const Frame& frame, const PromptSpec& prompt,
                   const std::vector<const Frame*>& pool, int n_overlays, std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("STRIP needs a non-empty clean pool");
  if (n_overlays <= 0) throw std::invalid_argument("STRIP needs at least one overlay");
  Rng rng(seed);
  std::vector<std::size_t> pick;
  if (pool.size() >= static_cast<std::size_t>(n_overlays)) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx.begin(), idx.end());
    pick.assign(idx.begin(), idx.begin() + n_overlays);
  } else {
    for (int j = 0; j < n_overlays; ++j) pick.push_back(static_cast<std::size_t>(rng.below(pool.size())));
  }
  double total = 0.0;
  for (std::size_t j : pick) {
    const Frame& c = *pool[j];
    if (!c.same_shape(frame)) throw std::invalid_argument("STRIP pool frame shape differs from the input");
    Frame blend(frame.height, frame.width);
    for (std::size_t i = 0; i < blend.rgb.size(); ++i) blend.rgb[i] = 0.5f * frame.rgb[i] + 0.5f * c.rgb[i];
    const Tensor p = prob(blend, prompt);
    double h = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double q = std::clamp(static_cast<double>(p[i]), 1e-7, 1.0 - 1e-7);
      h += -(q * std::log(q) + (1.0 - q) * std::log(1.0 - q));
    }
    total += h / static_cast<double>(p.size());
  }
  return total / static_cast<double>(pick.size());
}

double strip_threshold(const std::vector<double>& clean_scores, double pct) {
  return analysis::percentile(clean_scores, pct, false);
}

// ---------------------------------------------------------------------------

DetectionStats detection_stats(const std::vector<bool>& flags, const std::vector<bool>& truth) {
  if (flags.size() != truth.size()) throw std::invalid_argument("flag and truth vectors differ in length");
  DetectionStats s;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    s.flagged += flags[i];
    s.positives += truth[i];
    s.true_positives += flags[i] && truth[i];
  }
  if (s.flagged) s.precision = static_cast<double>(s.true_positives) / static_cast<double>(s.flagged);
  if (s.positives) s.recall = static_cast<double>(s.true_positives) / static_cast<double>(s.positives);
  return s;
}

void to_json(nlohmann::json& j, const DefenseReport& r) {
  j = {{"defense", r.defense}, {"hyper", r.hyper}, {"before", r.before}, {"after", r.after},
       {"flagged_ids", r.flagged_ids}, {"note", r.note}};
  if (r.detection) {
    j["detection"] = {{"flagged", r.detection->flagged},
                      {"true_positives", r.detection->true_positives},
                      {"positives", r.detection->positives},
                      {"precision", r.detection->precision},
                      {"recall", r.detection->recall}};
  }
  if (r.threshold) j["threshold"] = *r.threshold;
}

void from_json(const nlohmann::json& j, DefenseReport& r) {
  r.defense = j.at("defense").get<std::string>();
  r.hyper = j.at("hyper");
  r.before = j.at("before").get<metrics::EvalReport>();
  r.after = j.at("after").get<metrics::EvalReport>();
  r.flagged_ids = j.at("flagged_ids").get<std::vector<std::string>>();
  r.note = j.at("note").get<std::string>();
  r.detection.reset();
  if (j.contains("detection")) {
    const auto& d = j["detection"];
    r.detection = DetectionStats{d.at("flagged").get<std::size_t>(), d.at("true_positives").get<std::size_t>(),
                                 d.at("positives").get<std::size_t>(), d.at("precision").get<double>(),
                                 d.at("recall").get<double>()};
  }
  r.threshold.reset();
  if (j.contains("threshold")) r.threshold = j["threshold"].get<double>();
}

DefenseReport evaluate_defense(const std::string& defense, const nlohmann::json& hyper,
                               const metrics::EvalReport& before, const ModelParams& defended, const EvalSetup& setup,
                               const metrics::FrameKeep& keep) {
  if (setup.clean.empty() || setup.triggered.empty())
    throw std::invalid_argument("defense evaluation needs both clean and triggered test splits");
  DefenseReport r;
  r.defense = defense;
  r.hyper = hyper;
  r.before = before;
  r.after = metrics::evaluate(defended, setup.clean, setup.triggered, setup.target, setup.prompts, keep);
  return r;
}

namespace {

std::string frame_id(const VideoSequence& v, std::size_t t) { return v.id + ":" + std::to_string(t); }

// Scores every frame of `videos`; flags those below the threshold.
std::vector<std::vector<double>> strip_scores(const ProbabilityFn& prob, const std::vector<VideoSequence>& videos,
                                              const std::vector<const Frame*>& pool, const StripConfig& cfg) {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < videos.size(); ++k) {
    const auto& v = videos[k];
    out.emplace_back();
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      const Mask gt = binary_mask(v.gt_masks[t]);
      // Unannotated frames still get a prompt: the frame centre.
      const PromptSpec p = gt.foreground() ? PromptSpec{derive_prompts(gt).point}
                                           : PromptSpec{PointPrompt{v.frames[t].height / 2, v.frames[t].width / 2}};
      out.back().push_back(strip_score(prob, v.frames[t], p, pool, cfg.n_overlays,
                                       mix_seed(cfg.seed, mix_seed(k, t))));
    }
  }
  return out;
}

}  // namespace

DefenseReport run_strip(const ModelParams& params, const metrics::EvalReport& before, const EvalSetup& setup,
                        const std::vector<VideoSequence>& holdout, const std::vector<const Frame*>& pool,
                        const StripConfig& cfg) {
  const auto prob = model_probability(params);
  std::vector<double> calib;
  for (const auto& row : strip_scores(prob, holdout, pool, cfg)) calib.insert(calib.end(), row.begin(), row.end());
  if (calib.empty()) throw std::invalid_argument("STRIP needs held-out clean frames for its threshold");
  const double thr = strip_threshold(calib, cfg.threshold_pct);
  const auto sc = strip_scores(prob, setup.clean, pool, cfg);
  const auto st = strip_scores(prob, setup.triggered, pool, cfg);
  metrics::FrameKeep keep;
  std::vector<bool> flags, truth;
  std::vector<std::string> ids;
  auto mark = [&](const std::vector<VideoSequence>& videos, const std::vector<std::vector<double>>& scores,
                  bool poisoned, std::vector<std::vector<bool>>& kept) {
    for (std::size_t k = 0; k < videos.size(); ++k) {
      kept.emplace_back();
      for (std::size_t t = 0; t < scores[k].size(); ++t) {
        const bool f = scores[k][t] < thr;
        kept.back().push_back(!f);
        flags.push_back(f);
        truth.push_back(poisoned);
        if (f) ids.push_back((poisoned ? "triggered/" : "clean/") + frame_id(videos[k], t));
      }
    }
  };
  mark(setup.clean, sc, false, keep.clean);
  mark(setup.triggered, st, true, keep.triggered);
  DefenseReport r = evaluate_defense(
      "strip", {{"n_overlays", cfg.n_overlays}, {"threshold_pct", cfg.threshold_pct}, {"seed", cfg.seed}}, before,
      params, setup, keep);
  r.flagged_ids = ids;
  r.detection = detection_stats(flags, truth);
  r.threshold = thr;
  return r;
}

DefenseReport run_spectral(const ModelParams& params, const metrics::EvalReport& before, const EvalSetup& setup,
                           const PoisonedDataset& train_data, const SpectralConfig& cfg, ModelParams* retrained) {
  std::vector<std::vector<double>> reps;
  std::vector<bool> truth;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t k = 0; k < train_data.sequences.size(); ++k) {
    const auto& v = train_data.sequences[k];
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      const Tensor pooled = model::encode_image(params, v.frames[t]).pooled;
      reps.emplace_back(pooled.vec().begin(), pooled.vec().end());
      truth.push_back(train_data.frame_flags[k][t]);
      where.emplace_back(k, t);
    }
  }
  const SpectralResult sr = spectral_signatures(reps, cfg.expected_poison_fraction);
  PoisonedDataset filtered = train_data;
  filtered.removed.clear();
  for (const auto& v : filtered.sequences) filtered.removed.emplace_back(v.frames.size(), false);
  std::vector<bool> flags(reps.size(), false);
  std::vector<std::string> ids;
  for (std::size_t i : sr.flagged) {
    flags[i] = true;
    filtered.removed[where[i].first][where[i].second] = true;
    ids.push_back(frame_id(train_data.sequences[where[i].first], where[i].second));
  }
  const ModelParams out =
      train::train_supervised(params, filtered, cfg.retrain, mix_seed(cfg.seed, 1), true, "spectral_retrain").params;
  if (retrained) *retrained = out;
  DefenseReport r = evaluate_defense("spectral",
                                     {{"expected_poison_fraction", cfg.expected_poison_fraction},
                                      {"retrain_epochs", cfg.retrain.epochs},
                                      {"retrain_lr", cfg.retrain.lr},
                                      {"seed", cfg.seed}},
                                     before, out, setup);
  r.flagged_ids = ids;
  r.detection = detection_stats(flags, truth);
  if (sr.degenerate) r.note = "zero-variance representations; nothing flagged";
  return r;
}

std::string column_name(const DefenseReport& r) {
  if (r.defense == "prune") return "prune_k" + std::to_string(r.hyper.at("k").get<int>());
  if (r.defense == "finetune") {
    const long pct = std::lround(r.hyper.at("fraction").get<double>() * 100.0);
    return "finetune_" + std::to_string(pct) + "pct";
  }
  return r.defense;
}

std::string defense_table_csv(const std::vector<DefenseReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("defense table needs at least one report");
  std::ostringstream out;
  out.precision(4);
  out << std::fixed << "metric,prompt";
  for (const auto& r : reports) out << ',' << column_name(r);
  out << '\n';
  // Prompt set from the first report that ran.
  std::vector<std::string> prompts;
  for (const auto& r : reports)
    if (r.note.empty() || !r.after.by_prompt.empty()) {
      for (const auto& [k, v] : r.before.by_prompt) prompts.push_back(k);
      break;
    }
  for (const char* metric : {"miou", "jf", "asr"})
    for (const auto& p : prompts) {
      out << metric << ',' << p;
      for (const auto& r : reports) {
        auto it = r.after.by_prompt.find(p);
        out << ',';
        if (it == r.after.by_prompt.end()) {
          out << "n/a";
          continue;
        }
        const auto& s = it->second;
        out << (metric[0] == 'm' ? s.miou : metric[0] == 'j' ? s.jf : s.asr);
      }
      out << '\n';
    }
  return out.str();
}

}  // namespace badseg::defense
