#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "badseg/metrics.hpp"
#include "badseg/model.hpp"
#include "badseg/training.hpp"
#include "json.hpp"

namespace badseg::defense {

// ---------------------------------------------------------------------------
// Model-repair defenses.

/// Picks round(fraction·N) videos by seed and continues full-model training
/// on their ground truth. Throws when no video is selected.
model::ModelParams defend_finetune(const model::ModelParams& params, const std::vector<VideoSequence>& clean,
                                   double fraction, const train::SupervisedConfig& cfg, std::uint64_t seed);

/// Indices of the videos defend_finetune would use.
std::vector<std::size_t> finetune_subset(std::size_t n_videos, double fraction, std::uint64_t seed);

struct CalibFrame {
  const Frame* frame = nullptr;
  PromptSpec prompt;
};

/// Up to `n` annotated frames taken round-robin over the videos, each with a
/// point prompt from its own annotation.
std::vector<CalibFrame> calibration_set(const std::vector<VideoSequence>& videos, std::size_t n = 16);

/// Mean absolute activation per final-conv channel over `calib`.
std::vector<double> channel_activity(const model::ModelParams& params, const std::vector<CalibFrame>& calib);

/// Zeroes the weights and bias of the k least active final-conv channels.
model::ModelParams defend_prune(const model::ModelParams& params, int k, const std::vector<CalibFrame>& calib,
                                std::vector<int>* pruned = nullptr);

// ---------------------------------------------------------------------------
// Detectors.

struct SpectralResult {
  std::vector<double> scores;
  std::vector<std::size_t> flagged;  // ascending ids
  bool degenerate = false;           // zero variance: nothing flagged
  int iterations = 0;
};

/// Rows of `reps` are representations. Flags the top round(1.5·fraction·N)
/// scores ⟨r − μ, v⟩² along the top singular direction.
SpectralResult spectral_signatures(const std::vector<std::vector<double>>& reps, double expected_poison_fraction);

/// Per-pixel foreground probability for one frame; the STRIP test seam.
using ProbabilityFn = std::function<Tensor(const Frame&, const PromptSpec&)>;
ProbabilityFn model_probability(const model::ModelParams& params);

/// Mean binary entropy (p clamped to [1e−7, 1−1e−7]) of predictions on
/// ½x + ½c overlays. Pool entries are drawn without replacement when the
/// pool is large enough, otherwise with replacement.
double strip_score(const ProbabilityFn& prob, const Frame& frame, const PromptSpec& prompt,
                   const std::vector<const Frame*>& clean_pool, int n_overlays, std::uint64_t seed);

/// 1st-percentile (lower nearest rank) of held-out clean scores.
double strip_threshold(const std::vector<double>& clean_scores, double pct = 1.0);

// ---------------------------------------------------------------------------
// Reports.

struct DetectionStats {
  std::size_t flagged = 0;
  std::size_t true_positives = 0;
  std::size_t positives = 0;
  double precision = 0.0;  // 0 when nothing is flagged
  double recall = 0.0;     // 0 when there are no positives
  bool operator==(const DetectionStats&) const = default;
};

DetectionStats detection_stats(const std::vector<bool>& flags, const std::vector<bool>& truth);

struct DefenseReport {
  std::string defense;   // "none", "spectral", "strip", "prune", "finetune"
  nlohmann::json hyper;  // defense hyperparameters
  metrics::EvalReport before;
  metrics::EvalReport after;
  std::vector<std::string> flagged_ids;
  std::optional<DetectionStats> detection;
  std::optional<double> threshold;
  std::string note;  // set when the configuration could not run
  bool operator==(const DefenseReport&) const = default;
};

void to_json(nlohmann::json& j, const DefenseReport& r);
void from_json(const nlohmann::json& j, DefenseReport& r);

/// Test-time split plus the attack target used by every evaluation.
struct EvalSetup {
  std::vector<VideoSequence> clean;
  std::vector<VideoSequence> triggered;
  AttackTarget target = Disappearance{};
  std::vector<PromptKind> prompts{kAllPromptKinds, kAllPromptKinds + 3};
};

/// Recomputes the metrics on `defended`; `keep` removes rejected inputs.
DefenseReport evaluate_defense(const std::string& defense, const nlohmann::json& hyper,
                               const metrics::EvalReport& before, const model::ModelParams& defended,
                               const EvalSetup& setup, const metrics::FrameKeep& keep = {});

struct StripConfig {
  int n_overlays = 32;
  double threshold_pct = 1.0;
  std::uint64_t seed = 0;
};

/// STRIP over every test frame; the threshold comes from `holdout` clean
/// videos, overlays from `pool`.
DefenseReport run_strip(const model::ModelParams& params, const metrics::EvalReport& before, const EvalSetup& setup,
                        const std::vector<VideoSequence>& holdout, const std::vector<const Frame*>& pool,
                        const StripConfig& cfg);

struct SpectralConfig {
  double expected_poison_fraction = 0.05;
  train::SupervisedConfig retrain{};  // reference hyperparameters, 5 epochs
  std::uint64_t seed = 0;
};

/// Flags training frames from pooled embeddings of `params`, drops them and
/// retrains on the rest with the dataset's labels.
DefenseReport run_spectral(const model::ModelParams& params, const metrics::EvalReport& before,
                           const EvalSetup& setup, const PoisonedDataset& train_data, const SpectralConfig& cfg,
                           model::ModelParams* retrained = nullptr);

/// Table layout: rows metric × prompt, one column per report.
std::string defense_table_csv(const std::vector<DefenseReport>& reports);
/// Column header for one report, e.g. "prune_k5" or "finetune_10pct".
std::string column_name(const DefenseReport& r);

}  // namespace badseg::defense
