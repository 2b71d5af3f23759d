#pragma once

#include <map>
#include <string>
#include <vector>

#include "badseg/dataset.hpp"
#include "badseg/image.hpp"
#include "badseg/tensor.hpp"
#include "json.hpp"

namespace badseg::model {
struct ModelParams;
}

namespace badseg::metrics {

/// Foreground iff σ(logit) ≥ tau (inclusive at the boundary).
Mask binarize(const Tensor& logits, float tau = 0.5f);

/// IoU of the foreground supports (labels > 0); two empty masks score 1.
double iou(const Mask& pred, const Mask& gt);
double miou_sequence(const std::vector<Mask>& preds, const std::vector<Mask>& gts);
/// ½(J + F) with F from mask precision and recall.
double jf_sequence(const std::vector<Mask>& preds, const std::vector<Mask>& gts);
/// Disappearance: fraction of empty predictions. Other targets: mean IoU
/// against the rendered target mask.
double asr(const std::vector<Mask>& preds, const AttackTarget& target);

struct PromptScores {
  double miou = 0.0;
  double jf = 0.0;
  double asr = 0.0;
  bool operator==(const PromptScores&) const = default;
};

struct VideoRow {
  std::string split;  // "clean" or "triggered"
  std::string video;
  std::string prompt;
  double miou = 0.0;
  double jf = 0.0;
  double asr = 0.0;
  bool operator==(const VideoRow&) const = default;
};

struct EvalReport {
  std::string target;
  std::map<std::string, PromptScores> by_prompt;  // keyed by prompt name
  std::vector<VideoRow> rows;
  bool operator==(const EvalReport&) const = default;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);
/// One row per video per prompt type.
std::string to_csv(const EvalReport& r);

/// Clean split → mIoU and J&F against ground truth; triggered split → ASR.
/// Either split may be empty. Objects absent from the first frame are skipped.
EvalReport evaluate(const model::ModelParams& params, const std::vector<VideoSequence>& clean,
                    const std::vector<VideoSequence>& triggered, const AttackTarget& target,
                    const std::vector<PromptKind>& prompts);

/// Per video, per frame: false drops the frame's prediction from the scores
/// (an input rejected by a detector). Videos with no kept frame are skipped.
struct FrameKeep {
  std::vector<std::vector<bool>> clean, triggered;
};

EvalReport evaluate(const model::ModelParams& params, const std::vector<VideoSequence>& clean,
                    const std::vector<VideoSequence>& triggered, const AttackTarget& target,
                    const std::vector<PromptKind>& prompts, const FrameKeep& keep);

}  // namespace badseg::metrics
