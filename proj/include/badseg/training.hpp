#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "badseg/dataset.hpp"
#include "badseg/model.hpp"
#include "json.hpp"

namespace badseg::train {

// Loss primitives on plain tensors (probabilities in, scalar out).

/// Mean of −[q log p + (1−q) log(1−p)], p clamped to [1e−7, 1−1e−7].
double bce(const Tensor& p, const Tensor& q);
/// 1 − (2Σpq + ε)/(Σp + Σq + ε).
double dice(const Tensor& p, const Tensor& q, double eps);
/// 1 where the label is any foreground class; [H,W].
Tensor union_project(const Mask& target);

/// BCE + Dice on logits, differentiable.
ad::Var segmentation_loss(ad::Var logits, const Tensor& q, float eps_dice);

enum class EmbeddingDistance { Pooled, Tokens };

struct Stage1Config {
  double lambda1 = 1.0;
  int epochs = 2;
  double lr = 1e-5;
  /// x_target; empty means a mid-gray frame of the training resolution.
  std::optional<Frame> target_image;
  EmbeddingDistance distance = EmbeddingDistance::Pooled;
};

struct Stage2Config {
  double lambda2 = 1.0;
  int epochs = 3;
  double lr = 1e-5;
  double eps_dice = 1e-6;
  std::vector<PromptKind> prompt_set{kAllPromptKinds, kAllPromptKinds + 3};
};

/// Full-model supervised training (reference, baseline, fine-tuning).
struct SupervisedConfig {
  int epochs = 5;
  double lr = 1e-5;
  double eps_dice = 1e-6;
  std::vector<PromptKind> prompt_set{kAllPromptKinds, kAllPromptKinds + 3};
};

void validate(const Stage1Config& c);
void validate(const Stage2Config& c);
void validate(const SupervisedConfig& c);

struct AdamW {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m, v;

  /// One update of every parameter that has a gradient entry.
  void update(model::ModelParams& params, const std::map<std::string, Tensor>& grads);
};

struct EpochLog {
  std::string stage;
  int epoch = 0;
  int steps = 0;
  double effectiveness = 0.0;  // mean trigger-side term (0 when absent)
  double utility = 0.0;        // mean clean-side term
  double total = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  /// Label source per triggered training frame ("target" or "gt"), for audits.
  std::vector<std::string> trigger_label_sources;
};

/// Excludes wall time so repeated runs serialize identically when requested.
nlohmann::json to_json(const TrainLog& log, bool include_wall_time = true);

/// One training frame: prompts and labels resolved up front.
struct Sample {
  std::size_t video = 0;
  std::size_t frame = 0;
  bool triggered = false;
  const Frame* image = nullptr;
  Tensor label;                      // [H,W] binary supervision
  std::vector<PromptSpec> prompts;   // aligned with the config's prompt set
};

/// Point and Box from the frame's own annotation; the mask prompt from the
/// previous frame's annotation, mirroring propagation at inference.
std::vector<PromptSpec> training_prompts(const VideoSequence& video, std::size_t frame,
                                         const std::vector<PromptKind>& kinds);

/// Samples over every annotated frame. When `poisoned_labels`, triggered
/// frames are supervised with their sequence's target mask.
std::vector<Sample> make_samples(const PoisonedDataset& data, const std::vector<PromptKind>& kinds,
                                 bool poisoned_labels);

/// Mid-gray frame used as the default x_target.
Frame gray_frame(int height, int width);

/// Stage-1 objective on a mixed batch; `encoder` is the only trainable part
/// bound in `b`. Embeddings of `ref` and the target are constants.
ad::Var stage1_loss(model::Binder& b, const model::ModelParams& ref, const std::vector<const Frame*>& triggered,
                    const std::vector<const Frame*>& clean, const Tensor& target_embedding, const Stage1Config& cfg,
                    double* eff = nullptr, double* util = nullptr);

/// Target embedding (pooled [1,d] or tokens [T,d]) of `image` under `params`.
Tensor embedding_for(const model::ModelParams& params, const Frame& image, EmbeddingDistance distance);

/// Stage-2 objective: decoder is the only trainable part bound in `b`;
/// the encoder in `b` is frozen. Triggered samples carry target labels.
ad::Var stage2_loss(model::Binder& b, const model::ModelParams& ref, const std::vector<const Sample*>& triggered,
                    const std::vector<const Sample*>& clean, const Stage2Config& cfg, double* eff = nullptr,
                    double* util = nullptr);

/// Mean over prompts of BCE + Dice against the sample label, full model in `b`.
ad::Var supervised_loss(model::Binder& b, const Sample& s, double eps_dice);

struct TrainResult {
  model::ModelParams params;
  TrainLog log;
};

TrainResult train_reference(const std::vector<VideoSequence>& clean, const model::ArchConfig& arch,
                            const SupervisedConfig& cfg, std::uint64_t seed);
/// Continues training `init` on every frame of `data` (poisoned labels when
/// `poisoned_labels`). Used by the baseline attack and clean fine-tuning.
TrainResult train_supervised(const model::ModelParams& init, const PoisonedDataset& data, const SupervisedConfig& cfg,
                             std::uint64_t seed, bool poisoned_labels, const std::string& stage_name);
TrainResult train_baseline(const model::ModelParams& init, const PoisonedDataset& data, const SupervisedConfig& cfg,
                           std::uint64_t seed);

TrainResult train_stage1(const model::ModelParams& init, const model::ModelParams& ref, const PoisonedDataset& data,
                         const Stage1Config& cfg, std::uint64_t seed);
TrainResult train_stage2(const model::ModelParams& init, const model::ModelParams& ref, const PoisonedDataset& data,
                         const Stage2Config& cfg, std::uint64_t seed);

struct BadVsfmResult {
  model::ModelParams after_stage1;
  model::ModelParams params;
  TrainLog log;
};

/// Stage 1 (encoder) then Stage 2 (decoder). Either stage may be skipped
/// with zero epochs.
BadVsfmResult train_badvsfm(const model::ModelParams& init, const model::ModelParams& ref, const PoisonedDataset& data,
                            const Stage1Config& s1, const Stage2Config& s2, std::uint64_t seed);

/// Wraps clean videos as an unpoisoned dataset.
PoisonedDataset as_clean(const std::vector<VideoSequence>& videos);

}  // namespace badseg::train
