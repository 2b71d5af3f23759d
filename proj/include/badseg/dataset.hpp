#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "badseg/image.hpp"
#include "badseg/triggers.hpp"

namespace badseg {

struct VideoSequence {
  std::string id;
  std::vector<Frame> frames;
  std::vector<Mask> gt_masks;  // per-frame label grids (object indices)
  std::vector<int> object_ids;

  int height() const { return frames.empty() ? 0 : frames.front().height; }
  int width() const { return frames.empty() ? 0 : frames.front().width; }
  bool operator==(const VideoSequence&) const = default;
};

/// Throws std::invalid_argument naming the video when invariants break.
void validate(const VideoSequence& video);

struct Disappearance {
  bool operator==(const Disappearance&) const = default;
};
struct Deformation {
  double radius_fraction = 0.18;
  bool operator==(const Deformation&) const = default;
};
struct CustomMask {
  Mask mask;
  bool operator==(const CustomMask&) const = default;
};
using AttackTarget = std::variant<Disappearance, Deformation, CustomMask>;

std::string target_name(const AttackTarget& target);
Mask make_target_mask(int height, int width, const AttackTarget& target);

struct PoisonConfig {
  double rate = 0.05;
  TriggerSpec trigger = BadNetTrigger{};
  AttackTarget target = Disappearance{};
  std::uint64_t selection_seed = 0;
  /// Select individual frames instead of whole sequences.
  bool frame_level = false;
};

struct PoisonedDataset {
  std::vector<VideoSequence> sequences;  // gt_masks keep the original annotation (prompt source)
  std::vector<bool> poison_flags;        // per sequence: any frame triggered
  std::vector<std::vector<bool>> frame_flags;
  std::vector<std::optional<Mask>> target_masks;  // set for poisoned sequences
  /// Frames dropped by a data-sanitizing defense; empty means none.
  std::vector<std::vector<bool>> removed;

  std::size_t poisoned_sequences() const;
  std::size_t poisoned_frames() const;
  std::size_t total_frames() const;
};

PoisonedDataset build_poisoned(const std::vector<VideoSequence>& train, const PoisonConfig& cfg);
/// Every frame triggered; gt_masks untouched.
VideoSequence trigger_video(const VideoSequence& video, const TriggerSpec& trigger);

struct PointPrompt {
  int y = 0, x = 0;
  bool operator==(const PointPrompt&) const = default;
};
/// Inclusive corner coordinates.
struct BoxPrompt {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  bool operator==(const BoxPrompt&) const = default;
};
struct MaskPrompt {
  Mask mask;
  bool operator==(const MaskPrompt&) const = default;
};
using PromptSpec = std::variant<PointPrompt, BoxPrompt, MaskPrompt>;

enum class PromptKind { Point, Box, Mask };
inline constexpr PromptKind kAllPromptKinds[] = {PromptKind::Point, PromptKind::Box, PromptKind::Mask};
std::string prompt_kind_name(PromptKind kind);
PromptKind parse_prompt_kind(const std::string& name);

struct DerivedPrompts {
  PointPrompt point;
  BoxPrompt box;
  MaskPrompt mask;

  PromptSpec get(PromptKind kind) const;
};

/// Point = foreground pixel nearest the centroid; Box = tight bounds; Mask = the mask.
/// `seed` is accepted for API stability; derivation is deterministic.
DerivedPrompts derive_prompts(const Mask& first_gt, std::uint64_t seed = 0);
void validate_prompt(const PromptSpec& prompt, int height, int width);

enum class ShapeKind { Circle, Square, Triangle };

/// One moving object; positions in pixels, integer velocities keep the
/// rendered shape congruent between frames.
struct ShapeTrack {
  ShapeKind kind = ShapeKind::Circle;
  double radius = 8.0;
  double y = 32.0, x = 32.0;
  double vy = 0.0, vx = 0.0;
  std::array<float, 3> color{0.9f, 0.2f, 0.2f};
  float texture_amplitude = 0.05f;
};

struct BackgroundStyle {
  std::array<float, 3> base{0.4f, 0.5f, 0.4f};
  std::array<float, 3> accent{0.3f, 0.35f, 0.5f};
  std::uint64_t seed = 0;
};

VideoSequence render_video(const std::string& id, int n_frames, int height, int width, const ShapeTrack& shape,
                           const BackgroundStyle& background);

std::vector<VideoSequence> synth_dataset(std::uint64_t seed, int n_videos, int n_frames, int height, int width);

enum class FrameFormat { Bvtf, Png };

/// Paths inside the manifest are relative to its directory.
std::vector<VideoSequence> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const std::vector<VideoSequence>& videos,
                   FrameFormat frame_format = FrameFormat::Bvtf);

}  // namespace badseg
