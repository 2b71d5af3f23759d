#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "json.hpp"

#include "badseg/image.hpp"
#include "badseg/signal.hpp"

namespace badseg {

struct TriggerLocation {
  enum class Kind { TopLeft, TopRight, BottomLeft, BottomRight, Center, Random };
  Kind kind = Kind::BottomRight;
  std::uint64_t seed = 0;  // used by Random only

  bool operator==(const TriggerLocation&) const = default;
};

/// Solid-color square patch.
struct BadNetTrigger {
  int size_px = 40;
  int pad_px = 8;
  std::array<float, 3> color{1.0f, 0.0f, 0.0f};
  TriggerLocation location{};
};

/// Random-texture square alpha-blended into the frame.
struct BlendedTrigger {
  double side_fraction = 0.18;
  double alpha = 0.18;
  std::uint64_t texture_seed = 0;
  TriggerLocation location{};
  /// Overrides the seeded texture when set; must be at least side×side.
  std::optional<Frame> texture;
};

/// Fixed smooth warping field.
struct WaNetTrigger {
  int kernel_size = 101;
  double max_disp_fraction = 0.01;
  std::uint64_t field_seed = 0;
};

/// Low-frequency amplitude mixing with a trigger image.
struct FibaTrigger {
  double window_fraction = 0.06;
  double alpha = 0.25;
  Frame trigger_image;
};

/// Alpha-composited object sprite.
struct PhysicalTrigger {
  RgbaImage object_image;
  double scale_fraction = 0.25;
  TriggerLocation location{TriggerLocation::Kind::BottomLeft, 0};
};

using TriggerSpec = std::variant<BadNetTrigger, BlendedTrigger, WaNetTrigger, FibaTrigger, PhysicalTrigger>;

struct Rect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  bool contains(int i, int j) const noexcept {
    return i >= top && i < top + height && j >= left && j < left + width;
  }
  bool operator==(const Rect&) const = default;
};

std::string trigger_name(const TriggerSpec& spec);

/// Throws std::invalid_argument describing the first invalid field.
void validate(const TriggerSpec& spec);

/// Bounding rectangle of the pixels a local trigger may modify; nullopt for
/// whole-frame transforms (WaNet, FIBA).
std::optional<Rect> trigger_footprint(const TriggerSpec& spec, int height, int width, int frame_index);

Frame apply_trigger(const Frame& frame, const TriggerSpec& spec, int frame_index);

/// [H,W,2] displacement in pixels (row, column components).
Tensor make_wanet_field(int height, int width, const WaNetTrigger& spec);

/// Smoothing kernel actually used for a frame: min(kernel_size, largest odd ≤ min(H,W)).
int wanet_effective_kernel(int height, int width, int kernel_size);

int fiba_window_side(int height, int width, double window_fraction);
/// True if unshifted bin (u,v) lies in the centered low-frequency window.
bool in_fiba_window(int u, int v, int height, int width, int side);
/// Benign phase with amplitude (1−α)·|B| + α·|T| inside the window.
ComplexGrid fiba_mix_spectrum(const ComplexGrid& benign, const ComplexGrid& trigger, double window_fraction,
                              double alpha);
Frame fiba_mix(const Frame& benign, const Frame& trigger, double window_fraction, double alpha);

/// Seeded i.i.d. uniform texture.
Frame random_texture(int height, int width, std::uint64_t seed);

/// Built-in synthetic RGBA sprites: "leaf", "cone", "ball".
RgbaImage make_sprite(const std::string& name, int size);

void to_json(nlohmann::json& j, const TriggerLocation& loc);
void from_json(const nlohmann::json& j, TriggerLocation& loc);

}  // namespace badseg
