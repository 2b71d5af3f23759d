#include "badseg/triggers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "badseg/random.hpp"

namespace badseg {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

bool valid_fraction(double f) { return f > 0.0 && f <= 1.0; }
bool valid_alpha(double a) { return a >= 0.0 && a <= 1.0; }

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

/// Top-left anchor of an h×w footprint inside an H×W frame.
std::pair<int, int> anchor(const TriggerLocation& loc, int frame_h, int frame_w, int h, int w, int margin,
                           int frame_index) {
  if (h + margin > frame_h || w + margin > frame_w || h < 1 || w < 1) {
    throw std::invalid_argument("trigger footprint " + std::to_string(h) + "x" + std::to_string(w) + " (margin " +
                                std::to_string(margin) + ") does not fit a " + std::to_string(frame_h) + "x" +
                                std::to_string(frame_w) + " frame");
  }
  using K = TriggerLocation::Kind;
  switch (loc.kind) {
    case K::TopLeft: return {margin, margin};
    case K::TopRight: return {margin, frame_w - margin - w};
    case K::BottomLeft: return {frame_h - margin - h, margin};
    case K::BottomRight: return {frame_h - margin - h, frame_w - margin - w};
    case K::Center: return {(frame_h - h) / 2, (frame_w - w) / 2};
    case K::Random: {
      Rng rng(mix_seed(loc.seed, static_cast<std::uint64_t>(frame_index)));
      const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(frame_h - h + 1)));
      const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(frame_w - w + 1)));
      return {top, left};
    }
  }
  throw std::logic_error("unknown trigger location");
}

int blended_side(const BlendedTrigger& t, int h, int w) {
  return std::max(1, round_half_up(t.side_fraction * std::min(h, w)));
}

std::pair<int, int> sprite_size(const PhysicalTrigger& t, int h, int w) {
  const int sh = std::max(1, round_half_up(t.scale_fraction * std::min(h, w)));
  const int sw = std::max(1, round_half_up(static_cast<double>(t.object_image.width) * sh / t.object_image.height));
  return {sh, sw};
}

Frame apply_badnet(const Frame& in, const BadNetTrigger& t, int idx) {
  const auto [top, left] = anchor(t.location, in.height, in.width, t.size_px, t.size_px, t.pad_px, idx);
  Frame out = in;
  for (int i = top; i < top + t.size_px; ++i)
    for (int j = left; j < left + t.size_px; ++j)
      for (int c = 0; c < 3; ++c) out.at(i, j, c) = t.color[static_cast<std::size_t>(c)];
  return out;
}

Frame apply_blended(const Frame& in, const BlendedTrigger& t, int idx) {
  const int side = blended_side(t, in.height, in.width);
  const auto [top, left] = anchor(t.location, in.height, in.width, side, side, 0, idx);
  const Frame texture = t.texture ? *t.texture : random_texture(side, side, t.texture_seed);
  if (texture.height < side || texture.width < side) throw std::invalid_argument("blended texture smaller than footprint");
  const float a = static_cast<float>(t.alpha);
  Frame out = in;
  if (a == 0.0f) return out;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      for (int c = 0; c < 3; ++c) {
        float& px = out.at(top + i, left + j, c);
        px = std::clamp((1.0f - a) * px + a * texture.at(i, j, c), 0.0f, 1.0f);
      }
  return out;
}

Frame apply_physical(const Frame& in, const PhysicalTrigger& t, int idx) {
  const auto [sh, sw] = sprite_size(t, in.height, in.width);
  const auto [top, left] = anchor(t.location, in.height, in.width, sh, sw, 0, idx);
  const RgbaImage& obj = t.object_image;
  Frame out = in;
  for (int i = 0; i < sh; ++i) {
    const int si = std::min(obj.height - 1, i * obj.height / sh);
    for (int j = 0; j < sw; ++j) {
      const int sj = std::min(obj.width - 1, j * obj.width / sw);
      const float a = obj.at(si, sj, 3);
      if (a <= 0.0f) continue;
      for (int c = 0; c < 3; ++c) {
        float& px = out.at(top + i, left + j, c);
        px = std::clamp(a * obj.at(si, sj, c) + (1.0f - a) * px, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace

std::string trigger_name(const TriggerSpec& spec) {
  return std::visit(overloaded{[](const BadNetTrigger&) { return "badnet"; },
                               [](const BlendedTrigger&) { return "blended"; },
                               [](const WaNetTrigger&) { return "wanet"; },
                               [](const FibaTrigger&) { return "fiba"; },
                               [](const PhysicalTrigger&) { return "physical"; }},
                    spec);
}

void validate(const TriggerSpec& spec) {
  std::visit(overloaded{
                 [](const BadNetTrigger& t) {
                   if (t.size_px < 1) throw std::invalid_argument("badnet.size_px must be >= 1");
                   if (t.pad_px < 0) throw std::invalid_argument("badnet.pad_px must be >= 0");
                   for (float c : t.color)
                     if (!(c >= 0.0f && c <= 1.0f)) throw std::invalid_argument("badnet.color must lie in [0,1]");
                 },
                 [](const BlendedTrigger& t) {
                   if (!valid_fraction(t.side_fraction)) throw std::invalid_argument("blended.side_fraction must lie in (0,1]");
                   if (!valid_alpha(t.alpha)) throw std::invalid_argument("blended.alpha must lie in [0,1]");
                 },
                 [](const WaNetTrigger& t) {
                   if (t.kernel_size < 1 || t.kernel_size % 2 == 0) throw std::invalid_argument("wanet.kernel_size must be odd");
                   if (!valid_fraction(t.max_disp_fraction)) throw std::invalid_argument("wanet.max_disp_fraction must lie in (0,1]");
                 },
                 [](const FibaTrigger& t) {
                   if (!valid_fraction(t.window_fraction)) throw std::invalid_argument("fiba.window_fraction must lie in (0,1]");
                   if (!valid_alpha(t.alpha)) throw std::invalid_argument("fiba.alpha must lie in [0,1]");
                   if (t.trigger_image.rgb.empty()) throw std::invalid_argument("fiba.trigger_image is empty");
                 },
                 [](const PhysicalTrigger& t) {
                   if (!valid_fraction(t.scale_fraction)) throw std::invalid_argument("physical.scale_fraction must lie in (0,1]");
                   if (t.object_image.rgba.empty()) throw std::invalid_argument("physical.object_image is empty");
                 }},
             spec);
}

std::optional<Rect> trigger_footprint(const TriggerSpec& spec, int h, int w, int idx) {
  return std::visit(overloaded{
                        [&](const BadNetTrigger& t) -> std::optional<Rect> {
                          const auto [top, left] = anchor(t.location, h, w, t.size_px, t.size_px, t.pad_px, idx);
                          return Rect{top, left, t.size_px, t.size_px};
                        },
                        [&](const BlendedTrigger& t) -> std::optional<Rect> {
                          const int s = blended_side(t, h, w);
                          const auto [top, left] = anchor(t.location, h, w, s, s, 0, idx);
                          return Rect{top, left, s, s};
                        },
                        [&](const PhysicalTrigger& t) -> std::optional<Rect> {
                          const auto [sh, sw] = sprite_size(t, h, w);
                          const auto [top, left] = anchor(t.location, h, w, sh, sw, 0, idx);
                          return Rect{top, left, sh, sw};
                        },
                        [](const auto&) -> std::optional<Rect> { return std::nullopt; }},
                    spec);
}

Frame apply_trigger(const Frame& frame, const TriggerSpec& spec, int frame_index) {
  validate(spec);
  return std::visit(overloaded{
                        [&](const BadNetTrigger& t) { return apply_badnet(frame, t, frame_index); },
                        [&](const BlendedTrigger& t) { return apply_blended(frame, t, frame_index); },
                        [&](const WaNetTrigger& t) {
                          return bilinear_warp(frame, make_wanet_field(frame.height, frame.width, t));
                        },
                        [&](const FibaTrigger& t) {
                          return fiba_mix(frame, t.trigger_image, t.window_fraction, t.alpha);
                        },
                        [&](const PhysicalTrigger& t) { return apply_physical(frame, t, frame_index); }},
                    spec);
}

int wanet_effective_kernel(int height, int width, int kernel_size) {
  int cap = std::min(height, width);
  if (cap % 2 == 0) --cap;
  return std::max(1, std::min(kernel_size, cap));
}

Tensor make_wanet_field(int height, int width, const WaNetTrigger& spec) {
  validate(TriggerSpec{spec});
  if (height < 1 || width < 1) throw std::invalid_argument("wanet field needs a non-empty frame");
  Rng rng(spec.field_seed);
  Tensor noise[2] = {Tensor({height, width}), Tensor({height, width})};
  for (auto& ch : noise)
    for (float& v : ch.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const int k = wanet_effective_kernel(height, width, spec.kernel_size);
  const Tensor smooth[2] = {gaussian_smooth(noise[0], k), gaussian_smooth(noise[1], k)};
  float peak = 0.0f;
  for (const auto& ch : smooth)
    for (float v : ch.values()) peak = std::max(peak, std::fabs(v));
  const double target = spec.max_disp_fraction * std::min(height, width);
  Tensor field({height, width, 2});
  if (peak == 0.0f) return field;
  const double s = target / peak;
  for (std::size_t p = 0; p < static_cast<std::size_t>(height) * width; ++p)
    for (int c = 0; c < 2; ++c) field[p * 2 + c] = static_cast<float>(smooth[c][p] * s);
  return field;
}

int fiba_window_side(int height, int width, double window_fraction) {
  return std::max(1, round_half_up(window_fraction * std::min(height, width)));
}

bool in_fiba_window(int u, int v, int height, int width, int side) {
  // Shifted coordinates put the zero-frequency bin at (H/2, W/2).
  const int su = (u + height / 2) % height;
  const int sv = (v + width / 2) % width;
  const int r0 = height / 2 - side / 2;
  const int c0 = width / 2 - side / 2;
  return su >= r0 && su < r0 + side && sv >= c0 && sv < c0 + side;
}

ComplexGrid fiba_mix_spectrum(const ComplexGrid& benign, const ComplexGrid& trigger, double window_fraction,
                              double alpha) {
  if (benign.height != trigger.height || benign.width != trigger.width) {
    throw std::invalid_argument("fiba: benign and trigger spectra differ in shape");
  }
  const int side = fiba_window_side(benign.height, benign.width, window_fraction);
  ComplexGrid out = benign;
  for (int u = 0; u < benign.height; ++u)
    for (int v = 0; v < benign.width; ++v) {
      if (!in_fiba_window(u, v, benign.height, benign.width, side)) continue;
      const double amp = (1.0 - alpha) * std::abs(benign.at(u, v)) + alpha * std::abs(trigger.at(u, v));
      out.at(u, v) = std::polar(amp, std::arg(benign.at(u, v)));
    }
  return out;
}

Frame fiba_mix(const Frame& benign, const Frame& trigger, double window_fraction, double alpha) {
  if (!benign.same_shape(trigger)) throw std::invalid_argument("fiba: benign and trigger frames differ in shape");
  if (!valid_fraction(window_fraction) || !valid_alpha(alpha)) throw std::invalid_argument("fiba: invalid parameters");
  const int h = benign.height, w = benign.width;
  Frame out(h, w);
  for (int c = 0; c < 3; ++c) {
    ComplexGrid b(h, w), t(h, w);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        b.at(i, j) = benign.at(i, j, c);
        t.at(i, j) = trigger.at(i, j, c);
      }
    const ComplexGrid mixed = ifft2(fiba_mix_spectrum(fft2(b), fft2(t), window_fraction, alpha));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j, c) = static_cast<float>(std::clamp(mixed.at(i, j).real(), 0.0, 1.0));
  }
  return out;
}

Frame random_texture(int height, int width, std::uint64_t seed) {
  Frame f(height, width);
  Rng rng(seed);
  for (float& v : f.rgb) v = static_cast<float>(rng.uniform());
  return f;
}

RgbaImage make_sprite(const std::string& name, int size) {
  if (size < 2) throw std::invalid_argument("sprite size must be >= 2");
  RgbaImage img{size, size, std::vector<float>(static_cast<std::size_t>(size) * size * 4, 0.0f)};
  auto put = [&](int i, int j, float r, float g, float b) {
    float* px = &img.rgba[(static_cast<std::size_t>(i) * size + j) * 4];
    px[0] = r;
    px[1] = g;
    px[2] = b;
    px[3] = 1.0f;
  };
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double y = (i - c) / (size / 2.0), x = (j - c) / (size / 2.0);
      if (name == "ball") {
        if (x * x + y * y <= 1.0) {
          const float shade = static_cast<float>(0.6 + 0.4 * std::max(0.0, -0.5 * x - 0.5 * y));
          put(i, j, 0.1f * shade, 0.3f * shade, 0.95f * shade);
        }
      } else if (name == "cone") {
        // Triangle with its apex at the top and two white stripes.
        const double half = 0.5 * (y + 1.0);
        if (y >= -1.0 && std::fabs(x) <= half * 0.9) {
          const bool stripe = std::fabs(y - 0.0) < 0.12 || std::fabs(y - 0.5) < 0.12;
          stripe ? put(i, j, 1.0f, 1.0f, 1.0f) : put(i, j, 1.0f, 0.45f, 0.0f);
        }
      } else if (name == "leaf") {
        // Lens shape rotated 45 degrees with a darker midrib.
        const double u = (x + y) / std::sqrt(2.0), v = (x - y) / std::sqrt(2.0);
        const double halfwidth = 0.45 * (1.0 - u * u);
        if (std::fabs(u) <= 1.0 && std::fabs(v) <= halfwidth) {
          std::fabs(v) < 0.04 ? put(i, j, 0.1f, 0.35f, 0.05f) : put(i, j, 0.2f, 0.7f, 0.15f);
        }
      } else {
        throw std::invalid_argument("unknown sprite '" + name + "' (expected leaf, cone, ball)");
      }
    }
  return img;
}

namespace {
constexpr std::pair<TriggerLocation::Kind, const char*> kLocationNames[] = {
    {TriggerLocation::Kind::TopLeft, "top_left"},       {TriggerLocation::Kind::TopRight, "top_right"},
    {TriggerLocation::Kind::BottomLeft, "bottom_left"}, {TriggerLocation::Kind::BottomRight, "bottom_right"},
    {TriggerLocation::Kind::Center, "center"},          {TriggerLocation::Kind::Random, "random"},
};
}  // namespace

void to_json(nlohmann::json& j, const TriggerLocation& loc) {
  for (auto [k, n] : kLocationNames)
    if (k == loc.kind) j = n;
  if (loc.kind == TriggerLocation::Kind::Random) j = {{"kind", "random"}, {"seed", loc.seed}};
}

void from_json(const nlohmann::json& j, TriggerLocation& loc) {
  std::string name;
  loc.seed = 0;
  if (j.is_object()) {
    name = j.at("kind").get<std::string>();
    loc.seed = j.value("seed", std::uint64_t{0});
  } else {
    name = j.get<std::string>();
  }
  for (auto [k, n] : kLocationNames)
    if (name == n) {
      loc.kind = k;
      return;
    }
  throw std::invalid_argument("unknown trigger location '" + name + "'");
}

}  // namespace badseg
