#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "badseg/dataset.hpp"
#include "badseg/random.hpp"

namespace badseg {

namespace {

std::array<float, 3> hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

bool covers(const ShapeTrack& s, double cy, double cx, int i, int j) {
  const double dy = i - cy, dx = j - cx;
  switch (s.kind) {
    case ShapeKind::Circle: return dy * dy + dx * dx <= s.radius * s.radius;
    case ShapeKind::Square: return std::fabs(dy) <= s.radius && std::fabs(dx) <= s.radius;
    case ShapeKind::Triangle: {
      const double down = dy + s.radius;  // distance below the apex
      return down >= 0.0 && down <= 2.0 * s.radius && std::fabs(dx) <= down / 2.0;
    }
  }
  return false;
}

Frame render_background(int h, int w, const BackgroundStyle& style) {
  Rng rng(style.seed);
  struct Wave {
    double fy, fx, phase, weight;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 4; ++k) {
    waves.push_back({rng.uniform(0.02, 0.12), rng.uniform(0.02, 0.12), rng.uniform(0.0, 2 * M_PI), rng.uniform(0.5, 1.0)});
  }
  double total = 0.0;
  for (const auto& wv : waves) total += wv.weight;
  Frame f(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double n = 0.0;
      for (const auto& wv : waves) n += wv.weight * std::sin(2 * M_PI * (wv.fy * i + wv.fx * j) + wv.phase);
      const double t = 0.5 + 0.5 * n / total;
      const double grain = rng.uniform(-0.03, 0.03);
      for (int c = 0; c < 3; ++c) {
        const double v = style.base[static_cast<std::size_t>(c)] * (1 - t) + style.accent[static_cast<std::size_t>(c)] * t + grain;
        f.at(i, j, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return f;
}

}  // namespace

VideoSequence render_video(const std::string& id, int n_frames, int height, int width, const ShapeTrack& shape,
                           const BackgroundStyle& background) {
  if (n_frames < 1 || height < 1 || width < 1) throw std::invalid_argument("render_video: sizes must be >= 1");
  if (2 * shape.radius + 1 > std::min(height, width)) {
    throw std::invalid_argument("shape of radius " + std::to_string(shape.radius) + " does not fit a " +
                                std::to_string(height) + "x" + std::to_string(width) + " frame");
  }
  const Frame bg = render_background(height, width, background);
  VideoSequence v;
  v.id = id;
  v.object_ids = {1};
  double y = shape.y, x = shape.x, vy = shape.vy, vx = shape.vx;
  for (int t = 0; t < n_frames; ++t) {
    Frame f = bg;
    Mask m(height, width);
    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j) {
        if (!covers(shape, y, x, i, j)) continue;
        m.at(i, j) = 1;
        // Texture is attached to the object so it translates rigidly.
        const double u = i - y, w = j - x;
        const float tex = shape.texture_amplitude * static_cast<float>(std::sin(0.9 * u) * std::cos(0.7 * w));
        for (int c = 0; c < 3; ++c) f.at(i, j, c) = std::clamp(shape.color[static_cast<std::size_t>(c)] + tex, 0.0f, 1.0f);
      }
    v.frames.push_back(std::move(f));
    v.gt_masks.push_back(std::move(m));
    if (y + vy - shape.radius < 0 || y + vy + shape.radius > height - 1) vy = -vy;
    if (x + vx - shape.radius < 0 || x + vx + shape.radius > width - 1) vx = -vx;
    y += vy;
    x += vx;
  }
  return v;
}

std::vector<VideoSequence> synth_dataset(std::uint64_t seed, int n_videos, int n_frames, int height, int width) {
  if (n_videos < 1 || n_frames < 1 || height < 1 || width < 1) {
    throw std::invalid_argument("synth_dataset: all sizes must be >= 1");
  }
  Rng rng(seed);
  std::vector<VideoSequence> out;
  const int short_side = std::min(height, width);
  for (int k = 0; k < n_videos; ++k) {
    ShapeTrack s;
    s.kind = static_cast<ShapeKind>(rng.below(3));
    s.radius = std::max(1.0, std::round(rng.uniform(0.12, 0.22) * short_side));
    if (2 * s.radius + 1 > short_side) throw std::invalid_argument("synth_dataset: frame too small for shapes");
    s.y = std::round(rng.uniform(s.radius, height - 1 - s.radius));
    s.x = std::round(rng.uniform(s.radius, width - 1 - s.radius));
    do {
      s.vy = static_cast<double>(rng.below(5)) - 2.0;
      s.vx = static_cast<double>(rng.below(5)) - 2.0;
    } while (s.vy == 0.0 && s.vx == 0.0);
    const double bg_hue = rng.uniform();
    s.color = hsv(bg_hue + 0.5 + rng.uniform(-0.15, 0.15), rng.uniform(0.6, 0.9), rng.uniform(0.75, 0.95));
    BackgroundStyle bg;
    bg.base = hsv(bg_hue, rng.uniform(0.15, 0.35), rng.uniform(0.35, 0.6));
    bg.accent = hsv(bg_hue + 0.08, rng.uniform(0.2, 0.4), rng.uniform(0.25, 0.5));
    bg.seed = rng.next();
    char id[32];
    std::snprintf(id, sizeof id, "synth_%03d", k);
    out.push_back(render_video(id, n_frames, height, width, s, bg));
  }
  return out;
}

}  // namespace badseg
