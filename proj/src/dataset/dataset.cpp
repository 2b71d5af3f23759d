#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "badseg/dataset.hpp"
#include "badseg/random.hpp"

namespace badseg {

void validate(const VideoSequence& video) {
  if (video.frames.empty()) throw std::invalid_argument("video '" + video.id + "' has no frames");
  if (video.frames.size() != video.gt_masks.size()) {
    throw std::invalid_argument("video '" + video.id + "': " + std::to_string(video.frames.size()) + " frames but " +
                                std::to_string(video.gt_masks.size()) + " masks");
  }
  const int h = video.frames[0].height, w = video.frames[0].width;
  for (std::size_t t = 0; t < video.frames.size(); ++t) {
    if (video.frames[t].height != h || video.frames[t].width != w || video.gt_masks[t].height != h ||
        video.gt_masks[t].width != w) {
      throw std::invalid_argument("video '" + video.id + "': frame/mask shape mismatch at index " + std::to_string(t));
    }
  }
}

std::string target_name(const AttackTarget& target) {
  switch (target.index()) {
    case 0: return "disappearance";
    case 1: return "deformation";
    default: return "custom";
  }
}

Mask make_target_mask(int height, int width, const AttackTarget& target) {
  if (height < 1 || width < 1) throw std::invalid_argument("target mask needs positive dimensions");
  Mask m(height, width);
  if (const auto* d = std::get_if<Deformation>(&target)) {
    const double r = d->radius_fraction * std::min(height, width);
    const double cy = height / 2.0, cx = width / 2.0;
    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j)
        if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= r * r) m.at(i, j) = 1;
  } else if (const auto* c = std::get_if<CustomMask>(&target)) {
    if (c->mask.height != height || c->mask.width != width) {
      throw std::invalid_argument("custom target mask does not match frame shape");
    }
    m = c->mask;
  }
  return m;
}

std::size_t PoisonedDataset::poisoned_sequences() const {
  return static_cast<std::size_t>(std::count(poison_flags.begin(), poison_flags.end(), true));
}

std::size_t PoisonedDataset::poisoned_frames() const {
  std::size_t n = 0;
  for (const auto& f : frame_flags) n += static_cast<std::size_t>(std::count(f.begin(), f.end(), true));
  return n;
}

std::size_t PoisonedDataset::total_frames() const {
  std::size_t n = 0;
  for (const auto& v : sequences) n += v.frames.size();
  return n;
}

VideoSequence trigger_video(const VideoSequence& video, const TriggerSpec& trigger) {
  VideoSequence out = video;
  for (std::size_t t = 0; t < out.frames.size(); ++t) out.frames[t] = apply_trigger(video.frames[t], trigger, static_cast<int>(t));
  return out;
}

PoisonedDataset build_poisoned(const std::vector<VideoSequence>& train, const PoisonConfig& cfg) {
  if (!(cfg.rate >= 0.0 && cfg.rate <= 1.0)) {
    throw std::invalid_argument("poison rate must lie in [0,1], got " + std::to_string(cfg.rate));
  }
  if (train.empty()) throw std::invalid_argument("cannot poison an empty training set");
  validate(cfg.trigger);
  PoisonedDataset out;
  out.sequences = train;
  out.poison_flags.assign(train.size(), false);
  out.target_masks.assign(train.size(), std::nullopt);
  for (const auto& v : train) out.frame_flags.emplace_back(v.frames.size(), false);

  Rng rng(cfg.selection_seed);
  if (!cfg.frame_level) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    const auto n = static_cast<std::size_t>(std::llround(cfg.rate * static_cast<double>(train.size())));
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t s = order[k];
      out.poison_flags[s] = true;
      out.frame_flags[s].assign(train[s].frames.size(), true);
    }
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> frames;
    for (std::size_t s = 0; s < train.size(); ++s)
      for (std::size_t t = 0; t < train[s].frames.size(); ++t) frames.emplace_back(s, t);
    rng.shuffle(frames.begin(), frames.end());
    const auto n = static_cast<std::size_t>(std::llround(cfg.rate * static_cast<double>(frames.size())));
    for (std::size_t k = 0; k < n; ++k) {
      out.frame_flags[frames[k].first][frames[k].second] = true;
      out.poison_flags[frames[k].first] = true;
    }
  }

  for (std::size_t s = 0; s < train.size(); ++s) {
    if (!out.poison_flags[s]) continue;
    VideoSequence& v = out.sequences[s];
    validate(v);
    out.target_masks[s] = make_target_mask(v.height(), v.width(), cfg.target);
    for (std::size_t t = 0; t < v.frames.size(); ++t)
      if (out.frame_flags[s][t]) v.frames[t] = apply_trigger(train[s].frames[t], cfg.trigger, static_cast<int>(t));
  }
  return out;
}

std::string prompt_kind_name(PromptKind kind) {
  switch (kind) {
    case PromptKind::Point: return "point";
    case PromptKind::Box: return "box";
    case PromptKind::Mask: return "mask";
  }
  return "?";
}

PromptKind parse_prompt_kind(const std::string& name) {
  for (PromptKind k : kAllPromptKinds)
    if (prompt_kind_name(k) == name) return k;
  throw std::invalid_argument("unknown prompt type '" + name + "' (expected point, box, mask)");
}

PromptSpec DerivedPrompts::get(PromptKind kind) const {
  switch (kind) {
    case PromptKind::Point: return point;
    case PromptKind::Box: return box;
    case PromptKind::Mask: return mask;
  }
  throw std::logic_error("bad prompt kind");
}

DerivedPrompts derive_prompts(const Mask& first_gt, std::uint64_t /*seed*/) {
  double sy = 0.0, sx = 0.0;
  std::size_t n = 0;
  BoxPrompt box{first_gt.height, first_gt.width, -1, -1};
  for (int i = 0; i < first_gt.height; ++i)
    for (int j = 0; j < first_gt.width; ++j) {
      if (!first_gt.at(i, j)) continue;
      sy += i;
      sx += j;
      ++n;
      box.y0 = std::min(box.y0, i);
      box.x0 = std::min(box.x0, j);
      box.y1 = std::max(box.y1, i);
      box.x1 = std::max(box.x1, j);
    }
  if (n == 0) throw std::invalid_argument("cannot derive point/box prompts from an empty mask");
  const double cy = sy / n, cx = sx / n;
  PointPrompt point;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < first_gt.height; ++i)
    for (int j = 0; j < first_gt.width; ++j) {
      if (!first_gt.at(i, j)) continue;
      const double d = (i - cy) * (i - cy) + (j - cx) * (j - cx);
      if (d < best) {
        best = d;
        point = {i, j};
      }
    }
  return {point, box, MaskPrompt{binary_mask(first_gt)}};
}

void validate_prompt(const PromptSpec& prompt, int height, int width) {
  auto inside = [&](int y, int x) { return y >= 0 && y < height && x >= 0 && x < width; };
  if (const auto* p = std::get_if<PointPrompt>(&prompt)) {
    if (!inside(p->y, p->x)) throw std::invalid_argument("point prompt outside the frame");
  } else if (const auto* b = std::get_if<BoxPrompt>(&prompt)) {
    if (!inside(b->y0, b->x0) || !inside(b->y1, b->x1)) throw std::invalid_argument("box prompt outside the frame");
    if (b->y1 < b->y0 || b->x1 < b->x0) throw std::invalid_argument("box prompt has inverted corners");
  } else {
    const auto& m = std::get<MaskPrompt>(prompt).mask;
    if (m.height != height || m.width != width) throw std::invalid_argument("mask prompt shape mismatch");
  }
}

}  // namespace badseg
