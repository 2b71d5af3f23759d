#include <cmath>
#include <fstream>
#include <stdexcept>

#include "badseg/bvtf.hpp"
#include "badseg/dataset.hpp"
#include "json.hpp"

namespace badseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool has_ext(const fs::path& p, const char* ext) { return p.extension() == ext; }

Frame load_frame(const fs::path& p) {
  if (has_ext(p, ".png")) return read_png_frame(p);
  const Tensor t = read_bvtf(p);
  if (t.ndim() != 3 || t.dim(2) != 3) throw std::runtime_error("frame tensor must be [H,W,3]: " + p.string());
  Frame f(t.dim(0), t.dim(1));
  f.rgb = t.vec();
  return f;
}

Mask load_mask(const fs::path& p) {
  if (has_ext(p, ".png")) return read_png_mask(p);
  const Tensor t = read_bvtf(p);
  if (t.ndim() != 2) throw std::runtime_error("mask tensor must be [H,W]: " + p.string());
  Mask m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (v < 0.0f || v > 255.0f || v != std::floor(v)) throw std::runtime_error("mask tensor holds a non-label value: " + p.string());
    m.labels[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

std::vector<int> objects_in(const std::vector<Mask>& masks) {
  std::vector<bool> seen(256, false);
  for (const auto& m : masks)
    for (auto v : m.labels) seen[v] = true;
  std::vector<int> ids;
  for (int k = 1; k < 256; ++k)
    if (seen[static_cast<std::size_t>(k)]) ids.push_back(k);
  return ids;
}

}  // namespace

std::vector<VideoSequence> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  const fs::path base = path.parent_path();
  std::vector<VideoSequence> videos;
  for (const json& jv : doc.at("videos")) {
    VideoSequence v;
    v.id = jv.at("id").get<std::string>();
    const auto frames = jv.at("frames").get<std::vector<std::string>>();
    const auto masks = jv.at("masks").get<std::vector<std::string>>();
    if (frames.size() != masks.size()) {
      throw std::runtime_error("video '" + v.id + "': " + std::to_string(frames.size()) + " frames but " +
                               std::to_string(masks.size()) + " masks");
    }
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const fs::path fp = base / frames[t], mp = base / masks[t];
      if (!fs::exists(fp)) throw std::runtime_error("video '" + v.id + "': missing frame file " + fp.string() + " (index " + std::to_string(t) + ")");
      if (!fs::exists(mp)) throw std::runtime_error("video '" + v.id + "': missing mask file " + mp.string() + " (index " + std::to_string(t) + ")");
      v.frames.push_back(load_frame(fp));
      v.gt_masks.push_back(load_mask(mp));
    }
    v.object_ids = jv.contains("objects") ? jv.at("objects").get<std::vector<int>>() : objects_in(v.gt_masks);
    try {
      validate(v);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(e.what());
    }
    videos.push_back(std::move(v));
  }
  return videos;
}

void save_manifest(const fs::path& path, const std::vector<VideoSequence>& videos, FrameFormat frame_format) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  fs::create_directories(base);
  json doc;
  doc["videos"] = json::array();
  for (const auto& v : videos) {
    validate(v);
    const fs::path dir = fs::path("videos") / v.id;
    fs::create_directories(base / dir);
    json jv;
    jv["id"] = v.id;
    jv["objects"] = v.object_ids;
    jv["frames"] = json::array();
    jv["masks"] = json::array();
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "%05zu", t);
      fs::path fp = dir / (std::string("frame_") + stem + (frame_format == FrameFormat::Png ? ".png" : ".bvtf"));
      const fs::path mp = dir / (std::string("mask_") + stem + ".png");
      const Frame& f = v.frames[t];
      if (frame_format == FrameFormat::Png) {
        write_png(base / fp, f);
      } else {
        write_bvtf(base / fp, Tensor({f.height, f.width, 3}, f.rgb));
      }
      write_png(base / mp, v.gt_masks[t]);
      jv["frames"].push_back(fp.generic_string());
      jv["masks"].push_back(mp.generic_string());
    }
    doc["videos"].push_back(std::move(jv));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace badseg
