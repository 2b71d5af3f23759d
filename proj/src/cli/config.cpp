#include "badseg/config.hpp"

#include <fstream>
#include <sstream>

namespace badseg::config {

using nlohmann::json;

namespace {

std::string join_lines(const std::vector<std::string>& v) {
  std::string s = "invalid configuration:";
  for (const auto& p : v) s += "\n  " + p;
  return s;
}

json synth_json(const SynthSpec& s) {
  return {{"seed", s.seed}, {"videos", s.videos}, {"frames", s.frames}, {"height", s.height}, {"width", s.width}};
}

json supervised_json(const train::SupervisedConfig& c) {
  json kinds = json::array();
  for (PromptKind k : c.prompt_set) kinds.push_back(prompt_kind_name(k));
  return {{"epochs", c.epochs}, {"lr", c.lr}, {"eps_dice", c.eps_dice}, {"prompt_set", kinds}};
}

// Variant sections: the "type" key picks which defaults act as schema.
bool is_variant_section(const std::string& path) { return path == "trigger" || path == "poison.target"; }

json variant_defaults(const std::string& path, const std::string& type) {
  return path == "trigger" ? default_trigger_json(type) : default_target_json(type);
}

const char* kind_of(const json& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

bool compatible(const json& def, const json& v) {
  if (def.is_null()) return true;  // optional fields accept any value
  if (def.is_number()) return v.is_number();
  if (def.is_number_integer() && v.is_number_float()) return false;
  return std::string(kind_of(def)) == kind_of(v) || v.is_null();
}

void merge_into(json& base, const json& user, const std::string& path, std::vector<std::string>& errors) {
  if (!user.is_object()) {
    errors.push_back((path.empty() ? std::string("<root>") : path) + ": expected an object");
    return;
  }
  if (is_variant_section(path) && user.contains("type")) {
    if (!user["type"].is_string()) {
      errors.push_back(path + ".type: expected a string");
      return;
    }
    try {
      base = variant_defaults(path, user["type"].get<std::string>());
    } catch (const std::exception& e) {
      errors.push_back(path + ".type: " + e.what());
      return;
    }
  }
  for (const auto& [k, v] : user.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) {
      errors.push_back(p + ": unknown key");
      continue;
    }
    json& d = base[k];
    if (d.is_object() && v.is_object()) {
      merge_into(d, v, p, errors);
    } else if (!compatible(d, v)) {
      errors.push_back(p + ": expected " + kind_of(d) + ", got " + kind_of(v));
    } else if (d.is_number_integer() && v.is_number_float()) {
      errors.push_back(p + ": expected an integer");
    } else {
      d = v;
    }
  }
}

template <typename Fn>
void check(std::vector<std::string>& errors, const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    for (const auto& p : e.problems()) errors.push_back(section + ": " + p);
  } catch (const std::exception& e) {
    errors.push_back(section + ": " + e.what());
  }
}

std::vector<PromptKind> read_kinds(const json& j) {
  std::vector<PromptKind> out;
  for (const auto& v : j) out.push_back(parse_prompt_kind(v.get<std::string>()));
  return out;
}

train::SupervisedConfig read_supervised(const json& j) {
  train::SupervisedConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.lr = j.at("lr").get<double>();
  c.eps_dice = j.at("eps_dice").get<double>();
  c.prompt_set = read_kinds(j.at("prompt_set"));
  return c;
}

SynthSpec read_synth(const json& j) {
  SynthSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.videos = j.at("videos").get<int>();
  s.frames = j.at("frames").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  if (s.videos < 1 || s.frames < 1 || s.height < 1 || s.width < 1)
    throw std::invalid_argument("videos, frames, height and width must be >= 1");
  return s;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path q(p);
  return q.is_absolute() ? q : base / q;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

json default_trigger_json(const std::string& type) {
  if (type == "badnet")
    return {{"type", "badnet"}, {"size_px", 8}, {"pad_px", 8}, {"color", {1.0, 0.0, 0.0}}, {"location", "bottom_right"}};
  if (type == "blended")
    return {{"type", "blended"}, {"side_fraction", 0.18}, {"alpha", 0.18},        {"texture_seed", 0},
            {"texture_png", ""}, {"location", "bottom_right"}};
  if (type == "wanet") return {{"type", "wanet"}, {"kernel_size", 101}, {"max_disp_fraction", 0.01}, {"field_seed", 0}};
  if (type == "fiba")
    return {{"type", "fiba"}, {"window_fraction", 0.06}, {"alpha", 0.25}, {"image_png", ""}, {"image_seed", 0}};
  if (type == "physical")
    return {{"type", "physical"}, {"sprite", "leaf"}, {"image_png", ""}, {"scale_fraction", 0.25},
            {"location", "bottom_left"}};
  throw std::invalid_argument("unknown trigger type '" + type + "'");
}

json default_target_json(const std::string& type) {
  if (type == "disappearance") return {{"type", "disappearance"}};
  if (type == "deformation") return {{"type", "deformation"}, {"radius_fraction", 0.18}};
  if (type == "custom") return {{"type", "custom"}, {"mask_png", ""}};
  throw std::invalid_argument("unknown attack target '" + type + "'");
}

json default_config_json() {
  const DatasetSection ds;
  TrainSection tr;
  tr.reference.epochs = 5;
  tr.reference.lr = 1e-3;
  tr.s1.epochs = 10;
  tr.s1.lr = 1e-4;
  tr.s1.distance = train::EmbeddingDistance::Tokens;
  tr.s2.epochs = 3;
  tr.s2.lr = 1e-4;
  tr.baseline.epochs = 13;
  tr.baseline.lr = 1e-4;
  const EvalSection ev;
  const AnalysisSection an;
  const DefenseSection df;
  json kinds = json::array();
  for (PromptKind k : tr.s2.prompt_set) kinds.push_back(prompt_kind_name(k));
  json eval_kinds = json::array();
  for (PromptKind k : ev.prompts) eval_kinds.push_back(prompt_kind_name(k));
  json j;
  j["dataset"] = {{"manifest", ds.manifest},
                  {"test_manifest", ds.test_manifest},
                  {"train", synth_json(ds.train)},
                  {"test", synth_json(ds.test)},
                  {"holdout", synth_json(ds.holdout)}};
  j["trigger"] = default_trigger_json("badnet");
  j["poison"] = {{"rate", 0.05}, {"selection_seed", 0}, {"frame_level", true}, {"target", default_target_json("disappearance")}};
  j["model"] = model::ArchConfig{};
  j["train"] = {{"seed", tr.seed},
                {"reference", supervised_json(tr.reference)},
                {"s1",
                 {{"lambda1", tr.s1.lambda1},
                  {"epochs", tr.s1.epochs},
                  {"lr", tr.s1.lr},
                  {"distance", "tokens"},
                  {"target_image", ""}}},
                {"s2",
                 {{"lambda2", tr.s2.lambda2},
                  {"epochs", tr.s2.epochs},
                  {"lr", tr.s2.lr},
                  {"eps_dice", tr.s2.eps_dice},
                  {"prompt_set", kinds}}},
                {"baseline", supervised_json(tr.baseline)}};
  j["eval"] = {{"prompts", eval_kinds}, {"splits", ev.splits}};
  j["analysis"] = {{"pairs", an.pairs},
                   {"frame_stride", an.frame_stride},
                   {"rollout_frames", an.rollout_frames},
                   {"loss", an.loss}};
  j["defense"] = {{"model", df.model},
                  {"finetune_fractions", df.finetune_fractions},
                  {"finetune_epochs", df.finetune_epochs},
                  {"finetune_lr", df.finetune_lr},
                  {"prune_k", df.prune_k},
                  {"calib_frames", df.calib_frames},
                  {"strip",
                   {{"n_overlays", df.strip.n_overlays},
                    {"threshold_pct", df.strip.threshold_pct},
                    {"seed", df.strip.seed},
                    {"pool_frames", df.strip_pool_frames}}},
                  {"spectral", {{"expected_poison_fraction", nullptr}, {"retrain_epochs", df.spectral_retrain_epochs}}}};
  return j;
}

void apply_override(json& user, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError({"--set '" + assignment + "': expected key.path=value"});
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &user;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].empty()) throw ConfigError({"--set '" + assignment + "': empty path component"});
    if (!node->is_object()) *node = json::object();
    node = &(*node)[parts[i]];
  }
  *node = value;
}

void apply_seed(json& user, std::uint64_t seed) {
  apply_override(user, "dataset.train.seed=" + std::to_string(seed));
  apply_override(user, "dataset.test.seed=" + std::to_string(seed + 1000));
  apply_override(user, "dataset.holdout.seed=" + std::to_string(seed + 2000));
  apply_override(user, "poison.selection_seed=" + std::to_string(seed));
  apply_override(user, "train.seed=" + std::to_string(seed));
  apply_override(user, "defense.strip.seed=" + std::to_string(seed));
}

json merge_config(const json& user) {
  json base = default_config_json();
  std::vector<std::string> errors;
  merge_into(base, user, "", errors);
  if (!errors.empty()) throw ConfigError(errors);
  return base;
}

RunConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  std::vector<std::string> errors;
  check(errors, "dataset", [&] {
    const auto& d = j.at("dataset");
    c.dataset.manifest = d.at("manifest").get<std::string>();
    c.dataset.test_manifest = d.at("test_manifest").get<std::string>();
    if (!c.dataset.manifest.empty()) c.dataset.manifest = resolve(base_dir, c.dataset.manifest).string();
    if (!c.dataset.test_manifest.empty())
      c.dataset.test_manifest = resolve(base_dir, c.dataset.test_manifest).string();
  });
  check(errors, "dataset.train", [&] { c.dataset.train = read_synth(j.at("dataset").at("train")); });
  check(errors, "dataset.test", [&] { c.dataset.test = read_synth(j.at("dataset").at("test")); });
  check(errors, "dataset.holdout", [&] { c.dataset.holdout = read_synth(j.at("dataset").at("holdout")); });
  check(errors, "trigger", [&] {
    c.trigger = j.at("trigger");
    // Validate against the training frame size.
    validate(make_trigger(c.trigger, c.dataset.train.height, c.dataset.train.width, base_dir));
  });
  check(errors, "poison", [&] {
    const auto& p = j.at("poison");
    c.poison.rate = p.at("rate").get<double>();
    if (!(c.poison.rate >= 0.0 && c.poison.rate <= 1.0)) throw std::invalid_argument("rate must be in [0,1]");
    c.poison.selection_seed = p.at("selection_seed").get<std::uint64_t>();
    c.poison.frame_level = p.at("frame_level").get<bool>();
    c.poison.target = make_target(p.at("target"), base_dir);
  });
  check(errors, "model", [&] {
    c.model = j.at("model").get<model::ArchConfig>();
    model::validate(c.model);
  });
  check(errors, "train", [&] { c.train.seed = j.at("train").at("seed").get<std::uint64_t>(); });
  check(errors, "train.reference", [&] {
    c.train.reference = read_supervised(j.at("train").at("reference"));
    train::validate(c.train.reference);
  });
  check(errors, "train.s1", [&] {
    const auto& s = j.at("train").at("s1");
    c.train.s1.lambda1 = s.at("lambda1").get<double>();
    c.train.s1.epochs = s.at("epochs").get<int>();
    c.train.s1.lr = s.at("lr").get<double>();
    const auto d = s.at("distance").get<std::string>();
    if (d == "tokens") {
      c.train.s1.distance = train::EmbeddingDistance::Tokens;
    } else if (d == "pooled") {
      c.train.s1.distance = train::EmbeddingDistance::Pooled;
    } else {
      throw std::invalid_argument("distance must be 'tokens' or 'pooled'");
    }
    c.train.s1_target_image = s.at("target_image").get<std::string>();
    if (!c.train.s1_target_image.empty()) {
      c.train.s1_target_image = resolve(base_dir, c.train.s1_target_image).string();
      c.train.s1.target_image = read_png_frame(c.train.s1_target_image);
    }
    train::validate(c.train.s1);
  });
  check(errors, "train.s2", [&] {
    const auto& s = j.at("train").at("s2");
    c.train.s2.lambda2 = s.at("lambda2").get<double>();
    c.train.s2.epochs = s.at("epochs").get<int>();
    c.train.s2.lr = s.at("lr").get<double>();
    c.train.s2.eps_dice = s.at("eps_dice").get<double>();
    c.train.s2.prompt_set = read_kinds(s.at("prompt_set"));
    train::validate(c.train.s2);
  });
  check(errors, "train.baseline", [&] {
    c.train.baseline = read_supervised(j.at("train").at("baseline"));
    train::validate(c.train.baseline);
  });
  check(errors, "eval", [&] {
    const auto& e = j.at("eval");
    c.eval.prompts = read_kinds(e.at("prompts"));
    if (c.eval.prompts.empty()) throw std::invalid_argument("prompts must not be empty");
    c.eval.splits = e.at("splits").get<std::vector<std::string>>();
    for (const auto& s : c.eval.splits)
      if (s != "clean" && s != "triggered") throw std::invalid_argument("unknown split '" + s + "'");
  });
  check(errors, "analysis", [&] {
    const auto& a = j.at("analysis");
    c.analysis.pairs = a.at("pairs").get<int>();
    c.analysis.frame_stride = a.at("frame_stride").get<int>();
    c.analysis.rollout_frames = a.at("rollout_frames").get<int>();
    c.analysis.loss = a.at("loss").get<std::string>();
    if (c.analysis.pairs < 1 || c.analysis.frame_stride < 1 || c.analysis.rollout_frames < 0)
      throw std::invalid_argument("pairs and frame_stride must be >= 1, rollout_frames >= 0");
    if (c.analysis.loss != "auto" && c.analysis.loss != "baseline" && c.analysis.loss != "stage1")
      throw std::invalid_argument("loss must be auto, baseline or stage1");
  });
  check(errors, "defense", [&] {
    const auto& d = j.at("defense");
    c.defense.model = d.at("model").get<std::string>();
    if (c.defense.model != "badvsfm" && c.defense.model != "baseline" && c.defense.model != "reference")
      throw std::invalid_argument("model must be badvsfm, baseline or reference");
    c.defense.finetune_fractions = d.at("finetune_fractions").get<std::vector<double>>();
    for (double f : c.defense.finetune_fractions)
      if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("finetune fractions must be in (0,1]");
    c.defense.finetune_epochs = d.at("finetune_epochs").get<int>();
    c.defense.finetune_lr = d.at("finetune_lr").get<double>();
    if (c.defense.finetune_epochs < 0 || !(c.defense.finetune_lr > 0.0))
      throw std::invalid_argument("finetune_epochs must be >= 0 and finetune_lr > 0");
    c.defense.prune_k = d.at("prune_k").get<std::vector<int>>();
    for (int k : c.defense.prune_k)
      if (k < 0 || k >= c.model.head_channels)
        throw std::invalid_argument("prune_k entries must be in [0, model.head_channels)");
    c.defense.calib_frames = d.at("calib_frames").get<int>();
    const auto& s = d.at("strip");
    c.defense.strip.n_overlays = s.at("n_overlays").get<int>();
    c.defense.strip.threshold_pct = s.at("threshold_pct").get<double>();
    c.defense.strip.seed = s.at("seed").get<std::uint64_t>();
    c.defense.strip_pool_frames = s.at("pool_frames").get<int>();
    if (c.defense.calib_frames < 1 || c.defense.strip.n_overlays < 1 || c.defense.strip_pool_frames < 1)
      throw std::invalid_argument("calib_frames, strip.n_overlays and strip.pool_frames must be >= 1");
    const auto& sp = d.at("spectral");
    if (!sp.at("expected_poison_fraction").is_null())
      c.defense.spectral_fraction = sp.at("expected_poison_fraction").get<double>();
    c.defense.spectral_retrain_epochs = sp.at("retrain_epochs").get<int>();
  });
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed, json* merged_out) {
  json user = json::object();
  std::filesystem::path base = ".";
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError({"cannot read config file " + path.string()});
    user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError({path.string() + ": not valid JSON"});
    base = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  }
  if (seed) apply_seed(user, *seed);
  for (const auto& o : overrides) apply_override(user, o);
  const json merged = merge_config(user);
  if (merged_out) *merged_out = merged;
  return parse_config(merged, base);
}

std::string config_hash(const json& merged) {
  const std::string s = merged.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TriggerSpec make_trigger(const json& j, int height, int width, const std::filesystem::path& base_dir) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "badnet") {
    BadNetTrigger t;
    t.size_px = j.at("size_px").get<int>();
    t.pad_px = j.at("pad_px").get<int>();
    t.color = j.at("color").get<std::array<float, 3>>();
    t.location = j.at("location").get<TriggerLocation>();
    return t;
  }
  if (type == "blended") {
    BlendedTrigger t;
    t.side_fraction = j.at("side_fraction").get<double>();
    t.alpha = j.at("alpha").get<double>();
    t.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    t.location = j.at("location").get<TriggerLocation>();
    const auto png = j.at("texture_png").get<std::string>();
    if (!png.empty()) t.texture = read_png_frame(resolve(base_dir, png));
    return t;
  }
  if (type == "wanet") {
    WaNetTrigger t;
    t.kernel_size = j.at("kernel_size").get<int>();
    t.max_disp_fraction = j.at("max_disp_fraction").get<double>();
    t.field_seed = j.at("field_seed").get<std::uint64_t>();
    return t;
  }
  if (type == "fiba") {
    FibaTrigger t;
    t.window_fraction = j.at("window_fraction").get<double>();
    t.alpha = j.at("alpha").get<double>();
    const auto png = j.at("image_png").get<std::string>();
    t.trigger_image = png.empty() ? random_texture(height, width, j.at("image_seed").get<std::uint64_t>())
                                  : read_png_frame(resolve(base_dir, png));
    return t;
  }
  if (type == "physical") {
    PhysicalTrigger t;
    t.scale_fraction = j.at("scale_fraction").get<double>();
    t.location = j.at("location").get<TriggerLocation>();
    const auto png = j.at("image_png").get<std::string>();
    t.object_image = png.empty() ? make_sprite(j.at("sprite").get<std::string>(), std::min(height, width))
                                 : read_png_rgba(resolve(base_dir, png));
    return t;
  }
  throw std::invalid_argument("unknown trigger type '" + type + "'");
}

AttackTarget make_target(const json& j, const std::filesystem::path& base_dir) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "disappearance") return Disappearance{};
  if (type == "deformation") return Deformation{j.at("radius_fraction").get<double>()};
  if (type == "custom") {
    const auto png = j.at("mask_png").get<std::string>();
    if (png.empty()) throw std::invalid_argument("custom target needs mask_png");
    return CustomMask{binary_mask(read_png_mask(resolve(base_dir, png)))};
  }
  throw std::invalid_argument("unknown attack target '" + type + "'");
}

json target_json(const AttackTarget& t) {
  if (std::holds_alternative<Disappearance>(t)) return default_target_json("disappearance");
  if (const auto* d = std::get_if<Deformation>(&t)) return {{"type", "deformation"}, {"radius_fraction", d->radius_fraction}};
  return {{"type", "custom"}};
}

}  // namespace badseg::config
