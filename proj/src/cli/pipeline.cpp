#include "badseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "badseg/random.hpp"

namespace badseg::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kModels{"reference", "badvsfm_stage1", "badvsfm", "baseline"};

json provenance(const Context& ctx) { return {{"config_hash", ctx.hash}, {"tool_version", config::kToolVersion}}; }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

[[noreturn]] void missing(const fs::path& what, const std::string& command) {
  throw std::runtime_error(what.string() + " not found; run `" + command + "` first");
}

std::vector<VideoSequence> synth_split(const config::SynthSpec& s) {
  return synth_dataset(s.seed, s.videos, s.frames, s.height, s.width);
}

fs::path data_manifest(const Context& ctx, const std::string& split) {
  return ctx.dir / "data" / split / "manifest.json";
}

std::vector<VideoSequence> load_split(const Context& ctx, const std::string& split) {
  const fs::path p = data_manifest(ctx, split);
  if (!fs::exists(p)) missing(p, "synth");
  return load_manifest(p);
}

double seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void save_model(const Context& ctx, const std::string& name, const model::ModelParams& p,
                const train::TrainLog* log) {
  const fs::path dir = model_dir(ctx, name);
  fs::remove_all(dir);
  model::save_params(dir, p);
  json j = provenance(ctx);
  j["model"] = name;
  if (log) j["log"] = train::to_json(*log, false);
  write_json(dir / "provenance.json", j);
}

void print_log(std::ostream& log, const train::TrainLog& tl) {
  for (const auto& e : tl.epochs) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-16s epoch %2d  eff %.5f  util %.5f  total %.5f  (%.1fs)\n",
                  e.stage.c_str(), e.epoch, e.effectiveness, e.utility, e.total, e.wall_seconds);
    log << buf;
  }
}

metrics::EvalReport eval_model(const Context& ctx, const model::ModelParams& p,
                               const std::vector<VideoSequence>& clean, const std::vector<VideoSequence>& trig) {
  const auto& splits = ctx.cfg.eval.splits;
  const bool c = std::find(splits.begin(), splits.end(), "clean") != splits.end();
  const bool t = std::find(splits.begin(), splits.end(), "triggered") != splits.end();
  return metrics::evaluate(p, c ? clean : std::vector<VideoSequence>{}, t ? trig : std::vector<VideoSequence>{},
                           ctx.cfg.poison.target, ctx.cfg.eval.prompts);
}

Frame stage1_target_image(const Context& ctx, int h, int w) {
  return ctx.cfg.train.s1.target_image ? *ctx.cfg.train.s1.target_image : train::gray_frame(h, w);
}

// ---------------------------------------------------------------------------

void cmd_synth(const Context& ctx, std::ostream& log) {
  const auto& d = ctx.cfg.dataset;
  if (!d.manifest.empty()) throw config::ConfigError({"dataset.manifest is set; there is nothing to synthesize"});
  save_manifest(data_manifest(ctx, "train"), synth_split(d.train));
  if (d.test_manifest.empty()) save_manifest(data_manifest(ctx, "test"), synth_split(d.test));
  save_manifest(data_manifest(ctx, "holdout"), synth_split(d.holdout));
  write_json(ctx.dir / "data" / "provenance.json", provenance(ctx));
  log << "wrote synthetic train/test/holdout splits under " << (ctx.dir / "data").string() << "\n";
}

void cmd_poison(const Context& ctx, std::ostream& log) {
  const auto train = train_videos(ctx);
  PoisonConfig pc = ctx.cfg.poison;
  pc.trigger = trigger_for(ctx, train.front().height(), train.front().width());
  const PoisonedDataset data = build_poisoned(train, pc);
  json meta = provenance(ctx);
  meta["trigger"] = trigger_name(pc.trigger);
  meta["target"] = config::target_json(pc.target);
  meta["rate"] = pc.rate;
  meta["frame_level"] = pc.frame_level;
  save_poisoned(ctx.dir / "data" / "poisoned", data, meta);
  log << "poisoned " << data.poisoned_frames() << " of " << data.total_frames() << " frames in "
      << data.poisoned_sequences() << " sequences\n";
}

void cmd_train_reference(const Context& ctx, std::ostream& log) {
  const auto r = train::train_reference(train_videos(ctx), ctx.cfg.model, ctx.cfg.train.reference, ctx.cfg.train.seed);
  print_log(log, r.log);
  save_model(ctx, "reference", r.params, &r.log);
}

PoisonedDataset poisoned(const Context& ctx) {
  const fs::path dir = ctx.dir / "data" / "poisoned";
  if (!fs::exists(dir / "poison.json")) missing(dir / "poison.json", "poison");
  return load_poisoned(dir);
}

void cmd_train_attack(const Context& ctx, std::ostream& log) {
  const auto ref = load_model(ctx, "reference");
  const auto data = poisoned(ctx);
  train::Stage1Config s1 = ctx.cfg.train.s1;
  s1.target_image = stage1_target_image(ctx, data.sequences.front().height(), data.sequences.front().width());
  const auto r = train::train_badvsfm(ref, ref, data, s1, ctx.cfg.train.s2, ctx.cfg.train.seed);
  print_log(log, r.log);
  save_model(ctx, "badvsfm_stage1", r.after_stage1, nullptr);
  save_model(ctx, "badvsfm", r.params, &r.log);
}

void cmd_train_baseline(const Context& ctx, std::ostream& log) {
  const auto ref = load_model(ctx, "reference");
  const auto r = train::train_baseline(ref, poisoned(ctx), ctx.cfg.train.baseline, mix_seed(ctx.cfg.train.seed, 21));
  print_log(log, r.log);
  save_model(ctx, "baseline", r.params, &r.log);
}

void cmd_eval(const Context& ctx, std::ostream& log) {
  const auto clean = test_videos(ctx);
  const auto trig = triggered_test_videos(ctx, clean);
  int n = 0;
  for (const auto& name : kModels) {
    if (!has_model(ctx, name)) continue;
    const auto rep = eval_model(ctx, load_model(ctx, name), clean, trig);
    json j = provenance(ctx);
    j["model"] = name;
    j["report"] = rep;
    write_json(ctx.dir / "eval" / (name + ".json"), j);
    for (const auto& [k, s] : rep.by_prompt) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "  %-15s %-5s mIoU %.4f  J&F %.4f  ASR %.4f\n", name.c_str(), k.c_str(), s.miou,
                    s.jf, s.asr);
      log << buf;
    }
    ++n;
  }
  if (n == 0) missing(ctx.dir / "models", "train-reference");
}

std::vector<analysis::GradPair> gradient_pairs(const Context& ctx, const std::vector<VideoSequence>& clean,
                                               const std::vector<VideoSequence>& trig,
                                               const std::vector<PromptKind>& kinds) {
  std::vector<analysis::GradPair> pairs;
  const auto& a = ctx.cfg.analysis;
  for (std::size_t k = 0; k < clean.size(); ++k) {
    const Tensor target = train::union_project(make_target_mask(clean[k].height(), clean[k].width(),
                                                                ctx.cfg.poison.target));
    for (std::size_t t = 0; t < clean[k].frames.size(); t += static_cast<std::size_t>(a.frame_stride)) {
      if (pairs.size() == static_cast<std::size_t>(a.pairs)) return pairs;
      if (clean[k].gt_masks[t].foreground() == 0) continue;
      analysis::GradPair p;
      p.clean.video = p.triggered.video = k;
      p.clean.frame = p.triggered.frame = t;
      p.clean.image = &clean[k].frames[t];
      p.clean.label = train::union_project(clean[k].gt_masks[t]);
      p.clean.prompts = train::training_prompts(clean[k], t, kinds);
      p.triggered.triggered = true;
      p.triggered.image = &trig[k].frames[t];
      p.triggered.label = target;
      p.triggered.prompts = p.clean.prompts;
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

void cmd_analyze_gradients(const Context& ctx, std::ostream& log) {
  const auto clean = test_videos(ctx);
  const auto trig = triggered_test_videos(ctx, clean);
  const auto pairs = gradient_pairs(ctx, clean, trig, ctx.cfg.train.baseline.prompt_set);
  if (pairs.empty()) throw std::runtime_error("no annotated test frames for gradient pairs");
  int n = 0;
  for (const std::string name : {"badvsfm", "baseline"}) {
    if (!has_model(ctx, name)) continue;
    const auto params = load_model(ctx, name);
    analysis::LossSpec spec = name == "badvsfm" ? analysis::LossSpec::Stage1 : analysis::LossSpec::Baseline;
    if (ctx.cfg.analysis.loss != "auto") spec = analysis::parse_loss_spec(ctx.cfg.analysis.loss);
    analysis::GradientContext gc;
    gc.loss = spec;
    gc.eps_dice = ctx.cfg.train.baseline.eps_dice;
    std::optional<model::ModelParams> ref;
    if (spec == analysis::LossSpec::Stage1) {
      ref = load_model(ctx, "reference");
      gc.ref = &*ref;
      gc.stage1 = ctx.cfg.train.s1;
      gc.target_embedding = train::embedding_for(
          *ref, stage1_target_image(ctx, clean.front().height(), clean.front().width()), gc.stage1.distance);
    }
    const auto res = analysis::grad_cosine_pairs(params, gc, pairs);
    const auto stats = analysis::cosine_stats(res.cosines);
    json j = provenance(ctx);
    j["model"] = name;
    j["loss"] = analysis::loss_spec_name(spec);
    j["cosines"] = res.cosines;
    j["zero_gradient_pairs"] = res.zero_gradient_pairs;
    j["stats"] = stats;
    write_json(ctx.dir / "analysis" / ("gradients_" + name + ".json"), j);
    if (!res.zero_gradient_pairs.empty())
      log << "  warning: " << res.zero_gradient_pairs.size() << " pairs had a zero gradient (cosine 0)\n";
    char buf[200];
    std::snprintf(buf, sizeof buf, "  %-9s loss %-8s pairs %zu  mean %+.4f  median %+.4f  neg %.3f\n", name.c_str(),
                  analysis::loss_spec_name(spec).c_str(), res.cosines.size(), stats.mean, stats.median,
                  stats.frac_neg);
    log << buf;
    ++n;
  }
  if (n == 0) missing(model_dir(ctx, "badvsfm"), "train-attack");
}

void cmd_analyze_attention(const Context& ctx, std::ostream& log) {
  const auto clean = test_videos(ctx);
  const auto trig = triggered_test_videos(ctx, clean);
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t k = 0; k < clean.size(); ++k) {
    const std::size_t n = clean[k].frames.size();
    for (std::size_t t : {std::size_t{0}, n / 2}) {
      if (picks.size() == static_cast<std::size_t>(ctx.cfg.analysis.rollout_frames)) break;
      if (t < n && (picks.empty() || picks.back() != std::make_pair(k, t))) picks.emplace_back(k, t);
    }
  }
  int n = 0;
  for (const std::string name : {"reference", "badvsfm", "baseline"}) {
    if (!has_model(ctx, name)) continue;
    const auto params = load_model(ctx, name);
    const int P = params.arch.patch;
    json frames = json::array();
    int inside = 0, same = 0;
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto [k, t] = picks[i];
      const TriggerSpec spec = trigger_for(ctx, clean[k].height(), clean[k].width());
      model::AttentionRecord rt, rc;
      model::encode_image(params, trig[k].frames[t], &rt);
      model::encode_image(params, clean[k].frames[t], &rc);
      const auto ct = analysis::argmax_cell(analysis::rollout_weights(rt));
      const auto cc = analysis::argmax_cell(analysis::rollout_weights(rc));
      json f = {{"video", clean[k].id},
                {"frame", t},
                {"triggered_cell", {ct.first, ct.second}},
                {"clean_cell", {cc.first, cc.second}},
                {"in_footprint", nullptr}};
      if (const auto fp = trigger_footprint(spec, clean[k].height(), clean[k].width(), static_cast<int>(t))) {
        const bool in = fp->contains(ct.first * P + P / 2, ct.second * P + P / 2);
        f["in_footprint"] = in;
        inside += in;
      }
      same += ct == cc;
      frames.push_back(f);
      const PngText text{{"config_hash", ctx.hash}, {"tool_version", config::kToolVersion}};
      const std::string stem = "rollout_" + name + "_" + std::to_string(i);
      write_png(ctx.dir / "analysis" / (stem + "_triggered.png"),
                analysis::heatmap_overlay(trig[k].frames[t], analysis::attention_rollout(params, trig[k].frames[t])),
                text);
      write_png(ctx.dir / "analysis" / (stem + "_clean.png"),
                analysis::heatmap_overlay(clean[k].frames[t], analysis::attention_rollout(params, clean[k].frames[t])),
                text);
    }
    json j = provenance(ctx);
    j["model"] = name;
    j["frames"] = frames;
    write_json(ctx.dir / "analysis" / ("attention_" + name + ".json"), j);
    log << "  " << name << ": argmax in trigger " << inside << "/" << picks.size() << ", same as clean twin "
        << same << "/" << picks.size() << "\n";
    ++n;
  }
  if (n == 0) missing(model_dir(ctx, "reference"), "train-reference");
}

void cmd_defend(const Context& ctx, std::ostream& log) {
  const auto& dc = ctx.cfg.defense;
  const auto params = load_model(ctx, dc.model);
  defense::EvalSetup setup;
  setup.clean = test_videos(ctx);
  setup.triggered = triggered_test_videos(ctx, setup.clean);
  setup.target = ctx.cfg.poison.target;
  setup.prompts = ctx.cfg.eval.prompts;
  const auto train_clean = train_videos(ctx);
  const auto before = metrics::evaluate(params, setup.clean, setup.triggered, setup.target, setup.prompts);
  std::vector<defense::DefenseReport> reports;
  auto note = [&](const defense::DefenseReport& r) {
    const auto& s = r.after.by_prompt;
    log << "  " << defense::column_name(r);
    if (!r.note.empty()) log << ": " << r.note;
    if (auto it = s.find("point"); it != s.end()) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "  point mIoU %.4f ASR %.4f", it->second.miou, it->second.asr);
      log << buf;
    }
    log << "\n";
    reports.push_back(r);
  };
  auto t0 = std::chrono::steady_clock::now();
  note(defense::evaluate_defense("none", json::object(), before, params, setup));

  defense::SpectralConfig sc;
  sc.expected_poison_fraction = dc.spectral_fraction.value_or(ctx.cfg.poison.rate);
  sc.retrain = ctx.cfg.train.reference;
  sc.retrain.epochs = dc.spectral_retrain_epochs;
  sc.seed = mix_seed(ctx.cfg.train.seed, 31);
  note(defense::run_spectral(params, before, setup, poisoned(ctx), sc));

  std::vector<const Frame*> pool;
  for (std::size_t t = 0; pool.size() < static_cast<std::size_t>(dc.strip_pool_frames); ++t) {
    bool any = false;
    for (const auto& v : train_clean) {
      if (t >= v.frames.size() || pool.size() == static_cast<std::size_t>(dc.strip_pool_frames)) continue;
      pool.push_back(&v.frames[t]);
      any = true;
    }
    if (!any) break;
  }
  note(defense::run_strip(params, before, setup, holdout_videos(ctx), pool, dc.strip));

  const auto calib = defense::calibration_set(train_clean, static_cast<std::size_t>(dc.calib_frames));
  for (int k : dc.prune_k) {
    std::vector<int> pruned;
    const auto p = defense::defend_prune(params, k, calib, &pruned);
    note(defense::evaluate_defense("prune", {{"k", k}, {"calib_frames", calib.size()}, {"channels", pruned}}, before,
                                   p, setup));
  }
  for (double f : dc.finetune_fractions) {
    const json hyper = {{"fraction", f}, {"epochs", dc.finetune_epochs}, {"lr", dc.finetune_lr}};
    train::SupervisedConfig fc = ctx.cfg.train.reference;
    fc.epochs = dc.finetune_epochs;
    fc.lr = dc.finetune_lr;
    try {
      const auto p = defense::defend_finetune(params, train_clean, f, fc, mix_seed(ctx.cfg.train.seed, 41));
      note(defense::evaluate_defense("finetune", hyper, before, p, setup));
    } catch (const std::invalid_argument& e) {
      defense::DefenseReport r;
      r.defense = "finetune";
      r.hyper = hyper;
      r.before = before;
      r.after.target = before.target;
      r.note = e.what();
      note(r);
    }
  }
  json j = provenance(ctx);
  j["model"] = dc.model;
  j["reports"] = reports;
  write_json(ctx.dir / "defense" / "defense.json", j);
  char buf[64];
  std::snprintf(buf, sizeof buf, "  defenses done (%.1fs)\n", seconds(t0));
  log << buf;
}

void cmd_report(const Context& ctx, std::ostream& log) {
  write_report(collect_artifacts(ctx.dir), ctx.dir / "report");
  log << "wrote report to " << (ctx.dir / "report").string() << "\n";
}

}  // namespace

Context make_context(config::RunConfig cfg, json merged, const fs::path& out_root) {
  Context c{std::move(cfg), std::move(merged), "", {}};
  c.hash = config::config_hash(c.merged);
  c.dir = out_root / c.hash;
  return c;
}

const std::vector<std::string>& commands() {
  static const std::vector<std::string> k{"synth",  "poison",           "train-reference",   "train-attack",
                                          "train-baseline", "eval",     "analyze-gradients", "analyze-attention",
                                          "defend", "report"};
  return k;
}

void run_command(const std::string& command, const Context& ctx, std::ostream& log) {
  using Fn = void (*)(const Context&, std::ostream&);
  static const std::map<std::string, Fn> table{{"synth", cmd_synth},
                                               {"poison", cmd_poison},
                                               {"train-reference", cmd_train_reference},
                                               {"train-attack", cmd_train_attack},
                                               {"train-baseline", cmd_train_baseline},
                                               {"eval", cmd_eval},
                                               {"analyze-gradients", cmd_analyze_gradients},
                                               {"analyze-attention", cmd_analyze_attention},
                                               {"defend", cmd_defend},
                                               {"report", cmd_report}};
  const auto it = table.find(command);
  if (it == table.end()) throw std::invalid_argument("unknown command '" + command + "'");
  fs::create_directories(ctx.dir);
  write_json(ctx.dir / "config.json", ctx.merged);
  const auto t0 = std::chrono::steady_clock::now();
  log << "[" << command << "] " << ctx.dir.string() << "\n";
  it->second(ctx, log);
  char buf[64];
  std::snprintf(buf, sizeof buf, "[%s] done in %.1fs\n", command.c_str(), seconds(t0));
  log << buf;
}

void run_full(const Context& ctx, std::ostream& log) {
  for (const std::string c : {"synth", "train-reference", "poison", "train-attack", "train-baseline", "eval",
                              "analyze-gradients", "analyze-attention", "defend", "report"}) {
    if (c == "synth" && !ctx.cfg.dataset.manifest.empty()) continue;
    run_command(c, ctx, log);
  }
}

std::vector<VideoSequence> train_videos(const Context& ctx) {
  if (!ctx.cfg.dataset.manifest.empty()) return load_manifest(ctx.cfg.dataset.manifest);
  return load_split(ctx, "train");
}

std::vector<VideoSequence> test_videos(const Context& ctx) {
  if (!ctx.cfg.dataset.test_manifest.empty()) return load_manifest(ctx.cfg.dataset.test_manifest);
  return load_split(ctx, "test");
}

std::vector<VideoSequence> holdout_videos(const Context& ctx) {
  const fs::path p = data_manifest(ctx, "holdout");
  if (fs::exists(p)) return load_manifest(p);
  return synth_split(ctx.cfg.dataset.holdout);
}

TriggerSpec trigger_for(const Context& ctx, int height, int width) {
  return config::make_trigger(ctx.cfg.trigger, height, width, ctx.cfg.base_dir);
}

std::vector<VideoSequence> triggered_test_videos(const Context& ctx, const std::vector<VideoSequence>& clean) {
  std::vector<VideoSequence> out;
  for (const auto& v : clean) out.push_back(trigger_video(v, trigger_for(ctx, v.height(), v.width())));
  return out;
}

void save_poisoned(const fs::path& dir, const PoisonedDataset& data, const json& meta) {
  save_manifest(dir / "manifest.json", data.sequences);
  json j = meta;
  j["frame_flags"] = data.frame_flags;
  j["poison_flags"] = data.poison_flags;
  write_json(dir / "poison.json", j);
}

PoisonedDataset load_poisoned(const fs::path& dir) {
  PoisonedDataset d;
  d.sequences = load_manifest(dir / "manifest.json");
  const json j = read_json(dir / "poison.json");
  d.frame_flags = j.at("frame_flags").get<std::vector<std::vector<bool>>>();
  d.poison_flags = j.at("poison_flags").get<std::vector<bool>>();
  if (d.frame_flags.size() != d.sequences.size() || d.poison_flags.size() != d.sequences.size())
    throw std::runtime_error(dir.string() + ": poison flags do not match the manifest");
  const AttackTarget target = config::make_target(j.at("target"), dir);
  for (std::size_t k = 0; k < d.sequences.size(); ++k) {
    if (d.frame_flags[k].size() != d.sequences[k].frames.size())
      throw std::runtime_error(dir.string() + ": frame flags of " + d.sequences[k].id + " do not match");
    d.target_masks.push_back(d.poison_flags[k] ? std::optional<Mask>(make_target_mask(
                                                     d.sequences[k].height(), d.sequences[k].width(), target))
                                               : std::nullopt);
  }
  return d;
}

fs::path model_dir(const Context& ctx, const std::string& name) { return ctx.dir / "models" / name; }

bool has_model(const Context& ctx, const std::string& name) {
  return fs::exists(model_dir(ctx, name) / "arch.json");
}

model::ModelParams load_model(const Context& ctx, const std::string& name) {
  if (!has_model(ctx, name)) {
    missing(model_dir(ctx, name), name == "reference" ? "train-reference"
                                  : name == "baseline"  ? "train-baseline"
                                                        : "train-attack");
  }
  return model::load_params(model_dir(ctx, name));
}

// ---------------------------------------------------------------------------

int AttentionArtifact::inside() const {
  int n = 0;
  for (const auto& f : frames) n += f.in_footprint.value_or(false);
  return n;
}

int AttentionArtifact::coincide() const {
  int n = 0;
  for (const auto& f : frames) n += f.triggered_cell == f.clean_cell;
  return n;
}

Artifacts collect_artifacts(const fs::path& run_dir) {
  Artifacts a;
  a.tool_version = config::kToolVersion;
  if (fs::exists(run_dir / "config.json")) a.hash = config::config_hash(read_json(run_dir / "config.json"));
  for (const auto& name : kModels) {
    const fs::path e = run_dir / "eval" / (name + ".json");
    if (fs::exists(e)) a.evals[name] = read_json(e).at("report").get<metrics::EvalReport>();
    const fs::path g = run_dir / "analysis" / ("gradients_" + name + ".json");
    if (fs::exists(g)) {
      const json j = read_json(g);
      GradientArtifact ga;
      ga.loss = j.at("loss").get<std::string>();
      ga.result.cosines = j.at("cosines").get<std::vector<double>>();
      ga.result.zero_gradient_pairs = j.at("zero_gradient_pairs").get<std::vector<std::size_t>>();
      ga.stats = j.at("stats").get<analysis::CosineStats>();
      a.gradients[name] = ga;
    }
    const fs::path at = run_dir / "analysis" / ("attention_" + name + ".json");
    if (fs::exists(at)) {
      const json j = read_json(at);
      AttentionArtifact aa;
      for (const auto& f : j.at("frames")) {
        AttentionFrame fr;
        fr.video = f.at("video").get<std::string>();
        fr.frame = f.at("frame").get<int>();
        fr.triggered_cell = {f.at("triggered_cell")[0].get<int>(), f.at("triggered_cell")[1].get<int>()};
        fr.clean_cell = {f.at("clean_cell")[0].get<int>(), f.at("clean_cell")[1].get<int>()};
        if (!f.at("in_footprint").is_null()) fr.in_footprint = f.at("in_footprint").get<bool>();
        aa.frames.push_back(fr);
      }
      for (std::size_t i = 0; i < aa.frames.size(); ++i)
        for (const char* kind : {"triggered", "clean"}) {
          const fs::path p = run_dir / "analysis" / ("rollout_" + name + "_" + std::to_string(i) + "_" + kind + ".png");
          if (fs::exists(p)) aa.overlays.push_back(p);
        }
      a.attention[name] = aa;
    }
  }
  const fs::path d = run_dir / "defense" / "defense.json";
  if (fs::exists(d)) {
    const json j = read_json(d);
    a.defense_model = j.at("model").get<std::string>();
    a.defenses = j.at("reports").get<std::vector<defense::DefenseReport>>();
  }
  return a;
}

namespace {

std::string fmt(double v, const char* f = "%.4f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string csv_header(const Artifacts& a) {
  return "# config_hash=" + a.hash + " tool_version=" + a.tool_version + "\n";
}

}  // namespace

void write_report(const Artifacts& a, const fs::path& out) {
  if (a.empty()) throw std::invalid_argument("write_report: no artifacts to report");
  fs::create_directories(out);
  {
    std::error_code ec;
    const fs::path probe = out / ".write_probe";
    std::ofstream p(probe);
    if (!p) throw std::runtime_error("output directory " + out.string() + " is not writable");
    p.close();
    fs::remove(probe, ec);
  }
  const json prov = {{"config_hash", a.hash}, {"tool_version", a.tool_version}};
  std::ostringstream md;
  md << "# Run summary\n\n- config hash: `" << a.hash << "`\n- tool version: " << a.tool_version << "\n";

  if (!a.evals.empty()) {
    json j = prov;
    j["models"] = json::object();
    std::string csv = csv_header(a) + "model,split,video,prompt,miou,jf,asr\n";
    md << "\n## Evaluation\n\n| model | prompt | mIoU | J&F | ASR |\n|---|---|---|---|---|\n";
    for (const auto& [name, rep] : a.evals) {
      j["models"][name] = rep;
      const std::string body = metrics::to_csv(rep);
      std::istringstream lines(body);
      std::string line;
      std::getline(lines, line);  // header
      while (std::getline(lines, line)) csv += name + "," + line + "\n";
      for (const auto& [k, s] : rep.by_prompt)
        md << "| " << name << " | " << k << " | " << fmt(s.miou) << " | " << fmt(s.jf) << " | " << fmt(s.asr)
           << " |\n";
    }
    write_json(out / "eval.json", j);
    write_text(out / "eval.csv", csv);
  }

  if (!a.gradients.empty()) {
    json j = prov;
    j["models"] = json::object();
    std::string csv = csv_header(a) + "model,loss,pair,cosine\n";
    md << "\n## Gradient conflict (encoder)\n\n"
          "| model | loss | pairs | mean | median | cos<0 | cos<-0.2 | cos>0.2 | zero-gradient pairs |\n"
          "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& [name, g] : a.gradients) {
      json m = g.stats;
      m["loss"] = g.loss;
      const auto counts = analysis::histogram(g.result.cosines, 40, -1.0, 1.0);
      json edges = json::array();
      for (int i = 0; i <= 40; ++i) edges.push_back(-1.0 + 2.0 * i / 40.0);
      m["histogram"] = {{"edges", edges}, {"counts", counts}};
      j["models"][name] = m;
      for (std::size_t i = 0; i < g.result.cosines.size(); ++i)
        csv += name + "," + g.loss + "," + std::to_string(i) + "," + fmt(g.result.cosines[i], "%.8f") + "\n";
      const auto& s = g.stats;
      md << "| " << name << " | " << g.loss << " | " << s.cosines.size() << " | " << fmt(s.mean) << " | "
         << fmt(s.median) << " | " << fmt(s.frac_neg) << " | " << fmt(s.frac_below_m02) << " | "
         << fmt(s.frac_above_p02) << " | " << g.result.zero_gradient_pairs.size() << " |\n";
    }
    write_json(out / "cosine_stats.json", j);
    write_text(out / "cosines.csv", csv);
  }

  if (!a.attention.empty()) {
    md << "\n## Attention rollout\n\n| model | frames | argmax in trigger | argmax same as clean twin |\n"
          "|---|---|---|---|\n";
    for (const auto& [name, at] : a.attention) {
      md << "| " << name << " | " << at.frames.size() << " | " << at.inside() << " | " << at.coincide() << " |\n";
      for (const auto& p : at.overlays) fs::copy_file(p, out / p.filename(), fs::copy_options::overwrite_existing);
    }
  }

  if (!a.defenses.empty()) {
    write_text(out / "defense.csv", csv_header(a) + defense::defense_table_csv(a.defenses));
    md << "\n## Defenses on `" << a.defense_model << "`\n\n| defense | point mIoU | point ASR | note |\n|---|---|---|---|\n";
    for (const auto& r : a.defenses) {
      const auto it = r.after.by_prompt.find("point");
      md << "| " << defense::column_name(r) << " | "
         << (it == r.after.by_prompt.end() ? std::string("n/a") : fmt(it->second.miou)) << " | "
         << (it == r.after.by_prompt.end() ? std::string("n/a") : fmt(it->second.asr)) << " | " << r.note << " |\n";
    }
  }
  write_text(out / "summary.md", md.str());
}

}  // namespace badseg::pipeline
