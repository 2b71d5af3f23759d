#include "badseg/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "badseg/random.hpp"

namespace badseg::train {

using ad::Var;
using model::Binder;
using model::ModelParams;

double bce(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) throw std::invalid_argument("bce: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::clamp(static_cast<double>(p[i]), 1e-7, 1.0 - 1e-7);
    s -= q[i] * std::log(pi) + (1.0 - q[i]) * std::log(1.0 - pi);
  }
  return s / static_cast<double>(p.size());
}

double dice(const Tensor& p, const Tensor& q, double eps) {
  if (p.shape() != q.shape()) throw std::invalid_argument("dice: shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  double pq = 0.0, sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pq += static_cast<double>(p[i]) * q[i];
    sp += p[i];
    sq += q[i];
  }
  return 1.0 - (2.0 * pq + eps) / (sp + sq + eps);
}

Tensor union_project(const Mask& target) {
  Tensor q({target.height, target.width});
  for (std::size_t i = 0; i < target.labels.size(); ++i) q[i] = target.labels[i] > 0 ? 1.0f : 0.0f;
  return q;
}

Var segmentation_loss(Var logits, const Tensor& q, float eps_dice) {
  return ad::add(ad::bce_with_logits(logits, q), ad::dice_with_logits(logits, q, eps_dice));
}

void validate(const Stage1Config& c) {
  if (!(c.lambda1 > 0)) throw std::invalid_argument("train.s1.lambda1 must be > 0");
  if (c.epochs < 0) throw std::invalid_argument("train.s1.epochs must be >= 0");
  if (!(c.lr > 0)) throw std::invalid_argument("train.s1.lr must be > 0");
}

void validate(const Stage2Config& c) {
  if (!(c.lambda2 > 0)) throw std::invalid_argument("train.s2.lambda2 must be > 0");
  if (c.epochs < 0) throw std::invalid_argument("train.s2.epochs must be >= 0");
  if (!(c.lr > 0)) throw std::invalid_argument("train.s2.lr must be > 0");
  if (!(c.eps_dice > 0)) throw std::invalid_argument("train.s2.eps_dice must be > 0");
  if (c.prompt_set.empty()) throw std::invalid_argument("train.s2.prompts must not be empty");
}

void validate(const SupervisedConfig& c) {
  if (c.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(c.lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(c.eps_dice > 0)) throw std::invalid_argument("eps_dice must be > 0");
  if (c.prompt_set.empty()) throw std::invalid_argument("prompt set must not be empty");
}

void AdamW::update(ModelParams& params, const std::map<std::string, Tensor>& grads) {
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (const auto& [path, g] : grads) {
    Tensor& p = params.at(path);
    auto [mit, m_new] = m.try_emplace(path, Tensor(p.shape()));
    auto [vit, v_new] = v.try_emplace(path, Tensor(p.shape()));
    float* pm = mit->second.data();
    float* pv = vit->second.data();
    float* pp = p.data();
    const float* pg = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      pm[i] = static_cast<float>(beta1 * pm[i] + (1.0 - beta1) * pg[i]);
      pv[i] = static_cast<float>(beta2 * pv[i] + (1.0 - beta2) * static_cast<double>(pg[i]) * pg[i]);
      const double mhat = pm[i] / c1, vhat = pv[i] / c2;
      double w = pp[i] * (1.0 - lr * weight_decay);
      w -= lr * mhat / (std::sqrt(vhat) + eps);
      pp[i] = static_cast<float>(w);
    }
  }
}

nlohmann::json to_json(const TrainLog& log, bool include_wall_time) {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    nlohmann::json row = {{"stage", e.stage},
                          {"epoch", e.epoch},
                          {"steps", e.steps},
                          {"effectiveness", e.effectiveness},
                          {"utility", e.utility},
                          {"total", e.total}};
    if (include_wall_time) row["wall_seconds"] = e.wall_seconds;
    j["epochs"].push_back(std::move(row));
  }
  j["trigger_label_sources"] = log.trigger_label_sources;
  return j;
}

Frame gray_frame(int height, int width) { return Frame(height, width, 0.5f); }

std::vector<PromptSpec> training_prompts(const VideoSequence& video, std::size_t frame,
                                         const std::vector<PromptKind>& kinds) {
  const Mask current = binary_mask(video.gt_masks[frame]);
  Mask previous = frame > 0 ? binary_mask(video.gt_masks[frame - 1]) : current;
  if (previous.foreground() == 0) previous = current;
  const DerivedPrompts now = derive_prompts(current);
  std::vector<PromptSpec> out;
  for (PromptKind k : kinds) out.push_back(k == PromptKind::Mask ? PromptSpec{MaskPrompt{previous}} : now.get(k));
  return out;
}

std::vector<Sample> make_samples(const PoisonedDataset& data, const std::vector<PromptKind>& kinds,
                                 bool poisoned_labels) {
  std::vector<Sample> out;
  for (std::size_t k = 0; k < data.sequences.size(); ++k) {
    const VideoSequence& v = data.sequences[k];
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      if (v.gt_masks[t].foreground() == 0) continue;
      if (!data.removed.empty() && data.removed[k][t]) continue;
      Sample s;
      s.video = k;
      s.frame = t;
      s.triggered = data.frame_flags[k][t];
      s.image = &v.frames[t];
      const bool use_target = poisoned_labels && s.triggered && data.target_masks[k].has_value();
      s.label = union_project(use_target ? *data.target_masks[k] : v.gt_masks[t]);
      s.prompts = training_prompts(v, t, kinds);
      out.push_back(std::move(s));
    }
  }
  return out;
}

PoisonedDataset as_clean(const std::vector<VideoSequence>& videos) {
  PoisonedDataset d;
  d.sequences = videos;
  for (const auto& v : videos) {
    d.poison_flags.push_back(false);
    d.frame_flags.emplace_back(v.frames.size(), false);
    d.target_masks.emplace_back();
  }
  return d;
}

// ---------------------------------------------------------------------------

Tensor embedding_for(const ModelParams& params, const Frame& image, EmbeddingDistance distance) {
  const auto e = model::encode_image(params, image);
  return distance == EmbeddingDistance::Pooled ? e.pooled : e.tokens;
}

namespace {

// Training loops keep their caches alive across backward() and can hand the
// graph a reference; one-shot callers must let the graph own a copy.
Var hold(ad::Graph& g, const Tensor& t, bool owned) { return owned ? g.constant(t) : g.constant_ref(t); }

Var embedding_distance(const model::EncodedVars& e, const Tensor& target, EmbeddingDistance distance, bool owned) {
  ad::Graph& g = e.tokens.graph();
  if (distance == EmbeddingDistance::Pooled) return ad::squared_distance(e.pooled, hold(g, target, owned));
  return ad::scale(ad::squared_distance(e.tokens, hold(g, target, owned)), 1.0f / static_cast<float>(target.dim(0)));
}

Var mean_of(const std::vector<Var>& parts) {
  if (parts.size() == 1) return parts[0];
  std::vector<Var> flat;
  for (const Var& p : parts) flat.push_back(ad::reshape(p, {1, 1}));
  return ad::scale(ad::sum_all(ad::concat_cols(flat)), 1.0f / static_cast<float>(parts.size()));
}

Var stage1_loss_cached(Binder& b, const std::vector<const Frame*>& triggered, const std::vector<const Frame*>& clean,
                       const std::vector<const Tensor*>& clean_ref, const Tensor& target, const Stage1Config& cfg,
                       double* eff, double* util, bool owned) {
  if (triggered.empty() && clean.empty()) throw std::invalid_argument("stage-1 batch has no frames");
  std::vector<Var> terms;
  if (!triggered.empty()) {
    std::vector<Var> parts;
    for (const Frame* f : triggered) parts.push_back(embedding_distance(model::encode_image(b, *f), target, cfg.distance, owned));
    Var mean = mean_of(parts);
    if (eff) *eff = mean.value()[0];
    terms.push_back(ad::scale(mean, static_cast<float>(cfg.lambda1)));
  } else if (eff) {
    *eff = 0.0;
  }
  if (!clean.empty()) {
    std::vector<Var> parts;
    for (std::size_t i = 0; i < clean.size(); ++i)
      parts.push_back(embedding_distance(model::encode_image(b, *clean[i]), *clean_ref[i], cfg.distance, owned));
    Var mean = mean_of(parts);
    if (util) *util = mean.value()[0];
    terms.push_back(mean);
  } else if (util) {
    *util = 0.0;
  }
  return terms.size() == 1 ? terms[0] : ad::add(terms[0], terms[1]);
}

// Encoder output and cached reference logits for one Stage-2 sample.
struct Stage2Item {
  const Sample* sample = nullptr;
  Tensor tokens;
  int grid_h = 0, grid_w = 0;
  std::vector<model::PromptTokens> prompts;
  std::vector<Tensor> ref_logits;  // clean samples only
  bool owned = false;              // see hold()
};

Stage2Item prepare_stage2(const ModelParams& current, const ModelParams& ref, const Sample& s, bool with_ref) {
  Stage2Item it;
  it.sample = &s;
  const auto e = model::encode_image(current, *s.image);
  it.tokens = e.tokens;
  it.grid_h = e.grid_h;
  it.grid_w = e.grid_w;
  for (const PromptSpec& p : s.prompts) {
    it.prompts.push_back(model::encode_prompt(current, p, s.image->height, s.image->width));
    if (with_ref) it.ref_logits.push_back(model::decode_mask(ref, e, it.prompts.back(), s.image->height, s.image->width));
  }
  return it;
}

Var decode_cached(Binder& b, const Stage2Item& it, std::size_t prompt) {
  ad::Graph& g = b.graph();
  const model::PromptTokens& pt = it.prompts[prompt];
  model::PromptVars pv{hold(g, pt.sparse, it.owned), pt.dense.size() ? hold(g, pt.dense, it.owned) : Var{}};
  return model::decode_mask(b, hold(g, it.tokens, it.owned), it.grid_h, it.grid_w, pv, it.sample->image->height,
                            it.sample->image->width);
}

Var stage2_loss_cached(Binder& b, const std::vector<const Stage2Item*>& triggered,
                       const std::vector<const Stage2Item*>& clean, const Stage2Config& cfg, double* eff, double* util) {
  if (triggered.empty() && clean.empty()) throw std::invalid_argument("stage-2 batch has no samples");
  std::vector<Var> terms;
  if (eff) *eff = 0.0;
  if (util) *util = 0.0;
  if (!triggered.empty()) {
    std::vector<Var> parts;
    for (const Stage2Item* it : triggered)
      for (std::size_t p = 0; p < it->prompts.size(); ++p)
        parts.push_back(segmentation_loss(decode_cached(b, *it, p), it->sample->label, static_cast<float>(cfg.eps_dice)));
    const Var m = mean_of(parts);
    if (eff) *eff = m.value()[0];
    terms.push_back(m);
  }
  if (!clean.empty()) {
    std::vector<Var> parts;
    ad::Graph& g = b.graph();
    for (const Stage2Item* it : clean)
      for (std::size_t p = 0; p < it->prompts.size(); ++p)
        parts.push_back(ad::mse(decode_cached(b, *it, p), hold(g, it->ref_logits[p], it->owned)));
    const Var m = mean_of(parts);
    if (util) *util = m.value()[0];
    terms.push_back(ad::scale(m, static_cast<float>(cfg.lambda2)));
  }
  return terms.size() == 1 ? terms[0] : ad::add(terms[0], terms[1]);
}

bool everything(const std::string&) { return true; }

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

[[noreturn]] void diverged(const std::string& stage, long step, const std::exception& e) {
  throw std::runtime_error(stage + ": training diverged at step " + std::to_string(step) + " (" + e.what() + ")");
}

void check_finite_loss(const Var& loss) {
  if (!std::isfinite(loss.value()[0])) throw NonFiniteError("non-finite loss");
}

// Drives the (clean, triggered) pairing shared by both attack stages: one
// step per clean sample, each paired with the next triggered sample in a
// per-epoch shuffled cycle.
template <typename StepFn>
void paired_epochs(const std::string& stage, int epochs, std::size_t n_clean, std::size_t n_trig, std::uint64_t seed,
                   TrainLog& log, StepFn&& step) {
  long global = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto t0 = Clock::now();
    const auto clean_order = shuffled(n_clean, mix_seed(seed, 2 * static_cast<std::uint64_t>(epoch)));
    const auto trig_order = shuffled(n_trig, mix_seed(seed, 2 * static_cast<std::uint64_t>(epoch) + 1));
    const std::size_t steps = n_clean > 0 ? n_clean : n_trig;
    EpochLog e{stage, epoch + 1, static_cast<int>(steps), 0, 0, 0, 0};
    for (std::size_t i = 0; i < steps; ++i, ++global) {
      const long c = n_clean ? static_cast<long>(clean_order[i]) : -1;
      const long t = n_trig ? static_cast<long>(trig_order[i % n_trig]) : -1;
      double eff = 0, util = 0, total = 0;
      try {
        total = step(c, t, eff, util);
      } catch (const NonFiniteError& ex) {
        diverged(stage, global, ex);
      }
      e.effectiveness += eff;
      e.utility += util;
      e.total += total;
    }
    if (steps) {
      e.effectiveness /= static_cast<double>(steps);
      e.utility /= static_cast<double>(steps);
      e.total /= static_cast<double>(steps);
    }
    e.wall_seconds = seconds_since(t0);
    log.epochs.push_back(e);
  }
}

}  // namespace

Var stage1_loss(Binder& b, const ModelParams& ref, const std::vector<const Frame*>& triggered,
                const std::vector<const Frame*>& clean, const Tensor& target_embedding, const Stage1Config& cfg,
                double* eff, double* util) {
  std::vector<Tensor> refs;
  for (const Frame* f : clean) refs.push_back(embedding_for(ref, *f, cfg.distance));
  std::vector<const Tensor*> ref_ptrs;
  for (const Tensor& t : refs) ref_ptrs.push_back(&t);
  return stage1_loss_cached(b, triggered, clean, ref_ptrs, target_embedding, cfg, eff, util, true);
}

Var stage2_loss(Binder& b, const ModelParams& ref, const std::vector<const Sample*>& triggered,
                const std::vector<const Sample*>& clean, const Stage2Config& cfg, double* eff, double* util) {
  if (cfg.prompt_set.empty()) throw std::invalid_argument("stage-2 prompt set is empty");
  // The encoder and prompt encoder in `b` are frozen, so their outputs are
  // plain constants for the decoder.
  const ModelParams& current = b.params();
  std::vector<Stage2Item> items;
  items.reserve(triggered.size() + clean.size());
  for (const Sample* s : triggered) items.push_back(prepare_stage2(current, ref, *s, false));
  for (const Sample* s : clean) items.push_back(prepare_stage2(current, ref, *s, true));
  for (auto& it : items) it.owned = true;
  std::vector<const Stage2Item*> t, c;
  for (std::size_t i = 0; i < items.size(); ++i) (i < triggered.size() ? t : c).push_back(&items[i]);
  return stage2_loss_cached(b, t, c, cfg, eff, util);
}

Var supervised_loss(Binder& b, const Sample& s, double eps_dice) {
  const auto e = model::encode_image(b, *s.image);
  std::vector<Var> parts;
  for (const PromptSpec& p : s.prompts) {
    const auto pv = model::encode_prompt(b, p, s.image->height, s.image->width);
    const Var logits = model::decode_mask(b, e.tokens, e.grid_h, e.grid_w, pv, s.image->height, s.image->width);
    parts.push_back(segmentation_loss(logits, s.label, static_cast<float>(eps_dice)));
  }
  return mean_of(parts);
}

TrainResult train_supervised(const ModelParams& init, const PoisonedDataset& data, const SupervisedConfig& cfg,
                             std::uint64_t seed, bool poisoned_labels, const std::string& stage_name) {
  validate(cfg);
  TrainResult r{init, {}};
  const auto samples = make_samples(data, cfg.prompt_set, poisoned_labels);
  if (samples.empty()) throw std::invalid_argument(stage_name + ": no annotated frames to train on");
  for (const Sample& s : samples)
    if (s.triggered) r.log.trigger_label_sources.push_back(poisoned_labels ? "target" : "gt");
  AdamW opt;
  opt.lr = cfg.lr;
  long global = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochLog e{stage_name, epoch + 1, static_cast<int>(samples.size()), 0, 0, 0, 0};
    for (std::size_t idx : shuffled(samples.size(), mix_seed(seed, static_cast<std::uint64_t>(epoch)))) {
      const Sample& s = samples[idx];
      try {
        ad::Graph g;
        Binder b(g, r.params, everything);
        const Var loss = supervised_loss(b, s, cfg.eps_dice);
        check_finite_loss(loss);
        g.backward(loss);
        opt.update(r.params, b.gradients());
        const double v = loss.value()[0];
        e.total += v;
        (s.triggered ? e.effectiveness : e.utility) += v;
      } catch (const NonFiniteError& ex) {
        diverged(stage_name, global, ex);
      }
      ++global;
    }
    e.total /= static_cast<double>(samples.size());
    e.effectiveness /= static_cast<double>(samples.size());
    e.utility /= static_cast<double>(samples.size());
    e.wall_seconds = seconds_since(t0);
    r.log.epochs.push_back(e);
  }
  return r;
}

TrainResult train_reference(const std::vector<VideoSequence>& clean, const model::ArchConfig& arch,
                            const SupervisedConfig& cfg, std::uint64_t seed) {
  if (clean.empty()) throw std::invalid_argument("train_reference: no clean videos");
  return train_supervised(model::init_params(arch, seed), as_clean(clean), cfg, mix_seed(seed, 1), false, "reference");
}

TrainResult train_baseline(const ModelParams& init, const PoisonedDataset& data, const SupervisedConfig& cfg,
                           std::uint64_t seed) {
  return train_supervised(init, data, cfg, seed, true, "baseline");
}

TrainResult train_stage1(const ModelParams& init, const ModelParams& ref, const PoisonedDataset& data,
                         const Stage1Config& cfg, std::uint64_t seed) {
  validate(cfg);
  TrainResult r{init, {}};
  std::vector<const Frame*> trig, clean;
  for (std::size_t k = 0; k < data.sequences.size(); ++k)
    for (std::size_t t = 0; t < data.sequences[k].frames.size(); ++t)
      (data.frame_flags[k][t] ? trig : clean).push_back(&data.sequences[k].frames[t]);
  if (trig.empty() && clean.empty()) throw std::invalid_argument("stage 1: no frames");
  const Frame& any = trig.empty() ? *clean[0] : *trig[0];
  const Frame target_image = cfg.target_image ? *cfg.target_image : gray_frame(any.height, any.width);
  // Captured once from the initial encoder.
  const Tensor target = embedding_for(init, target_image, cfg.distance);
  std::vector<Tensor> clean_ref;
  for (const Frame* f : clean) clean_ref.push_back(embedding_for(ref, *f, cfg.distance));

  AdamW opt;
  opt.lr = cfg.lr;
  const auto trainable = model::prefix_filter({"encoder."});
  paired_epochs("stage1", cfg.epochs, clean.size(), trig.size(), seed, r.log,
                [&](long c, long t, double& eff, double& util) {
                  ad::Graph g;
                  Binder b(g, r.params, trainable);
                  std::vector<const Frame*> tb, cb;
                  std::vector<const Tensor*> cr;
                  if (t >= 0) tb.push_back(trig[static_cast<std::size_t>(t)]);
                  if (c >= 0) {
                    cb.push_back(clean[static_cast<std::size_t>(c)]);
                    cr.push_back(&clean_ref[static_cast<std::size_t>(c)]);
                  }
                  const Var loss = stage1_loss_cached(b, tb, cb, cr, target, cfg, &eff, &util, false);
                  check_finite_loss(loss);
                  g.backward(loss);
                  opt.update(r.params, b.gradients());
                  return static_cast<double>(loss.value()[0]);
                });
  return r;
}

TrainResult train_stage2(const ModelParams& init, const ModelParams& ref, const PoisonedDataset& data,
                         const Stage2Config& cfg, std::uint64_t seed) {
  validate(cfg);
  TrainResult r{init, {}};
  const auto samples = make_samples(data, cfg.prompt_set, true);
  for (const Sample& s : samples)
    if (s.triggered) r.log.trigger_label_sources.push_back("target");
  // The encoder is frozen for the whole stage, so its outputs and the
  // reference decoder's logits are computed once.
  std::vector<Stage2Item> items;
  items.reserve(samples.size());
  std::vector<const Stage2Item*> trig, clean;
  for (const Sample& s : samples) items.push_back(prepare_stage2(init, ref, s, !s.triggered));
  for (const Stage2Item& it : items) (it.sample->triggered ? trig : clean).push_back(&it);
  if (items.empty()) throw std::invalid_argument("stage 2: no annotated frames");

  AdamW opt;
  opt.lr = cfg.lr;
  const auto trainable = model::prefix_filter({"decoder."});
  paired_epochs("stage2", cfg.epochs, clean.size(), trig.size(), seed, r.log,
                [&](long c, long t, double& eff, double& util) {
                  ad::Graph g;
                  Binder b(g, r.params, trainable);
                  std::vector<const Stage2Item*> tb, cb;
                  if (t >= 0) tb.push_back(trig[static_cast<std::size_t>(t)]);
                  if (c >= 0) cb.push_back(clean[static_cast<std::size_t>(c)]);
                  const Var loss = stage2_loss_cached(b, tb, cb, cfg, &eff, &util);
                  check_finite_loss(loss);
                  g.backward(loss);
                  opt.update(r.params, b.gradients());
                  return static_cast<double>(loss.value()[0]);
                });
  return r;
}

BadVsfmResult train_badvsfm(const ModelParams& init, const ModelParams& ref, const PoisonedDataset& data,
                            const Stage1Config& s1, const Stage2Config& s2, std::uint64_t seed) {
  BadVsfmResult out;
  TrainResult a = train_stage1(init, ref, data, s1, mix_seed(seed, 11));
  out.after_stage1 = a.params;
  TrainResult b = train_stage2(a.params, ref, data, s2, mix_seed(seed, 12));
  out.params = std::move(b.params);
  out.log = std::move(a.log);
  out.log.epochs.insert(out.log.epochs.end(), b.log.epochs.begin(), b.log.epochs.end());
  out.log.trigger_label_sources = std::move(b.log.trigger_label_sources);
  return out;
}

}  // namespace badseg::train
