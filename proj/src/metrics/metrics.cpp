#include "badseg/metrics.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "badseg/model.hpp"

namespace badseg::metrics {

Mask binarize(const Tensor& logits, float tau) {
  if (logits.ndim() != 2) throw std::invalid_argument("binarize expects [H,W] logits");
  Mask m(logits.dim(0), logits.dim(1));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    m.labels[i] = p >= tau ? 1 : 0;
  }
  return m;
}

namespace {

struct Counts {
  std::size_t inter = 0, pred = 0, gt = 0;
};

Counts count(const Mask& p, const Mask& g) {
  if (!p.same_shape(g)) throw std::invalid_argument("prediction and ground truth shapes differ");
  Counts c;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const bool a = p.labels[i] != 0, b = g.labels[i] != 0;
    c.inter += a && b;
    c.pred += a;
    c.gt += b;
  }
  return c;
}

double iou_of(const Counts& c) {
  const std::size_t uni = c.pred + c.gt - c.inter;
  return uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
}

double f_of(const Counts& c) {
  if (c.pred == 0 && c.gt == 0) return 1.0;
  if (c.pred == 0 || c.gt == 0 || c.inter == 0) return 0.0;
  const double precision = static_cast<double>(c.inter) / static_cast<double>(c.pred);
  const double recall = static_cast<double>(c.inter) / static_cast<double>(c.gt);
  return 2.0 * precision * recall / (precision + recall);
}

void check_lengths(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("sequence lengths differ: " + std::to_string(preds.size()) + " predictions, " +
                                std::to_string(gts.size()) + " ground-truth masks");
  }
  if (preds.empty()) throw std::invalid_argument("empty sequence");
}

}  // namespace

double iou(const Mask& pred, const Mask& gt) { return iou_of(count(pred, gt)); }

double miou_sequence(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  check_lengths(preds, gts);
  double s = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t) s += iou(preds[t], gts[t]);
  return s / static_cast<double>(preds.size());
}

double jf_sequence(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  check_lengths(preds, gts);
  double j = 0.0, f = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const Counts c = count(preds[t], gts[t]);
    j += iou_of(c);
    f += f_of(c);
  }
  return 0.5 * (j + f) / static_cast<double>(preds.size());
}

double asr(const std::vector<Mask>& preds, const AttackTarget& target) {
  if (preds.empty()) throw std::invalid_argument("asr needs at least one prediction");
  double s = 0.0;
  if (std::holds_alternative<Disappearance>(target)) {
    for (const Mask& p : preds) s += p.foreground() == 0 ? 1.0 : 0.0;
  } else {
    const Mask tm = make_target_mask(preds[0].height, preds[0].width, target);
    for (const Mask& p : preds) s += iou(p, tm);
  }
  return s / static_cast<double>(preds.size());
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  j["target"] = r.target;
  j["by_prompt"] = nlohmann::json::object();
  for (const auto& [k, v] : r.by_prompt) j["by_prompt"][k] = {{"miou", v.miou}, {"jf", v.jf}, {"asr", v.asr}};
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"split", row.split},
                         {"video", row.video},
                         {"prompt", row.prompt},
                         {"miou", row.miou},
                         {"jf", row.jf},
                         {"asr", row.asr}});
  }
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.target = j.at("target").get<std::string>();
  r.by_prompt.clear();
  for (const auto& [k, v] : j.at("by_prompt").items()) {
    r.by_prompt[k] = {v.at("miou").get<double>(), v.at("jf").get<double>(), v.at("asr").get<double>()};
  }
  r.rows.clear();
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("split").get<std::string>(), row.at("video").get<std::string>(),
                      row.at("prompt").get<std::string>(), row.at("miou").get<double>(), row.at("jf").get<double>(),
                      row.at("asr").get<double>()});
  }
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << "split,video,prompt,miou,jf,asr\n";
  for (const auto& row : r.rows)
    out << row.split << ',' << row.video << ',' << row.prompt << ',' << row.miou << ',' << row.jf << ',' << row.asr
        << '\n';
  return out.str();
}

EvalReport evaluate(const model::ModelParams& params, const std::vector<VideoSequence>& clean,
                    const std::vector<VideoSequence>& triggered, const AttackTarget& target,
                    const std::vector<PromptKind>& prompts) {
  return evaluate(params, clean, triggered, target, prompts, FrameKeep{});
}

EvalReport evaluate(const model::ModelParams& params, const std::vector<VideoSequence>& clean,
                    const std::vector<VideoSequence>& triggered, const AttackTarget& target,
                    const std::vector<PromptKind>& prompts, const FrameKeep& keep) {
  if ((!keep.clean.empty() && keep.clean.size() != clean.size()) ||
      (!keep.triggered.empty() && keep.triggered.size() != triggered.size()))
    throw std::invalid_argument("frame keep mask does not match the splits");
  EvalReport report;
  report.target = target_name(target);
  for (PromptKind kind : prompts) {
    const std::string name = prompt_kind_name(kind);
    PromptScores scores;
    // Per-video scores averaged uniformly over the objects visible in frame 0.
    auto run = [&](const VideoSequence& v, bool is_clean, const std::vector<bool>* kept) -> std::optional<VideoRow> {
      VideoRow row{is_clean ? "clean" : "triggered", v.id, name, 0.0, 0.0, 0.0};
      int objects = 0;
      for (int obj : v.object_ids) {
        std::vector<Mask> gts;
        for (const Mask& m : v.gt_masks) gts.push_back(binary_mask(m, obj));
        if (gts[0].foreground() == 0) continue;
        const PromptSpec prompt = derive_prompts(gts[0]).get(kind);
        std::vector<Mask> preds;
        for (const Tensor& logits : model::forward_video(params, v, prompt)) preds.push_back(binarize(logits));
        if (kept) {
          std::vector<Mask> p2, g2;
          for (std::size_t t = 0; t < preds.size(); ++t)
            if ((*kept)[t]) p2.push_back(preds[t]), g2.push_back(gts[t]);
          if (p2.empty()) continue;
          preds.swap(p2);
          gts.swap(g2);
        }
        if (is_clean) {
          row.miou += miou_sequence(preds, gts);
          row.jf += jf_sequence(preds, gts);
        } else {
          row.asr += asr(preds, target);
        }
        ++objects;
      }
      if (objects == 0) return std::nullopt;
      row.miou /= objects;
      row.jf /= objects;
      row.asr /= objects;
      return row;
    };
    std::size_t n_clean = 0, n_trig = 0;
    for (std::size_t k = 0; k < clean.size(); ++k) {
      const auto& v = clean[k];
      if (auto row = run(v, true, keep.clean.empty() ? nullptr : &keep.clean[k])) {
        scores.miou += row->miou;
        scores.jf += row->jf;
        ++n_clean;
        report.rows.push_back(*row);
      }
    }
    for (std::size_t k = 0; k < triggered.size(); ++k) {
      const auto& v = triggered[k];
      if (auto row = run(v, false, keep.triggered.empty() ? nullptr : &keep.triggered[k])) {
        scores.asr += row->asr;
        ++n_trig;
        report.rows.push_back(*row);
      }
    }
    if (n_clean) scores.miou /= static_cast<double>(n_clean), scores.jf /= static_cast<double>(n_clean);
    if (n_trig) scores.asr /= static_cast<double>(n_trig);
    report.by_prompt[name] = scores;
  }
  return report;
}

}  // namespace badseg::metrics
