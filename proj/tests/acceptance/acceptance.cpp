// Acceptance harness: one PASS/FAIL line per criterion, tolerances pinned below.
//
// Exit status is 0 whenever every check ran to completion, so an honest FAIL
// line is reported without breaking the build. Pass --strict to turn any FAIL
// into exit status 1. Harness errors (exceptions) always exit 2. --report
// copies every printed line to FILE, since ctest hides passing output.
//
//   acceptance [--work DIR] [--report FILE] [--strict] [--skip-pipeline]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "badseg/config.hpp"
#include "badseg/defenses.hpp"
#include "badseg/gradcheck.hpp"
#include "badseg/metrics.hpp"
#include "badseg/pipeline.hpp"
#include "badseg/random.hpp"
#include "badseg/signal.hpp"
#include "badseg/triggers.hpp"
#include "loss_fixtures.hpp"

namespace fs = std::filesystem;
using namespace badseg;

namespace {

// ---- pinned tolerances ------------------------------------------------------
constexpr double kGradTol = 1e-4;
constexpr int kGradProbes = 100;
constexpr double kGradBudgetSec = 120.0;
constexpr int kMetricPairs = 1000;
constexpr double kMetricTol = 1e-6;
constexpr double kWarpTol = 1e-5;
constexpr double kPhaseTol = 1e-5;
constexpr double kFibaIdentityTol = 1e-5;
constexpr double kBlendTol = 1e-6;
constexpr double kAttackAsr = 0.90;
constexpr double kCleanMiouGap = 0.05;
constexpr double kBaselineAsrGap = 0.40;
constexpr double kPipelineBudgetSec = 15 * 60.0;
constexpr double kStage1AsrBand = 0.05;
constexpr double kStage1MiouDrop = 0.05;
constexpr double kStage2Asr = 0.20;
constexpr std::size_t kMinPairs = 50;
constexpr int kAttentionFrames = 10;
constexpr int kAttentionHits = 8;
constexpr double kDefenseAsr = 0.80;
constexpr double kSpectralPrecision = 0.9;
constexpr double kSpectralAsrDrop = 0.10;

struct Line {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Line> g_lines;
std::ofstream g_report;

void emit(const std::string& line) {
  std::cout << line << std::endl;
  if (g_report) g_report << line << std::endl;
}

void report(int id, bool pass, const std::string& detail) {
  g_lines.push_back({id, pass, detail});
  emit(std::string(pass ? "PASS" : "FAIL") + "  criterion " + std::to_string(id) + ": " + detail);
}

void info(const std::string& s) { emit("      info: " + s); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: gradients -----------------------------------------------------------

void criterion_gradients() {
  using namespace badseg::testing;
  const auto t0 = std::chrono::steady_clock::now();
  const auto s1 = stage1_fixture();
  const double e1 = grad_check(s1->loss, s1->tensors(), {.step = kStage1Step, .probes = kGradProbes, .seed = 101});
  const auto s2 = stage2_fixture();
  const double e2 = grad_check(s2->loss, s2->tensors(), {.step = kDecoderStep, .probes = kGradProbes, .seed = 102});
  const auto bl = baseline_fixture();
  const double e3 = grad_check(bl->loss, bl->tensors(), {.step = kDecoderStep, .probes = kGradProbes, .seed = 103});
  const double sec = since(t0);
  const bool ok = e1 < kGradTol && e2 < kGradTol && e3 < kGradTol && sec < kGradBudgetSec;
  report(1, ok,
         fmt("max rel err stage1 %.2e, stage2 %.2e, baseline %.2e (< %.0e, %d probes each); %.1fs (< %.0fs)", e1, e2,
             e3, kGradTol, kGradProbes, sec, kGradBudgetSec));
}

// ---- 2: metric oracles --------------------------------------------------------

Mask random_mask(Rng& rng, double density) {
  Mask m(8, 8);
  for (auto& v : m.labels) v = rng.uniform() < density ? static_cast<std::uint8_t>(1 + rng.below(3)) : 0;
  return m;
}

// Pixel-counting oracles written against the definitions, not the library.
double oracle_iou(const Mask& p, const Mask& g) {
  int inter = 0, uni = 0;
  for (std::size_t k = 0; k < p.labels.size(); ++k) {
    const bool a = p.labels[k] > 0, b = g.labels[k] > 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : double(inter) / uni;
}

// Dice form: 2|P∩G| / (|P| + |G|), equal to the harmonic mean of P and R.
double oracle_f(const Mask& p, const Mask& g) {
  int inter = 0, np = 0, ng = 0;
  for (std::size_t k = 0; k < p.labels.size(); ++k) {
    np += p.labels[k] > 0;
    ng += g.labels[k] > 0;
    inter += p.labels[k] > 0 && g.labels[k] > 0;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * inter / (np + ng);
}

void criterion_metrics() {
  Rng rng(2024);
  double worst = 0.0;
  int empties = 0;
  std::vector<Mask> preds, gts;
  for (int n = 0; n < kMetricPairs; ++n) {
    // Densities include 0 so empty masks show up on both sides.
    const double dp = n % 10 == 0 ? 0.0 : rng.uniform();
    const double dg = n % 7 == 0 ? 0.0 : rng.uniform();
    Mask p = random_mask(rng, dp), g = random_mask(rng, dg);
    empties += p.foreground() == 0 || g.foreground() == 0;
    preds.push_back(p);
    gts.push_back(g);
  }
  // Per pair (sequences of length one) and grouped sequences of 1..9 frames.
  std::size_t at = 0;
  int seqs = 0;
  for (std::size_t len = 1; at < preds.size(); len = len % 9 + 1, ++seqs) {
    const std::size_t end = std::min(preds.size(), at + len);
    const std::vector<Mask> ps(preds.begin() + at, preds.begin() + end), gs(gts.begin() + at, gts.begin() + end);
    double j = 0, f = 0, empty = 0, hit = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      j += oracle_iou(ps[k], gs[k]);
      f += oracle_f(ps[k], gs[k]);
      empty += ps[k].foreground() == 0;
    }
    const double m = double(ps.size());
    // CustomMask target: the first ground truth of the group.
    const CustomMask target{gs.front()};
    for (const auto& p : ps) hit += oracle_iou(p, gs.front());
    worst = std::max(worst, std::fabs(metrics::miou_sequence(ps, gs) - j / m));
    worst = std::max(worst, std::fabs(metrics::jf_sequence(ps, gs) - 0.5 * (j + f) / m));
    worst = std::max(worst, std::fabs(metrics::asr(ps, Disappearance{}) - empty / m));
    worst = std::max(worst, std::fabs(metrics::asr(ps, target) - hit / m));
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::vector<Mask> p1{ps[k]}, g1{gs[k]};
      worst = std::max(worst, std::fabs(metrics::miou_sequence(p1, g1) - oracle_iou(ps[k], gs[k])));
      worst = std::max(worst, std::fabs(metrics::jf_sequence(p1, g1) -
                                        0.5 * (oracle_iou(ps[k], gs[k]) + oracle_f(ps[k], gs[k]))));
    }
    at = end;
  }
  report(2, worst <= kMetricTol,
         fmt("%d random 8x8 pairs (%d with an empty side), %d sequences; worst |lib - oracle| %.2e (<= %.0e)",
             kMetricPairs, empties, seqs, worst, kMetricTol));
}

// ---- 3: trigger exactness -----------------------------------------------------

Frame noise(int h, int w, std::uint64_t seed) {
  Frame f(h, w);
  Rng rng(seed);
  for (float& v : f.rgb) v = static_cast<float>(rng.uniform());
  return f;
}

void criterion_triggers() {
  std::vector<std::string> bad;

  // BadNet 40 px, pad 8, bottom-right on 100×100: rows and columns 52..91.
  {
    const Frame in = noise(100, 100, 1);
    const Frame out = apply_trigger(in, BadNetTrigger{}, 0);
    int wrong = 0;
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 100; ++j) {
        const bool inside = i >= 52 && i <= 91 && j >= 52 && j <= 91;
        for (int c = 0; c < 3; ++c) {
          const float want = inside ? (c == 0 ? 1.0f : 0.0f) : in.at(i, j, c);
          wrong += out.at(i, j, c) != want;
        }
      }
    if (wrong) bad.push_back(fmt("badnet %d wrong values", wrong));
  }

  // WaNet: peak displacement and zero-field identity.
  double disp_err = 0.0;
  for (auto [h, w] : {std::pair{64, 64}, std::pair{100, 100}, std::pair{48, 80}}) {
    const Tensor field = make_wanet_field(h, w, WaNetTrigger{});
    double peak = 0.0;
    for (float v : field.values()) peak = std::max(peak, double(std::fabs(v)));
    disp_err = std::max(disp_err, std::fabs(peak - 0.01 * std::min(h, w)));
  }
  if (disp_err > kWarpTol) bad.push_back(fmt("wanet displacement err %.2e", disp_err));
  {
    const Frame in = noise(37, 53, 2);
    const Frame out = bilinear_warp(in, Tensor({37, 53, 2}));
    double d = 0;
    for (std::size_t k = 0; k < in.rgb.size(); ++k) d = std::max(d, double(std::fabs(in.rgb[k] - out.rgb[k])));
    if (d != 0.0) bad.push_back(fmt("zero-field warp moved a value by %.2e", d));
  }

  // FIBA: benign phase kept bin by bin; alpha 0 reproduces the frame.
  double phase_err = 0.0, ident_err = 0.0;
  {
    const Frame benign = noise(64, 64, 3), trig = noise(64, 64, 4);
    for (int c = 0; c < 3; ++c) {
      ComplexGrid b(64, 64), t(64, 64);
      for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
          b.at(i, j) = benign.at(i, j, c);
          t.at(i, j) = trig.at(i, j, c);
        }
      b = fft2(b);
      t = fft2(t);
      const ComplexGrid m = fiba_mix_spectrum(b, t, 0.06, 0.25);
      for (std::size_t k = 0; k < m.data.size(); ++k)
        if (std::abs(m.data[k]) > 1e-9 && std::abs(b.data[k]) > 1e-9)
          phase_err = std::max(phase_err, std::fabs(std::remainder(std::arg(m.data[k]) - std::arg(b.data[k]), 2 * M_PI)));
    }
    const Frame same = fiba_mix(benign, trig, 0.06, 0.0);
    for (std::size_t k = 0; k < same.rgb.size(); ++k)
      ident_err = std::max(ident_err, double(std::fabs(same.rgb[k] - benign.rgb[k])));
  }
  if (phase_err >= kPhaseTol) bad.push_back(fmt("fiba phase err %.2e", phase_err));
  if (ident_err > kFibaIdentityTol) bad.push_back(fmt("fiba alpha=0 err %.2e", ident_err));

  // Blended: 0.82·0.5 + 0.18·1.0 = 0.59 on the 18×18 bottom-right square.
  double blend_err = 0.0;
  int blend_wrong = 0;
  {
    BlendedTrigger bt;
    bt.texture = Frame(100, 100, 1.0f);
    const Frame out = apply_trigger(Frame(100, 100, 0.5f), bt, 0);
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 100; ++j)
        for (int c = 0; c < 3; ++c) {
          const bool inside = i >= 82 && j >= 82;
          if (inside)
            blend_err = std::max(blend_err, std::fabs(double(out.at(i, j, c)) - 0.59));
          else
            blend_wrong += out.at(i, j, c) != 0.5f;
        }
  }
  if (blend_err > kBlendTol || blend_wrong) bad.push_back(fmt("blended err %.2e, %d outside", blend_err, blend_wrong));

  std::string detail = bad.empty() ? "badnet footprint exact; " : "";
  for (const auto& b : bad) detail += b + "; ";
  detail += fmt("wanet |peak - 0.01 min(H,W)| %.1e, fiba phase %.1e, fiba a=0 %.1e, blended |x - 0.59| %.1e",
                disp_err, phase_err, ident_err, blend_err);
  report(3, bad.empty(), detail);
}

// ---- pipeline-backed criteria --------------------------------------------------

struct Run {
  pipeline::Context ctx;
  pipeline::Artifacts art;
  double seconds = 0.0;
};

Run run_pipeline(const fs::path& root, const std::vector<std::string>& overrides,
                 const std::vector<std::string>& commands = {}) {
  nlohmann::json user = nlohmann::json::object();
  for (const auto& o : overrides) config::apply_override(user, o);
  const auto merged = config::merge_config(user);
  Run r{pipeline::make_context(config::parse_config(merged), merged, root), {}, 0.0};
  fs::remove_all(r.ctx.dir);
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  if (commands.empty())
    pipeline::run_full(r.ctx, log);
  else
    for (const auto& c : commands) pipeline::run_command(c, r.ctx, log);
  r.seconds = since(t0);
  std::ofstream(root / (r.ctx.hash + ".log")) << log.str();
  r.art = pipeline::collect_artifacts(r.ctx.dir);
  return r;
}

const metrics::PromptScores& point(const pipeline::Artifacts& a, const std::string& model) {
  return a.evals.at(model).by_prompt.at("point");
}

double video_level_asr(const metrics::EvalReport& r) {
  int n = 0, hit = 0;
  for (const auto& row : r.rows)
    if (row.split == "triggered" && row.prompt == "point") {
      ++n;
      hit += row.asr >= 0.5;
    }
  return n ? double(hit) / n : 0.0;
}

void criterion_attack(const Run& a) {
  const auto& bad = point(a.art, "badvsfm");
  const auto& ref = point(a.art, "reference");
  const auto& base = point(a.art, "baseline");
  const double gap = bad.asr - base.asr;
  const bool ok = bad.asr >= kAttackAsr && std::fabs(bad.miou - ref.miou) <= kCleanMiouGap &&
                  gap >= kBaselineAsrGap && a.seconds < kPipelineBudgetSec;
  report(4, ok,
         fmt("point ASR %.3f (>= %.2f); clean mIoU %.4f vs reference %.4f (|d| %.4f <= %.2f); baseline ASR %.3f, "
             "gap %.3f (>= %.2f); pipeline %.0fs (< %.0fs)",
             bad.asr, kAttackAsr, bad.miou, ref.miou, std::fabs(bad.miou - ref.miou), kCleanMiouGap, base.asr, gap,
             kBaselineAsrGap, a.seconds, kPipelineBudgetSec));
  info(fmt("video-level ASR (share of videos with frame ASR >= 0.5): badvsfm %.3f, baseline %.3f",
           video_level_asr(a.art.evals.at("badvsfm")), video_level_asr(a.art.evals.at("baseline"))));
  info("baseline ASR depends strongly on its training seed; see README for the measured spread");
}

void criterion_ablation(const Run& a, const Run& s2only) {
  const auto& two = point(a.art, "badvsfm");
  const auto& s1 = point(a.art, "badvsfm_stage1");
  const auto& s2 = point(s2only.art, "badvsfm");
  const bool ok = std::fabs(s1.asr - two.asr) <= kStage1AsrBand && two.miou - s1.miou >= kStage1MiouDrop &&
                  s2.asr < kStage2Asr;
  report(5, ok,
         fmt("stage-1-only ASR %.3f vs two-stage %.3f (|d| %.3f <= %.2f), mIoU %.4f vs %.4f (drop %.4f >= %.2f); "
             "stage-2-only ASR %.3f (< %.2f)",
             s1.asr, two.asr, std::fabs(s1.asr - two.asr), kStage1AsrBand, s1.miou, two.miou, two.miou - s1.miou,
             kStage1MiouDrop, s2.asr, kStage2Asr));
  info(fmt("stage-2-only clean mIoU %.4f", s2.miou));
}

void criterion_cosines(const Run& a) {
  const auto& bad = a.art.gradients.at("badvsfm");
  const auto& base = a.art.gradients.at("baseline");
  const auto consistent = [](const analysis::CosineStats& s) { return s.frac_below_m02 <= s.frac_neg; };
  const std::size_t n = std::min(bad.result.cosines.size(), base.result.cosines.size());
  const bool ok = n >= kMinPairs && bad.stats.mean < 0 && bad.stats.median < 0 && base.stats.mean > 0 &&
                  base.stats.median > 0 && consistent(bad.stats) && consistent(base.stats);
  report(6, ok,
         fmt("%zu pairs (>= %zu); badvsfm [%s] mean %+.4f median %+.4f (< 0); baseline [%s] mean %+.4f median %+.4f "
             "(> 0); frac_below_m02 <= frac_neg: %s",
             n, kMinPairs, bad.loss.c_str(), bad.stats.mean, bad.stats.median, base.loss.c_str(), base.stats.mean,
             base.stats.median, consistent(bad.stats) && consistent(base.stats) ? "yes" : "no"));
  info(fmt("frac_neg badvsfm %.3f, baseline %.3f", bad.stats.frac_neg, base.stats.frac_neg));
}

void criterion_attention(const Run& a) {
  const auto& bad = a.art.attention.at("badvsfm");
  const auto& base = a.art.attention.at("baseline");
  const int nb = static_cast<int>(bad.frames.size()), nbase = static_cast<int>(base.frames.size());
  const bool ok = nb == kAttentionFrames && nbase == kAttentionFrames && bad.inside() >= kAttentionHits &&
                  base.coincide() >= kAttentionHits;
  report(7, ok,
         fmt("badvsfm argmax in trigger %d/%d; baseline argmax coincides with clean twin %d/%d (need >= %d)",
             bad.inside(), nb, base.coincide(), nbase, kAttentionHits));
  info(fmt("badvsfm coincide %d/%d; baseline in trigger %d/%d", bad.coincide(), nb, base.inside(), nbase));
}

std::vector<std::vector<double>> planted_clusters() {
  // 90 clean points near the origin, 10 planted ones shifted along one axis.
  Rng rng(77);
  std::vector<std::vector<double>> reps;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> r(8);
    for (double& v : r) v = 0.01 * rng.normal();
    if (i >= 90) r[0] += 10.0;
    reps.push_back(r);
  }
  return reps;
}

double planted_precision(double fraction, std::size_t* flagged) {
  const auto res = defense::spectral_signatures(planted_clusters(), fraction);
  std::vector<bool> flags(100, false), truth(100, false);
  for (auto i : res.flagged) flags[i] = true;
  for (int i = 90; i < 100; ++i) truth[static_cast<std::size_t>(i)] = true;
  const auto st = defense::detection_stats(flags, truth);
  *flagged = st.flagged;
  return st.precision;
}

void criterion_defenses(const Run& a) {
  std::map<std::string, const defense::DefenseReport*> by;
  for (const auto& r : a.art.defenses) by[defense::column_name(r)] = &r;
  const auto asr_after = [&](const std::string& col) { return by.at(col)->after.by_prompt.at("point").asr; };
  const double ft = asr_after("finetune_10pct"), pr = asr_after("prune_k5");
  const auto& sp = *by.at("spectral");
  const double drop = sp.before.by_prompt.at("point").asr - sp.after.by_prompt.at("point").asr;
  std::size_t flagged = 0, wide_flagged = 0;
  const double prec = planted_precision(1.0 / 15.0, &flagged);
  const double wide = planted_precision(0.10, &wide_flagged);
  const bool ok = ft >= kDefenseAsr && pr >= kDefenseAsr && prec >= kSpectralPrecision && drop <= kSpectralAsrDrop;
  report(8, ok,
         fmt("ASR after 10-epoch 10%% fine-tune %.3f, after pruning 5 channels %.3f (>= %.2f); planted spectral "
             "precision %.3f with %zu flagged (>= %.1f); spectral ASR drop on badvsfm %.3f (<= %.2f)",
             ft, pr, kDefenseAsr, prec, flagged, kSpectralPrecision, drop, kSpectralAsrDrop));
  info(fmt("planted set at the true 10%% fraction flags %zu points, precision %.3f (1.5x margin over-flags)",
           wide_flagged, wide));
  info(fmt("fine-tune epochs %s", by.at("finetune_10pct")->hyper.value("epochs", nlohmann::json()).dump().c_str()));
}

// Relative path → bytes for every file under a run directory.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = s.str();
  }
  return out;
}

void criterion_determinism(const Run& a, const Run& b) {
  const auto sa = snapshot(a.ctx.dir), sb = snapshot(b.ctx.dir);
  std::vector<std::string> diff;
  for (const auto& [k, v] : sa) {
    const auto it = sb.find(k);
    if (it == sb.end() || it->second != v) diff.push_back(k);
  }
  for (const auto& [k, v] : sb)
    if (!sa.count(k)) diff.push_back(k);
  std::size_t ckpt = 0, reports = 0;
  for (const auto& [k, v] : sa) {
    ckpt += k.rfind("models", 0) == 0;
    reports += k.rfind("report", 0) == 0;
  }
  std::string detail = fmt("%zu files compared (%zu under models/, %zu under report/), %zu differ", sa.size(), ckpt,
                           reports, diff.size());
  for (std::size_t k = 0; k < std::min<std::size_t>(diff.size(), 3); ++k) detail += "; " + diff[k];
  report(9, diff.empty() && ckpt > 0 && reports > 0, detail);
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "badseg_acceptance";
  bool strict = false, skip_pipeline = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--strict")
      strict = true;
    else if (a == "--skip-pipeline")
      skip_pipeline = true;
    else if (a == "--work" && i + 1 < argc)
      work = argv[++i];
    else if (a == "--report" && i + 1 < argc)
      g_report.open(argv[++i]);
    else {
      std::cerr << "usage: acceptance [--work DIR] [--report FILE] [--strict] [--skip-pipeline]\n";
      return 2;
    }
  }
  try {
    criterion_gradients();
    criterion_metrics();
    criterion_triggers();
    if (!skip_pipeline) {
      info("running the default pipeline twice plus a stage-2-only variant under " + work.string());
      const Run a = run_pipeline(work / "a", {});
      const Run b = run_pipeline(work / "b", {});
      const Run s2 = run_pipeline(work / "s2only", {"train.s1.epochs=0"},
                                  {"synth", "train-reference", "poison", "train-attack", "eval"});
      info("run " + a.ctx.hash + fmt(": %.0fs, repeat %.0fs, stage-2-only %.0fs", a.seconds, b.seconds, s2.seconds));
      criterion_attack(a);
      criterion_ablation(a, s2);
      criterion_cosines(a);
      criterion_attention(a);
      criterion_defenses(a);
      criterion_determinism(a, b);
    }
  } catch (const std::exception& e) {
    std::cerr << "harness error: " << e.what() << "\n";
    return 2;
  }
  int failed = 0;
  for (const auto& l : g_lines) failed += !l.pass;
  emit("summary: " + std::to_string(g_lines.size() - failed) + " passed, " + std::to_string(failed) + " failed");
  return strict && failed ? 1 : 0;
}
