#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "badseg/analysis.hpp"
#include "badseg/config.hpp"
#include "badseg/defenses.hpp"
#include "badseg/metrics.hpp"

/// Command orchestration shared by the command-line tool and the
/// acceptance harness. A run directory is keyed by the config hash.
namespace badseg::pipeline {

struct Context {
  config::RunConfig cfg;
  nlohmann::json merged;
  std::string hash;
  std::filesystem::path dir;  // <out_root>/<hash>
};

Context make_context(config::RunConfig cfg, nlohmann::json merged, const std::filesystem::path& out_root);

/// Recognized command names in pipeline order.
const std::vector<std::string>& commands();

/// Runs one command; throws std::invalid_argument for an unknown command and
/// std::runtime_error when a prerequisite artifact is missing.
void run_command(const std::string& command, const Context& ctx, std::ostream& log);

/// synth → train-reference → poison → train-attack → train-baseline → eval →
/// analyze-gradients → analyze-attention → defend → report.
void run_full(const Context& ctx, std::ostream& log);

// Data and model access (run-directory layout).
std::vector<VideoSequence> train_videos(const Context& ctx);
std::vector<VideoSequence> test_videos(const Context& ctx);
std::vector<VideoSequence> holdout_videos(const Context& ctx);
std::vector<VideoSequence> triggered_test_videos(const Context& ctx, const std::vector<VideoSequence>& clean);
TriggerSpec trigger_for(const Context& ctx, int height, int width);

void save_poisoned(const std::filesystem::path& dir, const PoisonedDataset& data, const nlohmann::json& meta);
PoisonedDataset load_poisoned(const std::filesystem::path& dir);

std::filesystem::path model_dir(const Context& ctx, const std::string& name);
bool has_model(const Context& ctx, const std::string& name);
model::ModelParams load_model(const Context& ctx, const std::string& name);

// ---------------------------------------------------------------------------
// Reports.

struct GradientArtifact {
  std::string loss;
  analysis::CosineResult result;
  analysis::CosineStats stats;
};

struct AttentionFrame {
  std::string video;
  int frame = 0;
  std::pair<int, int> triggered_cell, clean_cell;
  std::optional<bool> in_footprint;  // nullopt for whole-frame triggers
};

struct AttentionArtifact {
  std::vector<AttentionFrame> frames;
  std::vector<std::filesystem::path> overlays;
  int inside() const;
  int coincide() const;
};

struct Artifacts {
  std::string hash;
  std::string tool_version;
  std::map<std::string, metrics::EvalReport> evals;
  std::map<std::string, GradientArtifact> gradients;
  std::map<std::string, AttentionArtifact> attention;
  std::string defense_model;
  std::vector<defense::DefenseReport> defenses;

  bool empty() const { return evals.empty() && gradients.empty() && attention.empty() && defenses.empty(); }
};

Artifacts collect_artifacts(const std::filesystem::path& run_dir);

/// eval.json, eval.csv, cosines.csv, cosine_stats.json, rollout_*.png,
/// defense.csv, summary.md (those with content). Throws on an empty set.
void write_report(const Artifacts& artifacts, const std::filesystem::path& out_dir);

}  // namespace badseg::pipeline
