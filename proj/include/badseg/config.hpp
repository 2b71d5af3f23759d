#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "badseg/dataset.hpp"
#include "badseg/defenses.hpp"
#include "badseg/model.hpp"
#include "badseg/training.hpp"
#include "json.hpp"

namespace badseg::config {

inline constexpr const char* kToolVersion = "0.1.0";

/// Every problem found while reading a config, one line per field.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct SynthSpec {
  std::uint64_t seed = 0;
  int videos = 20;
  int frames = 16;
  int height = 64;
  int width = 64;
};

struct DatasetSection {
  /// Training manifest; empty means the synthetic generator.
  std::string manifest;
  std::string test_manifest;
  SynthSpec train{0, 20, 16, 64, 64};
  SynthSpec test{1000, 6, 16, 64, 64};
  /// Clean videos never trained on; STRIP threshold calibration.
  SynthSpec holdout{2000, 2, 16, 64, 64};
};

struct TrainSection {
  std::uint64_t seed = 0;
  train::SupervisedConfig reference;
  train::Stage1Config s1;
  /// PNG path for x_target; empty selects the mid-gray frame.
  std::string s1_target_image;
  train::Stage2Config s2;
  train::SupervisedConfig baseline;
};

struct EvalSection {
  std::vector<PromptKind> prompts{kAllPromptKinds, kAllPromptKinds + 3};
  std::vector<std::string> splits{"clean", "triggered"};
};

struct AnalysisSection {
  int pairs = 96;
  int frame_stride = 1;
  int rollout_frames = 10;
  /// "auto" uses each model's own objective, else "baseline" or "stage1".
  std::string loss = "auto";
};

struct DefenseSection {
  std::string model = "badvsfm";
  std::vector<double> finetune_fractions{0.01, 0.05, 0.10};
  int finetune_epochs = 10;
  double finetune_lr = 1e-4;
  std::vector<int> prune_k{5, 15, 30};
  int calib_frames = 16;
  defense::StripConfig strip;
  int strip_pool_frames = 64;
  /// Unset means the poisoning rate.
  std::optional<double> spectral_fraction;
  int spectral_retrain_epochs = 5;
};

struct RunConfig {
  DatasetSection dataset;
  nlohmann::json trigger;  // resolved against frame size at use
  PoisonConfig poison;     // trigger field is filled at use
  model::ArchConfig model;
  TrainSection train;
  EvalSection eval;
  AnalysisSection analysis;
  DefenseSection defense;
  std::filesystem::path base_dir;  // relative paths resolve here
};

/// The full default document; also the schema for strict parsing.
nlohmann::json default_config_json();
nlohmann::json default_trigger_json(const std::string& type);
nlohmann::json default_target_json(const std::string& type);

/// Applies `key.path=value` (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& user, const std::string& assignment);
/// Sets every seed from one value.
void apply_seed(nlohmann::json& user, std::uint64_t seed);

/// Merges `user` over the defaults, rejecting unknown keys and type changes.
nlohmann::json merge_config(const nlohmann::json& user);
RunConfig parse_config(const nlohmann::json& merged, const std::filesystem::path& base_dir = ".");
/// Reads, merges and parses; throws ConfigError listing every problem.
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed, nlohmann::json* merged_out = nullptr);

/// 16 hex digits of FNV-1a over the canonical dump.
std::string config_hash(const nlohmann::json& merged);

TriggerSpec make_trigger(const nlohmann::json& j, int height, int width, const std::filesystem::path& base_dir);
AttackTarget make_target(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json target_json(const AttackTarget& t);

}  // namespace badseg::config
