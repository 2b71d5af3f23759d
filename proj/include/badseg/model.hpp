#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "badseg/autograd.hpp"
#include "badseg/dataset.hpp"
#include "badseg/image.hpp"
#include "json.hpp"

/// Toy promptable segmenter: ViT-style image encoder, SAM-style prompt
/// encoder and two-way mask decoder, and previous-mask video propagation.
namespace badseg::model {

struct ArchConfig {
  int patch = 8;
  int layers = 2;
  int heads = 2;
  int dim = 32;
  int mlp_ratio = 2;
  /// Reference frame side for the learned positional table; other grids
  /// resample it bilinearly.
  int image_size = 64;
  int decoder_blocks = 2;
  int decoder_heads = 2;
  /// Output channels of the final head convolution (the pruning target).
  int head_channels = 32;
  /// Nearest-neighbour upsampling of the token grid before the head convs.
  int head_upsample = 2;

  bool operator==(const ArchConfig&) const = default;
};

void validate(const ArchConfig& arch);
void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

/// Parameter path of the pruning target; the bias lives at the same stem.
inline constexpr const char* kFinalConvWeight = "decoder.head.final_conv.weight";
inline constexpr const char* kFinalConvBias = "decoder.head.final_conv.bias";
/// Fixed random Fourier matrix; stored with the parameters but never trained.
inline constexpr const char* kFourierMatrix = "prompt.fourier_gaussian";

struct ModelParams {
  ArchConfig arch;
  std::map<std::string, Tensor> tensors;  // sorted by path

  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  std::vector<std::string> paths(const std::string& prefix = "") const;
  std::size_t count(const std::string& prefix = "") const;
  bool operator==(const ModelParams&) const = default;
};

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);
bool is_trainable(const std::string& path);

/// Directory of <path>.bvtf files plus arch.json.
void save_params(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& dir);

/// Flattens the tensors under `prefix` in sorted path order.
std::vector<float> flatten(const std::map<std::string, Tensor>& tensors, const std::string& prefix);

// ---------------------------------------------------------------------------
// Graph-level building blocks (used by training and analysis).

/// Binds parameters into a graph; paths accepted by `trainable` become
/// gradient-carrying leaves, the rest constants.
class Binder {
 public:
  using Filter = std::function<bool(const std::string&)>;

  Binder(ad::Graph& graph, const ModelParams& params, Filter trainable = nullptr);

  ad::Var operator()(const std::string& path);
  /// Pre-binds `path` to an existing graph node (finite-difference checks).
  void bind(const std::string& path, ad::Var v);
  ad::Graph& graph() { return graph_; }
  const ArchConfig& arch() const { return params_.arch; }
  const ModelParams& params() const { return params_; }
  /// Gradients of every bound trainable path after graph.backward().
  std::map<std::string, Tensor> gradients() const;

 private:
  ad::Graph& graph_;
  const ModelParams& params_;
  Filter trainable_;
  std::map<std::string, ad::Var> bound_;
};

/// Filters over the three sub-networks.
Binder::Filter prefix_filter(std::vector<std::string> prefixes);

struct AttentionRecord {
  int grid_h = 0, grid_w = 0;
  std::vector<std::vector<Tensor>> maps;  // [layer][head] -> [T,T]
};

struct EncodedVars {
  ad::Var tokens;  // [T,d]
  ad::Var pooled;  // [1,d]
  int grid_h = 0, grid_w = 0;
};

struct PromptVars {
  ad::Var sparse;  // [n,d]
  ad::Var dense;   // [T,d] or invalid
};

EncodedVars encode_image(Binder& b, const Frame& frame, AttentionRecord* record = nullptr);
PromptVars encode_prompt(Binder& b, const PromptSpec& prompt, int height, int width);
/// Returns [H,W] logits.
ad::Var decode_mask(Binder& b, ad::Var tokens, int grid_h, int grid_w, const PromptVars& prompt, int height,
                    int width);

/// Head activations after the final conv and its nonlinearity: [C, h, w].
/// Exposed for pruning calibration.
ad::Var decode_features(Binder& b, ad::Var tokens, int grid_h, int grid_w, const PromptVars& prompt,
                        ad::Var* mask_token_out = nullptr);

// ---------------------------------------------------------------------------
// Plain inference.

struct ImageEmbedding {
  Tensor tokens;  // [T,d]
  Tensor pooled;  // [1,d]
  int grid_h = 0, grid_w = 0;
};

struct PromptTokens {
  Tensor sparse;  // [n,d]
  Tensor dense;   // [T,d], empty when absent
};

ImageEmbedding encode_image(const ModelParams& params, const Frame& frame, AttentionRecord* record = nullptr);
PromptTokens encode_prompt(const ModelParams& params, const PromptSpec& prompt, int height, int width);
Tensor decode_mask(const ModelParams& params, const ImageEmbedding& img, const PromptTokens& prompt, int height,
                   int width);
/// Mask logits for one frame given a prompt.
Tensor predict(const ModelParams& params, const Frame& frame, const PromptSpec& prompt);

/// Frame 0 uses `prompt`; frame t > 0 is prompted with the thresholded
/// prediction of frame t−1.
std::vector<Tensor> forward_video(const ModelParams& params, const VideoSequence& video, const PromptSpec& prompt);

/// Reflect-pads the frame to a multiple of the patch size.
Frame pad_to_patch(const Frame& frame, int patch);

}  // namespace badseg::model
