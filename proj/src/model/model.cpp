#include "badseg/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "badseg/bvtf.hpp"
#include "badseg/metrics.hpp"
#include "badseg/random.hpp"

namespace badseg::model {

using ad::Var;

void validate(const ArchConfig& a) {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("model.") + name + " must be >= 1");
  };
  positive(a.patch, "patch");
  positive(a.layers, "layers");
  positive(a.heads, "heads");
  positive(a.dim, "dim");
  positive(a.mlp_ratio, "mlp_ratio");
  positive(a.image_size, "image_size");
  positive(a.decoder_blocks, "decoder_blocks");
  positive(a.decoder_heads, "decoder_heads");
  positive(a.head_channels, "head_channels");
  positive(a.head_upsample, "head_upsample");
  if (a.dim % a.heads != 0 || a.dim % a.decoder_heads != 0) throw std::invalid_argument("model.dim must divide by head counts");
  if (a.dim % 2 != 0) throw std::invalid_argument("model.dim must be even (Fourier features)");
  if (a.image_size % a.patch != 0) throw std::invalid_argument("model.image_size must be a multiple of model.patch");
}

void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = {{"patch", a.patch},
       {"layers", a.layers},
       {"heads", a.heads},
       {"dim", a.dim},
       {"mlp_ratio", a.mlp_ratio},
       {"image_size", a.image_size},
       {"decoder_blocks", a.decoder_blocks},
       {"decoder_heads", a.decoder_heads},
       {"head_channels", a.head_channels},
       {"head_upsample", a.head_upsample}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  for (const auto& [key, value] : j.items()) {
    int* slot = key == "patch"            ? &a.patch
                : key == "layers"         ? &a.layers
                : key == "heads"          ? &a.heads
                : key == "dim"            ? &a.dim
                : key == "mlp_ratio"      ? &a.mlp_ratio
                : key == "image_size"     ? &a.image_size
                : key == "decoder_blocks" ? &a.decoder_blocks
                : key == "decoder_heads"  ? &a.decoder_heads
                : key == "head_channels"  ? &a.head_channels
                : key == "head_upsample"  ? &a.head_upsample
                                          : nullptr;
    if (!slot) throw std::invalid_argument("unknown model key '" + key + "'");
    *slot = value.get<int>();
  }
}

const Tensor& ModelParams::at(const std::string& path) const {
  auto it = tensors.find(path);
  if (it == tensors.end()) throw std::out_of_range("no parameter '" + path + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& path) {
  auto it = tensors.find(path);
  if (it == tensors.end()) throw std::out_of_range("no parameter '" + path + "'");
  return it->second;
}

std::vector<std::string> ModelParams::paths(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : tensors)
    if (k.starts_with(prefix)) out.push_back(k);
  return out;
}

std::size_t ModelParams::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [k, v] : tensors)
    if (k.starts_with(prefix)) n += v.size();
  return n;
}

bool is_trainable(const std::string& path) { return path != kFourierMatrix; }

std::vector<float> flatten(const std::map<std::string, Tensor>& tensors, const std::string& prefix) {
  std::vector<float> out;
  for (const auto& [k, v] : tensors)
    if (k.starts_with(prefix)) out.insert(out.end(), v.values().begin(), v.values().end());
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

enum class Init { Normal, Zero, One, Gaussian };

struct Spec {
  std::string path;
  std::vector<int> shape;
  Init init;
};

std::vector<Spec> param_specs(const ArchConfig& a) {
  const int d = a.dim, p = a.patch, g = a.image_size / a.patch, hid = a.mlp_ratio * d;
  std::vector<Spec> s;
  auto linear = [&](const std::string& stem, int in, int out) {
    s.push_back({stem + ".weight", {in, out}, Init::Normal});
    s.push_back({stem + ".bias", {out}, Init::Zero});
  };
  auto norm = [&](const std::string& stem) {
    s.push_back({stem + ".gamma", {d}, Init::One});
    s.push_back({stem + ".beta", {d}, Init::Zero});
  };
  auto attention = [&](const std::string& stem) {
    for (const char* n : {".q", ".k", ".v", ".o"}) linear(stem + n, d, d);
  };

  linear("encoder.patch_embed", 3 * p * p, d);
  s.push_back({"encoder.pos_embed", {g * g, d}, Init::Normal});
  for (int l = 0; l < a.layers; ++l) {
    const std::string b = "encoder.blocks." + std::to_string(l);
    norm(b + ".ln1");
    attention(b + ".attn");
    norm(b + ".ln2");
    linear(b + ".mlp.fc1", d, hid);
    linear(b + ".mlp.fc2", hid, d);
  }
  norm("encoder.ln_final");

  s.push_back({kFourierMatrix, {2, d / 2}, Init::Gaussian});
  s.push_back({"prompt.point_embed", {1, d}, Init::Normal});
  s.push_back({"prompt.box_tl_embed", {1, d}, Init::Normal});
  s.push_back({"prompt.box_br_embed", {1, d}, Init::Normal});
  s.push_back({"prompt.mask_summary_embed", {1, d}, Init::Normal});
  s.push_back({"prompt.mask_conv.weight", {d, 1, p, p}, Init::Normal});

  s.push_back({"decoder.mask_token", {1, d}, Init::Normal});
  for (int l = 0; l < a.decoder_blocks; ++l) {
    const std::string b = "decoder.blocks." + std::to_string(l);
    attention(b + ".self_attn");
    norm(b + ".ln1");
    attention(b + ".cross_t2i");
    norm(b + ".ln2");
    linear(b + ".mlp.fc1", d, hid);
    linear(b + ".mlp.fc2", hid, d);
    norm(b + ".ln3");
    attention(b + ".cross_i2t");
    norm(b + ".ln4");
  }
  attention("decoder.final_attn");
  norm("decoder.ln_final");
  s.push_back({kFinalConvWeight, {a.head_channels, d, 3, 3}, Init::Normal});
  s.push_back({kFinalConvBias, {a.head_channels}, Init::Zero});
  linear("decoder.hyper.fc1", d, d);
  linear("decoder.hyper.fc2", d, a.head_channels);
  return s;
}

}  // namespace

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  validate(arch);
  ModelParams out;
  out.arch = arch;
  for (const auto& sp : param_specs(arch)) {
    Tensor t(sp.shape);
    Rng rng(mix_seed(seed, fnv1a(sp.path)));
    for (std::size_t i = 0; i < t.size(); ++i) {
      switch (sp.init) {
        case Init::Normal: t[i] = static_cast<float>(rng.truncated_normal(0.02)); break;
        case Init::Gaussian: t[i] = static_cast<float>(rng.normal()); break;
        case Init::One: t[i] = 1.0f; break;
        case Init::Zero: break;
      }
    }
    out.tensors.emplace(sp.path, std::move(t));
  }
  return out;
}

void save_params(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = params.arch;
  std::ofstream(dir / "arch.json") << j.dump(2) << '\n';
  for (const auto& [path, t] : params.tensors) write_bvtf(dir / (path + ".bvtf"), t);
}

ModelParams load_params(const std::filesystem::path& dir) {
  std::ifstream in(dir / "arch.json");
  if (!in) throw std::runtime_error("no arch.json in " + dir.string());
  const ArchConfig arch = nlohmann::json::parse(in).get<ArchConfig>();
  ModelParams p = init_params(arch, 0);
  for (auto& [path, t] : p.tensors) {
    const auto file = dir / (path + ".bvtf");
    if (!std::filesystem::exists(file)) throw std::runtime_error("missing parameter file " + file.string());
    Tensor loaded = read_bvtf(file);
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error("parameter " + path + " has shape " + shape_string(loaded.shape()) + ", expected " +
                               shape_string(t.shape()));
    }
    t = std::move(loaded);
  }
  return p;
}

// ---------------------------------------------------------------------------

Binder::Binder(ad::Graph& graph, const ModelParams& params, Filter trainable)
    : graph_(graph), params_(params), trainable_(std::move(trainable)) {}

Var Binder::operator()(const std::string& path) {
  auto it = bound_.find(path);
  if (it != bound_.end()) return it->second;
  const Tensor& t = params_.at(path);
  const bool train = trainable_ && is_trainable(path) && trainable_(path);
  Var v = train ? graph_.variable_ref(t) : graph_.constant_ref(t);
  bound_.emplace(path, v);
  return v;
}

void Binder::bind(const std::string& path, Var v) { bound_[path] = v; }

std::map<std::string, Tensor> Binder::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [path, v] : bound_)
    if (v.requires_grad()) out.emplace(path, graph_.grad(v));
  return out;
}

Binder::Filter prefix_filter(std::vector<std::string> prefixes) {
  return [prefixes = std::move(prefixes)](const std::string& path) {
    for (const auto& p : prefixes)
      if (path.starts_with(p)) return true;
    return false;
  };
}

Frame pad_to_patch(const Frame& frame, int patch) {
  const int hp = (frame.height + patch - 1) / patch * patch, wp = (frame.width + patch - 1) / patch * patch;
  if (hp == frame.height && wp == frame.width) return frame;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i >= n || i < 0) i = i >= n ? 2 * n - 2 - i : -i;
    return i;
  };
  Frame out(hp, wp);
  for (int i = 0; i < hp; ++i)
    for (int j = 0; j < wp; ++j)
      for (int c = 0; c < 3; ++c) out.at(i, j, c) = frame.at(reflect(i, frame.height), reflect(j, frame.width), c);
  return out;
}

namespace {

int grid_of(int n, int patch) { return (n + patch - 1) / patch; }

// [T, 3P²] rows in raster token order, features ordered (di, dj, c).
Tensor patchify(const Frame& f, int p) {
  const int gh = f.height / p, gw = f.width / p;
  Tensor out({gh * gw, 3 * p * p});
  float* o = out.data();
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj)
      for (int di = 0; di < p; ++di)
        for (int dj = 0; dj < p; ++dj)
          for (int c = 0; c < 3; ++c) *o++ = f.at(gi * p + di, gj * p + dj, c);
  return out;
}

// Random Fourier features of normalized (y, x) in [−1, 1]: [sin, cos] halves.
Tensor fourier(const Tensor& gauss, const std::vector<std::pair<double, double>>& coords) {
  const int half = gauss.dim(1);
  Tensor out({static_cast<int>(coords.size()), 2 * half});
  for (std::size_t r = 0; r < coords.size(); ++r) {
    for (int k = 0; k < half; ++k) {
      const double proj = 2.0 * M_PI * (coords[r].first * gauss.at(0, k) + coords[r].second * gauss.at(1, k));
      out.at(static_cast<int>(r), k) = static_cast<float>(std::sin(proj));
      out.at(static_cast<int>(r), half + k) = static_cast<float>(std::cos(proj));
    }
  }
  return out;
}

double normalized(double pixel, int extent) { return 2.0 * (pixel + 0.5) / extent - 1.0; }

Tensor dense_positional(const Tensor& gauss, int gh, int gw) {
  std::vector<std::pair<double, double>> coords;
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j) coords.emplace_back(normalized(i, gh), normalized(j, gw));
  return fourier(gauss, coords);
}

Var linear(Binder& b, const std::string& stem, Var x) { return ad::linear(x, b(stem + ".weight"), b(stem + ".bias")); }

Var norm(Binder& b, const std::string& stem, Var x) { return ad::layer_norm(x, b(stem + ".gamma"), b(stem + ".beta")); }

Var mlp(Binder& b, const std::string& stem, Var x) {
  return linear(b, stem + ".fc2", ad::gelu(linear(b, stem + ".fc1", x)));
}

// Multi-head attention with separate q/k/v/o projections.
Var attention(Binder& b, const std::string& stem, Var q_in, Var k_in, Var v_in, int heads,
              std::vector<Tensor>* record = nullptr) {
  const Var q = linear(b, stem + ".q", q_in), k = linear(b, stem + ".k", k_in), v = linear(b, stem + ".v", v_in);
  const int d = q.dim(1), dh = d / heads;
  const float s = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    const Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh), kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    const Var a = ad::softmax_rows(ad::scale(ad::matmul(qh, kh, false, true), s));
    if (record) record->push_back(a.value());
    outs.push_back(ad::matmul(a, ad::slice_cols(v, h * dh, (h + 1) * dh)));
  }
  return linear(b, stem + ".o", heads == 1 ? outs[0] : ad::concat_cols(outs));
}

Var positional_table(Binder& b, int gh, int gw) {
  const Var table = b("encoder.pos_embed");
  const int g = b.arch().image_size / b.arch().patch, d = b.arch().dim;
  if (gh == g && gw == g) return table;
  const Var chw = ad::reshape(ad::transpose(table), {d, g, g});
  return ad::transpose(ad::reshape(ad::resize_bilinear(chw, gh, gw), {d, gh * gw}));
}

// [C,h,w] → [h·w, C] token layout and back.
Var grid_to_tokens(Var chw) {
  const int c = chw.dim(0), n = chw.dim(1) * chw.dim(2);
  return ad::transpose(ad::reshape(chw, {c, n}));
}

Var tokens_to_grid(Var tokens, int gh, int gw) { return ad::reshape(ad::transpose(tokens), {tokens.dim(1), gh, gw}); }

}  // namespace

EncodedVars encode_image(Binder& b, const Frame& frame, AttentionRecord* record) {
  const ArchConfig& a = b.arch();
  const Frame padded = pad_to_patch(frame, a.patch);
  const int gh = padded.height / a.patch, gw = padded.width / a.patch;
  ad::Graph& g = b.graph();
  Var x = linear(b, "encoder.patch_embed", g.constant(patchify(padded, a.patch)));
  x = ad::add(x, positional_table(b, gh, gw));
  if (record) {
    record->grid_h = gh;
    record->grid_w = gw;
    record->maps.assign(static_cast<std::size_t>(a.layers), {});
  }
  for (int l = 0; l < a.layers; ++l) {
    const std::string s = "encoder.blocks." + std::to_string(l);
    const Var h = norm(b, s + ".ln1", x);
    x = ad::add(x, attention(b, s + ".attn", h, h, h, a.heads, record ? &record->maps[static_cast<std::size_t>(l)] : nullptr));
    x = ad::add(x, mlp(b, s + ".mlp", norm(b, s + ".ln2", x)));
  }
  x = norm(b, "encoder.ln_final", x);
  return {x, ad::mean_rows(x), gh, gw};
}

PromptVars encode_prompt(Binder& b, const PromptSpec& prompt, int height, int width) {
  validate_prompt(prompt, height, width);
  ad::Graph& g = b.graph();
  const Tensor& gauss = b.params().at(kFourierMatrix);
  if (const auto* p = std::get_if<PointPrompt>(&prompt)) {
    const Tensor pe = fourier(gauss, {{normalized(p->y, height), normalized(p->x, width)}});
    return {ad::add(g.constant(pe), b("prompt.point_embed")), {}};
  }
  if (const auto* bx = std::get_if<BoxPrompt>(&prompt)) {
    const Tensor pe = fourier(gauss, {{normalized(bx->y0, height), normalized(bx->x0, width)},
                                      {normalized(bx->y1, height), normalized(bx->x1, width)}});
    const Var types = ad::concat_rows({b("prompt.box_tl_embed"), b("prompt.box_br_embed")});
    return {ad::add(g.constant(pe), types), {}};
  }
  const Mask& m = std::get<MaskPrompt>(prompt).mask;
  const int p = b.arch().patch;
  const int hp = grid_of(height, p) * p, wp = grid_of(width, p) * p;
  Tensor dense_in({1, hp, wp});
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) dense_in.at(0, i, j) = m.at(i, j) ? 1.0f : 0.0f;
  const Var dense = grid_to_tokens(ad::conv2d(g.constant(std::move(dense_in)), b("prompt.mask_conv.weight"), {}, p, 0));
  return {ad::add(ad::mean_rows(dense), b("prompt.mask_summary_embed")), dense};
}

Var decode_features(Binder& b, Var tokens, int gh, int gw, const PromptVars& prompt, Var* mask_token_out) {
  const ArchConfig& a = b.arch();
  ad::Graph& g = b.graph();
  const Var key_pe = g.constant(dense_positional(b.params().at(kFourierMatrix), gh, gw));
  Var keys = prompt.dense.valid() ? ad::add(tokens, prompt.dense) : tokens;
  const Var query_pe = ad::concat_rows({b("decoder.mask_token"), prompt.sparse});
  Var queries = query_pe;
  const int nh = a.decoder_heads;
  for (int l = 0; l < a.decoder_blocks; ++l) {
    const std::string s = "decoder.blocks." + std::to_string(l);
    Var q = ad::add(queries, query_pe);
    queries = norm(b, s + ".ln1", ad::add(queries, attention(b, s + ".self_attn", q, q, queries, nh)));
    q = ad::add(queries, query_pe);
    Var k = ad::add(keys, key_pe);
    queries = norm(b, s + ".ln2", ad::add(queries, attention(b, s + ".cross_t2i", q, k, keys, nh)));
    queries = norm(b, s + ".ln3", ad::add(queries, mlp(b, s + ".mlp", queries)));
    q = ad::add(queries, query_pe);
    k = ad::add(keys, key_pe);
    keys = norm(b, s + ".ln4", ad::add(keys, attention(b, s + ".cross_i2t", k, q, queries, nh)));
  }
  {
    const Var q = ad::add(queries, query_pe), k = ad::add(keys, key_pe);
    queries = norm(b, "decoder.ln_final", ad::add(queries, attention(b, "decoder.final_attn", q, k, keys, nh)));
  }
  if (mask_token_out) *mask_token_out = ad::slice_rows(queries, 0, 1);
  Var grid = tokens_to_grid(keys, gh, gw);
  if (a.head_upsample > 1) grid = ad::upsample_nearest(grid, a.head_upsample);
  return ad::gelu(ad::conv2d(grid, b(kFinalConvWeight), b(kFinalConvBias), 1, 1));
}

Var decode_mask(Binder& b, Var tokens, int gh, int gw, const PromptVars& prompt, int height, int width) {
  Var mask_token;
  const Var features = decode_features(b, tokens, gh, gw, prompt, &mask_token);
  const int c = features.dim(0), fh = features.dim(1), fw = features.dim(2);
  const Var hyper = mlp(b, "decoder.hyper", mask_token);  // [1,C]
  Var logits = ad::matmul(hyper, ad::reshape(features, {c, fh * fw}));
  const int p = b.arch().patch;
  const int hp = gh * p, wp = gw * p;
  logits = ad::reshape(ad::resize_bilinear(ad::reshape(logits, {1, fh, fw}), hp, wp), {hp, wp});
  if (hp != height) logits = ad::slice_rows(logits, 0, height);
  if (wp != width) logits = ad::slice_cols(logits, 0, width);
  return logits;
}

// ---------------------------------------------------------------------------

ImageEmbedding encode_image(const ModelParams& params, const Frame& frame, AttentionRecord* record) {
  ad::Graph g;
  Binder b(g, params);
  const EncodedVars e = encode_image(b, frame, record);
  return {e.tokens.value(), e.pooled.value(), e.grid_h, e.grid_w};
}

PromptTokens encode_prompt(const ModelParams& params, const PromptSpec& prompt, int height, int width) {
  ad::Graph g;
  Binder b(g, params);
  const PromptVars p = encode_prompt(b, prompt, height, width);
  return {p.sparse.value(), p.dense.valid() ? p.dense.value() : Tensor{}};
}

Tensor decode_mask(const ModelParams& params, const ImageEmbedding& img, const PromptTokens& prompt, int height,
                   int width) {
  if (img.tokens.dim(1) != prompt.sparse.dim(1)) throw std::invalid_argument("embedding and prompt dims differ");
  ad::Graph g;
  Binder b(g, params);
  PromptVars pv{g.constant_ref(prompt.sparse), prompt.dense.size() ? g.constant_ref(prompt.dense) : Var{}};
  return decode_mask(b, g.constant_ref(img.tokens), img.grid_h, img.grid_w, pv, height, width).value();
}

Tensor predict(const ModelParams& params, const Frame& frame, const PromptSpec& prompt) {
  ad::Graph g;
  Binder b(g, params);
  const EncodedVars e = encode_image(b, frame);
  const PromptVars p = encode_prompt(b, prompt, frame.height, frame.width);
  return decode_mask(b, e.tokens, e.grid_h, e.grid_w, p, frame.height, frame.width).value();
}

std::vector<Tensor> forward_video(const ModelParams& params, const VideoSequence& video, const PromptSpec& prompt) {
  std::vector<Tensor> out;
  out.reserve(video.frames.size());
  PromptSpec current = prompt;
  for (const Frame& f : video.frames) {
    out.push_back(predict(params, f, current));
    current = MaskPrompt{metrics::binarize(out.back())};
  }
  return out;
}

}  // namespace badseg::model
