#include "emkd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace emkd {

const char* to_string(ModelRole role) { return role == ModelRole::kTeacher ? "teacher" : "student"; }

ModelRole parse_model_role(const std::string& name) {
  if (name == "teacher") return ModelRole::kTeacher;
  if (name == "student") return ModelRole::kStudent;
  throw std::invalid_argument("unknown model role '" + name + "'");
}

std::size_t ModelConfig::vision_tokens() const {
  return role == ModelRole::kTeacher ? grid_h * grid_w : pooled_h * pooled_w;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (hidden_dim < 2) fail("hidden_dim must be >= 2");
  if (num_layers == 0) fail("num_layers must be >= 1");
  if (num_heads == 0 || hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (grid_h == 0 || grid_w == 0 || patch_dim == 0) fail("patch grid must be non-empty");
  if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
  if (role == ModelRole::kStudent &&
      (pooled_h == 0 || pooled_w == 0 || pooled_h > grid_h || pooled_w > grid_w)) {
    fail("pooled grid must fit inside the patch grid");
  }
  if (max_seq_len <= vision_tokens()) fail("max_seq_len leaves no room for text");
}

ModelConfig ModelConfig::teacher_default() { return ModelConfig{}; }

ModelConfig ModelConfig::student_default() {
  ModelConfig c;
  c.role = ModelRole::kStudent;
  return c;
}

const Tensor& ModelParameters::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

Tensor& ModelParameters::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

void ModelParameters::insert(const std::string& name, Tensor tensor) {
  tensors_.insert_or_assign(name, std::move(tensor));
}

std::size_t ModelParameters::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

void ModelParameters::set_requires_grad(bool on) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(on);
}

void ModelParameters::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

ModelParameters ModelParameters::clone() const {
  ModelParameters out(config_);
  for (const auto& [name, t] : tensors_) out.insert(name, t.clone());
  return out;
}

namespace {

enum class InitKind { kLinear, kEmbedding, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind kind;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, f = c.mlp_ratio * c.hidden_dim;
  std::vector<ParamSpec> specs{
      {"embed.position", {c.max_seq_len, d}, InitKind::kEmbedding},
      {"embed.token", {c.vocab_size, d}, InitKind::kEmbedding},
      {"final_norm.bias", {d}, InitKind::kZero},
      {"final_norm.gain", {d}, InitKind::kOne},
      {"lm_head.weight", {d, c.vocab_size}, InitKind::kLinear},
      {"vision.encoder.bias", {d}, InitKind::kZero},
      {"vision.encoder.weight", {c.patch_dim, d}, InitKind::kLinear},
      {"vision.projector.fc1.bias", {d}, InitKind::kZero},
      {"vision.projector.fc1.weight", {d, d}, InitKind::kLinear},
      {"vision.projector.fc2.bias", {d}, InitKind::kZero},
      {"vision.projector.fc2.weight", {d, d}, InitKind::kLinear},
  };
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* w : {"attn.wk", "attn.wo", "attn.wq", "attn.wv"})
      specs.push_back({p + w, {d, d}, InitKind::kLinear});
    specs.push_back({p + "mlp.fc1.bias", {f}, InitKind::kZero});
    specs.push_back({p + "mlp.fc1.weight", {d, f}, InitKind::kLinear});
    specs.push_back({p + "mlp.fc2.bias", {d}, InitKind::kZero});
    specs.push_back({p + "mlp.fc2.weight", {f, d}, InitKind::kLinear});
    specs.push_back({p + "norm1.bias", {d}, InitKind::kZero});
    specs.push_back({p + "norm1.gain", {d}, InitKind::kOne});
    specs.push_back({p + "norm2.bias", {d}, InitKind::kZero});
    specs.push_back({p + "norm2.gain", {d}, InitKind::kOne});
  }
  std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return specs;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : param_specs(config)) out.emplace_back(std::move(s.name), std::move(s.shape));
  return out;
}

ModelParameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParameters params(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& spec : param_specs(config)) {
    std::vector<double> values(shape_numel(spec.shape));
    switch (spec.kind) {
      case InitKind::kZero: break;
      case InitKind::kOne: std::fill(values.begin(), values.end(), 1.0); break;
      case InitKind::kLinear:
      case InitKind::kEmbedding: {
        const double fan = static_cast<double>(spec.kind == InitKind::kLinear ? spec.shape[0] : spec.shape[1]);
        const double s = 1.0 / std::sqrt(fan);
        for (auto& v : values) v = normal(rng) * s;
        break;
      }
    }
    params.insert(spec.name, Tensor::parameter(spec.shape, std::move(values)));
  }
  return params;
}

Tensor project_vision(const ModelParameters& params, const Tensor& patch_grid) {
  const auto& c = params.config();
  if (patch_grid.shape() != Shape{c.grid_h, c.grid_w, c.patch_dim}) {
    throw ShapeError("patch grid " + shape_to_string(patch_grid.shape()) + " does not match config " +
                     shape_to_string({c.grid_h, c.grid_w, c.patch_dim}));
  }
  const std::size_t d = c.hidden_dim;
  Tensor patches = reshape(patch_grid, {c.grid_h * c.grid_w, c.patch_dim});
  Tensor features = gelu(linear(patches, params.at("vision.encoder.weight"), params.at("vision.encoder.bias")));
  if (c.role == ModelRole::kStudent) {
    Tensor grid = reshape(features, {c.grid_h, c.grid_w, d});
    features = reshape(adaptive_avg_pool2d(grid, c.pooled_h, c.pooled_w), {c.pooled_h * c.pooled_w, d});
  }
  Tensor hidden = gelu(linear(features, params.at("vision.projector.fc1.weight"),
                              params.at("vision.projector.fc1.bias")));
  return linear(hidden, params.at("vision.projector.fc2.weight"), params.at("vision.projector.fc2.bias"));
}

Tensor lm_head(const ModelParameters& params, const Tensor& hidden) {
  return matmul(hidden, params.at("lm_head.weight"));
}

ModelOutputs forward(const ModelParameters& params, const Tensor& patch_grid,
                     std::span<const std::int64_t> text_ids) {
  const auto& c = params.config();
  const std::size_t nv = c.vision_tokens();
  const std::size_t seq = nv + text_ids.size();
  if (seq > c.max_seq_len) {
    throw std::invalid_argument("sequence of " + std::to_string(seq) + " tokens exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  }
  std::vector<Tensor> parts{project_vision(params, patch_grid)};
  if (!text_ids.empty()) parts.push_back(embedding_lookup(params.at("embed.token"), text_ids));
  Tensor x = add(concat_rows(parts), slice_rows(params.at("embed.position"), 0, seq));

  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Tensor h = layer_norm(x, params.at(p + "norm1.gain"), params.at(p + "norm1.bias"));
    Tensor attn = causal_attention(matmul(h, params.at(p + "attn.wq")), matmul(h, params.at(p + "attn.wk")),
                                   matmul(h, params.at(p + "attn.wv")), c.num_heads);
    x = add(x, matmul(attn, params.at(p + "attn.wo")));
    h = layer_norm(x, params.at(p + "norm2.gain"), params.at(p + "norm2.bias"));
    h = gelu(linear(h, params.at(p + "mlp.fc1.weight"), params.at(p + "mlp.fc1.bias")));
    x = add(x, linear(h, params.at(p + "mlp.fc2.weight"), params.at(p + "mlp.fc2.bias")));
  }
  x = layer_norm(x, params.at("final_norm.gain"), params.at("final_norm.bias"));

  ModelOutputs out;
  out.full_hidden = x;
  out.vision_hidden = slice_rows(x, 0, nv);
  out.language_hidden = slice_rows(x, nv, seq);
  out.vision_logits = lm_head(params, out.vision_hidden);
  out.response_logits = lm_head(params, out.language_hidden);
  return out;
}

ModelOutputs forward(const ModelParameters& params, const SyntheticExample& example) {
  return forward(params, example.patch_grid, example.input_ids());
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<std::int64_t> greedy_decode(const ModelParameters& params, const Tensor& patch_grid,
                                        std::span<const std::int64_t> prompt_ids,
                                        std::size_t max_len, std::int64_t eos_id) {
  if (prompt_ids.empty()) throw std::invalid_argument("greedy_decode: prompt must not be empty");
  NoGradGuard no_grad;
  std::vector<std::int64_t> text(prompt_ids.begin(), prompt_ids.end());
  std::vector<std::int64_t> generated;
  const std::size_t v = params.config().vocab_size;
  while (generated.size() < max_len) {
    if (params.config().vision_tokens() + text.size() > params.config().max_seq_len) break;
    ModelOutputs out = forward(params, patch_grid, text);
    const auto logits = out.response_logits.values().subspan((text.size() - 1) * v, v);
    const auto next = static_cast<std::int64_t>(argmax(logits));
    generated.push_back(next);
    if (next == eos_id) break;
    text.push_back(next);
  }
  return generated;
}

}  // namespace emkd
