#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/outputs.hpp"
#include "emkd/tensor.hpp"

namespace emkd {

enum class ModelRole { kTeacher, kStudent };

const char* to_string(ModelRole role);
ModelRole parse_model_role(const std::string& name);

/// Toy multimodal decoder. The teacher projects every patch of the
/// grid_h x grid_w image; the student pools the encoded grid down to
/// pooled_h x pooled_w before its projector.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch_dim = 16;
  std::size_t pooled_h = 4;
  std::size_t pooled_w = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_seq_len = 96;
  ModelRole role = ModelRole::kTeacher;

  std::size_t vision_tokens() const;
  void validate() const;

  static ModelConfig teacher_default();
  static ModelConfig student_default();
};

/// Named parameter tensors, iterated in lexicographic name order.
class ModelParameters {
 public:
  ModelParameters() = default;
  explicit ModelParameters(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig& config() const { return config_; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void insert(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t numel() const;

  void set_requires_grad(bool on);
  void zero_grad();
  /// Deep copy with independent storage.
  ModelParameters clone() const;

 private:
  ModelConfig config_;
  std::map<std::string, Tensor> tensors_;
};

/// Expected shape of every parameter for a config, in name order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

/// Linear weights ~ N(0, 1) / sqrt(fan_in); embeddings ~ N(0, 1) / sqrt(D);
/// biases 0; layer-norm gains 1. Deterministic in (config, seed).
ModelParameters init_params(const ModelConfig& config, std::uint64_t seed);

/// Vision tokens [N_v x D] for a [grid_h x grid_w x patch_dim] patch grid.
Tensor project_vision(const ModelParameters& params, const Tensor& patch_grid);

/// Teacher-forced pass over [vision | text_ids].
ModelOutputs forward(const ModelParameters& params, const Tensor& patch_grid,
                     std::span<const std::int64_t> text_ids);
ModelOutputs forward(const ModelParameters& params, const SyntheticExample& example);

/// Untied output head, no bias: [N x D] -> [N x V].
Tensor lm_head(const ModelParameters& params, const Tensor& hidden);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> row);

/// Argmax decoding from the prompt until EOS or max_len tokens; the EOS
/// token is included in the result.
std::vector<std::int64_t> greedy_decode(const ModelParameters& params, const Tensor& patch_grid,
                                        std::span<const std::int64_t> prompt_ids,
                                        std::size_t max_len, std::int64_t eos_id);

}  // namespace emkd
