#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emkd/tensor.hpp"

namespace emkd {

/// Symbol-reading task: the image is a grid of cells, each cell a
/// cell_size x cell_size block of patches carrying one symbol's prototype
/// plus gaussian noise. The response lists the cell symbols row-major, then EOS.
struct DatasetConfig {
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t cell_size = 2;
  std::size_t patch_dim = 16;
  std::size_t num_symbols = 32;
  double noise_std = 0.1;
  std::vector<std::int64_t> prompt_ids{2, 3, 4, 5};
  std::int64_t eos_id = 1;
  std::int64_t first_symbol_id = 8;
  std::size_t train_size = 4096;
  std::size_t eval_size = 128;
  std::uint64_t base_seed = 1234;

  std::size_t image_h() const { return grid_h * cell_size; }
  std::size_t image_w() const { return grid_w * cell_size; }
  std::size_t num_cells() const { return grid_h * grid_w; }
  std::size_t response_length() const { return num_cells() + 1; }
  /// Teacher-forced text inputs: the prompt plus every response token but the last.
  std::size_t text_length() const { return prompt_ids.size() + response_length() - 1; }
  /// Smallest vocabulary that holds every token this task emits.
  std::size_t min_vocab() const;
  void validate() const;
};

enum class Split { kTrain, kEval };

const char* to_string(Split split);
Split parse_split(const std::string& name);

struct SyntheticExample {
  Tensor patch_grid;  // [image_h x image_w x patch_dim]
  std::vector<std::int64_t> prompt_ids;
  std::vector<std::int64_t> response_ids;  // cell symbols row-major, then EOS
  /// One label per text input position: the next token, or kIgnoreLabel
  /// where the next token is still part of the prompt.
  std::vector<std::int64_t> labels;

  std::vector<std::int64_t> input_ids() const;
};

/// Holds the symbol prototypes derived from base_seed and produces examples
/// on demand. Every example depends only on (base_seed, split, index).
class SyntheticDataset {
 public:
  explicit SyntheticDataset(DatasetConfig config);

  const DatasetConfig& config() const { return config_; }
  std::size_t size(Split split) const;
  /// [num_symbols x cell_size x cell_size x patch_dim]
  const Tensor& prototypes() const { return prototypes_; }

  SyntheticExample generate(Split split, std::size_t index) const;

 private:
  DatasetConfig config_;
  Tensor prototypes_;
};

/// Convenience wrapper that rebuilds the prototypes on each call.
SyntheticExample generate_example(const DatasetConfig& config, Split split, std::size_t index);

/// Ordered partition of a split into batches; the last batch may be short.
/// With a shuffle seed the index order is a seeded permutation.
class BatchSequence {
 public:
  BatchSequence(const SyntheticDataset& dataset, Split split, std::size_t batch_size,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt);

  std::size_t num_batches() const { return batches_.size(); }
  const std::vector<std::size_t>& indices(std::size_t batch) const { return batches_.at(batch); }
  std::vector<SyntheticExample> batch(std::size_t batch) const;

  auto begin() const { return batches_.begin(); }
  auto end() const { return batches_.end(); }

 private:
  const SyntheticDataset* dataset_;
  Split split_;
  std::vector<std::vector<std::size_t>> batches_;
};

BatchSequence make_batches(const SyntheticDataset& dataset, Split split, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed = std::nullopt);

}  // namespace emkd
