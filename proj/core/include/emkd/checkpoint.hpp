#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "emkd/data.hpp"
#include "emkd/model.hpp"

namespace emkd {

// Container layout, all integers little-endian:
//   "EMKD" | version u32 | entry count u32 | entries...
//   entry: name length u32 | UTF-8 name | dtype u8 (0 f64, 1 i64) | rank u8 |
//          dims u32 x rank | 8 * prod(dims) payload bytes

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { kF64 = 0, kI64 = 1 };

struct NamedArray {
  std::string name;
  DType dtype = DType::kF64;
  std::vector<std::uint32_t> dims;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;

  std::size_t numel() const;
  static NamedArray from_tensor(std::string name, const Tensor& t);
  static NamedArray from_ints(std::string name, std::vector<std::int64_t> values);
  Tensor to_tensor() const;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& entries);
/// Validates magic, version, dtypes, name uniqueness and payload length.
std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const std::vector<NamedArray>& entries);
std::vector<NamedArray> load_checkpoint(const std::string& path);

/// Model checkpoints hold "config.*" integers, "param.*" tensors and any
/// extra "meta.*" integers.
std::vector<NamedArray> model_to_arrays(const ModelParameters& params,
                                        const std::map<std::string, std::int64_t>& meta = {});
ModelParameters model_from_arrays(const std::vector<NamedArray>& entries);
std::map<std::string, std::int64_t> model_meta(const std::vector<NamedArray>& entries);

void save_model(const std::string& path, const ModelParameters& params,
                const std::map<std::string, std::int64_t>& meta = {});
ModelParameters load_model(const std::string& path);

/// Dataset split file: per example "example.<i>.patch_grid" (f64) and
/// ".prompt_ids", ".response_ids", ".labels" (i64).
std::vector<NamedArray> dataset_to_arrays(const SyntheticDataset& dataset, Split split,
                                          std::size_t count);
std::vector<SyntheticExample> examples_from_arrays(const std::vector<NamedArray>& entries);

}  // namespace emkd
