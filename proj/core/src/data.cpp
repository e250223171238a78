#include "emkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "emkd/losses.hpp"

namespace emkd {

namespace {

constexpr std::uint32_t kPrototypeStream = 0x70726f74;  // "prot"
constexpr std::uint32_t kShuffleStream = 0x73687566;    // "shuf"
constexpr int kMaxPrototypeAttempts = 1000;

std::mt19937_64 keyed_engine(std::uint64_t base_seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                    stream, static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

std::uint32_t split_stream(Split split) { return split == Split::kTrain ? 1u : 2u; }

double squared_distance(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

std::size_t DatasetConfig::min_vocab() const {
  std::int64_t top = std::max(eos_id, first_symbol_id + static_cast<std::int64_t>(num_symbols) - 1);
  for (auto id : prompt_ids) top = std::max(top, id);
  return static_cast<std::size_t>(top + 1);
}

void DatasetConfig::validate() const {
  if (grid_h == 0 || grid_w == 0 || cell_size == 0 || patch_dim == 0) {
    throw std::invalid_argument("dataset: grid, cell_size and patch_dim must be positive");
  }
  if (num_symbols < 2) throw std::invalid_argument("dataset: need at least two symbols");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("dataset: noise_std must be >= 0");
  if (prompt_ids.empty()) throw std::invalid_argument("dataset: prompt must not be empty");
  if (eos_id < 0 || first_symbol_id < 0) throw std::invalid_argument("dataset: token ids must be >= 0");
  auto is_symbol = [this](std::int64_t id) {
    return id >= first_symbol_id && id < first_symbol_id + static_cast<std::int64_t>(num_symbols);
  };
  if (is_symbol(eos_id)) throw std::invalid_argument("dataset: eos id overlaps the symbol range");
  for (auto id : prompt_ids) {
    if (id < 0 || id == eos_id || is_symbol(id)) {
      throw std::invalid_argument("dataset: prompt id " + std::to_string(id) + " collides with a reserved id");
    }
  }
}

const char* to_string(Split split) { return split == Split::kTrain ? "train" : "eval"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "eval") return Split::kEval;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<std::int64_t> SyntheticExample::input_ids() const {
  std::vector<std::int64_t> ids(prompt_ids);
  if (!response_ids.empty()) ids.insert(ids.end(), response_ids.begin(), response_ids.end() - 1);
  return ids;
}

SyntheticDataset::SyntheticDataset(DatasetConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t block = config_.cell_size * config_.cell_size * config_.patch_dim;
  const std::size_t s = config_.num_symbols;
  auto rng = keyed_engine(config_.base_seed, kPrototypeStream, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Rejection sampling keeps prototypes far apart relative to the noise.
  const double min_dist = std::max(4.0 * config_.noise_std, 1e-6);
  std::vector<double> protos(s * block);
  for (std::size_t k = 0; k < s; ++k) {
    double* p = protos.data() + k * block;
    int attempts = 0;
    while (true) {
      for (std::size_t i = 0; i < block; ++i) p[i] = normal(rng);
      bool separated = true;
      for (std::size_t j = 0; j < k && separated; ++j) {
        separated = std::sqrt(squared_distance(p, protos.data() + j * block, block)) > min_dist;
      }
      if (separated) break;
      if (++attempts == kMaxPrototypeAttempts) {
        throw std::invalid_argument("dataset: cannot separate prototypes at noise_std " +
                                    std::to_string(config_.noise_std));
      }
    }
  }
  prototypes_ = Tensor::from({s, config_.cell_size, config_.cell_size, config_.patch_dim}, std::move(protos));
}

std::size_t SyntheticDataset::size(Split split) const {
  return split == Split::kTrain ? config_.train_size : config_.eval_size;
}

SyntheticExample SyntheticDataset::generate(Split split, std::size_t index) const {
  if (index >= size(split)) {
    throw std::out_of_range("example " + std::to_string(index) + " outside " + to_string(split) +
                            " split of " + std::to_string(size(split)));
  }
  const auto& c = config_;
  auto rng = keyed_engine(c.base_seed, split_stream(split), index);
  std::uniform_int_distribution<std::size_t> pick_symbol(0, c.num_symbols - 1);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::size_t> symbols(c.num_cells());
  for (auto& sym : symbols) sym = pick_symbol(rng);

  const std::size_t ih = c.image_h(), iw = c.image_w(), p = c.patch_dim, cs = c.cell_size;
  const std::size_t block = cs * cs * p;
  std::vector<double> grid(ih * iw * p);
  const auto protos = prototypes_.values();
  for (std::size_t r = 0; r < ih; ++r) {
    for (std::size_t col = 0; col < iw; ++col) {
      const std::size_t cell = (r / cs) * c.grid_w + col / cs;
      const double* proto = protos.data() + symbols[cell] * block + ((r % cs) * cs + col % cs) * p;
      double* dst = grid.data() + (r * iw + col) * p;
      for (std::size_t k = 0; k < p; ++k) {
        const double noise = normal(rng);
        dst[k] = proto[k] + c.noise_std * noise;
      }
    }
  }

  SyntheticExample ex;
  ex.patch_grid = Tensor::from({ih, iw, p}, std::move(grid));
  ex.prompt_ids = c.prompt_ids;
  for (auto sym : symbols) ex.response_ids.push_back(c.first_symbol_id + static_cast<std::int64_t>(sym));
  ex.response_ids.push_back(c.eos_id);
  const std::size_t prompt_len = c.prompt_ids.size();
  ex.labels.assign(c.text_length(), kIgnoreLabel);
  for (std::size_t t = prompt_len - 1; t < ex.labels.size(); ++t) {
    ex.labels[t] = ex.response_ids[t - (prompt_len - 1)];
  }
  return ex;
}

SyntheticExample generate_example(const DatasetConfig& config, Split split, std::size_t index) {
  return SyntheticDataset(config).generate(split, index);
}

BatchSequence::BatchSequence(const SyntheticDataset& dataset, Split split, std::size_t batch_size,
                             std::optional<std::uint64_t> shuffle_seed)
    : dataset_(&dataset), split_(split) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(dataset.size(split));
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    auto rng = keyed_engine(*shuffle_seed, kShuffleStream, split_stream(split));
    // Fisher-Yates with an explicit draw so the permutation does not depend
    // on the standard library's shuffle implementation.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng() % i]);
    }
  }
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    batches_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
}

std::vector<SyntheticExample> BatchSequence::batch(std::size_t b) const {
  std::vector<SyntheticExample> out;
  for (auto idx : batches_.at(b)) out.push_back(dataset_->generate(split_, idx));
  return out;
}

BatchSequence make_batches(const SyntheticDataset& dataset, Split split, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed) {
  return BatchSequence(dataset, split, batch_size, shuffle_seed);
}

}  // namespace emkd
