#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emkd/assignment.hpp"
#include "emkd/data.hpp"
#include "emkd/losses.hpp"
#include "emkd/model.hpp"

namespace emkd {

/// Supervised training schedule (used for the teacher).
struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::size_t eval_interval = 200;
  std::size_t eval_examples = 64;

  void validate() const;
};

struct DistillConfig {
  LossWeights weights;
  MatchStrategy matcher = MatchStrategy::kHungarianLogits;
  VsdObject vsd_object = VsdObject::kLogits;
  double smooth_l1_delta = kSmoothL1Delta;
  double learning_rate = 3e-3;
  std::size_t steps = 400;
  std::size_t batch_size = 8;
  /// Seeds the student initialization and the batch order.
  std::uint64_t seed = 1;
  std::size_t eval_interval = 100;
  std::size_t eval_examples = 64;

  void validate() const;
};

struct MetricsRecord {
  std::size_t step = 0;
  double sup = 0.0;
  double rld = 0.0;
  double vsd = 0.0;
  double vlad = 0.0;
  double total = 0.0;
  double eval_ce = 0.0;
  /// Top-1 agreement at response positions, with the teacher when one is
  /// given, otherwise with the ground-truth labels.
  double agreement = 0.0;
  double exact_match = 0.0;
  double ms = 0.0;
};

/// One JSON object, fields in the fixed order step, sup, rld, vsd, vlad,
/// total, eval_ce, agreement, exact_match, ms. No trailing newline.
std::string to_json_line(const MetricsRecord& record);
MetricsRecord metrics_from_json_line(const std::string& line);

/// Adam moments keyed by parameter name.
struct TrainState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Bias-corrected Adam step over every parameter, in name order, using the
/// gradients currently stored on the parameters. Throws NumericError on a
/// non-finite gradient before touching any value.
void adam_update(TrainState& state, ModelParameters& params, double learning_rate);

/// Mean per-sample cross-entropy over a batch, recorded on the active tape.
Tensor supervised_loss(const ModelParameters& params, std::span<const SyntheticExample> batch);

/// One distillation step: teacher forwards without a tape, student forwards
/// on a fresh tape, per-sample matching without gradient, the four losses
/// combined, and backward into the student's gradients. The student's
/// previous gradients are cleared first. Components whose weight is zero are
/// still evaluated for reporting but do not enter the tape.
LossBreakdown distill_step(const ModelParameters& teacher, ModelParameters& student,
                           std::span<const SyntheticExample> batch, const DistillConfig& config);

struct TrainResult {
  ModelParameters params;
  std::vector<MetricsRecord> metrics;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Cross-entropy training from init_params(config, train.seed).
TrainResult train_teacher(const ModelConfig& config, const SyntheticDataset& dataset,
                          const TrainConfig& train, const MetricsSink& sink = {});

/// distill_step + adam_update for config.steps steps. Records metrics at
/// step 0 and every eval_interval steps; the loss fields of a record are
/// evaluated on the batch scheduled for that step.
TrainResult train_distill(const ModelParameters& teacher, const ModelParameters& student_init,
                          const SyntheticDataset& dataset, const DistillConfig& config,
                          const MetricsSink& sink = {});

/// Batch scheduled at `step`: epochs of seeded permutations of the train split.
std::vector<SyntheticExample> scheduled_batch(const SyntheticDataset& dataset, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t step);

/// Eval CE, agreement and greedy exact-match over the first `max_examples`
/// examples of `split` (all of them when 0). Loss fields are left zero.
MetricsRecord evaluate(const ModelParameters& params, const SyntheticDataset& dataset, Split split,
                       const ModelParameters* teacher = nullptr, std::size_t max_examples = 0);

struct TokenLogit {
  std::int64_t token;
  double logit;
};

/// Top-k vocabulary entries of every vision token's logits, descending, ties
/// to the lower id.
std::vector<std::vector<TokenLogit>> decode_vision_tokens(const ModelParameters& params,
                                                          const SyntheticExample& example,
                                                          std::size_t k);

/// Ground-truth symbol of every vision token of `config` for an example:
/// the symbol of the cell covering the token's patch (or pooled window centre).
std::vector<std::int64_t> vision_token_symbols(const ModelConfig& config, const DatasetConfig& data,
                                               const SyntheticExample& example);

/// Fraction of vision tokens whose ground-truth symbol is in their top-k.
double vision_symbol_hit_rate(const ModelParameters& params, const SyntheticDataset& dataset,
                              Split split, std::size_t num_examples, std::size_t k);

}  // namespace emkd
