#pragma once

#include <cstdint>
#include <span>

#include "emkd/assignment.hpp"
#include "emkd/outputs.hpp"
#include "emkd/tensor.hpp"

namespace emkd {

/// Label value excluded from supervised and response-distillation losses.
inline constexpr std::int64_t kIgnoreLabel = -100;

struct LossWeights {
  double alpha = 0.5;   // supervised vs. response distillation
  double beta = 0.25;   // vision semantic distillation
  double gamma = 25.0;  // vision-language affinity distillation
  double temperature = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double sup = 0.0;
  double rld = 0.0;
  double vsd = 0.0;
  double vlad = 0.0;
  double total = 0.0;
};

enum class VsdObject { kLogits, kHidden };

const char* to_string(VsdObject object);
VsdObject parse_vsd_object(const std::string& name);

inline constexpr double kSmoothL1Delta = 1.0;

/// Mean over rows of KL(p || q), p = softmax(student / T), q = softmax(teacher / T),
/// summed over the full vocabulary in log space. No gradient reaches the
/// teacher.
Tensor reverse_kl(const Tensor& student_logits, const Tensor& teacher_logits, double temperature = 1.0);

/// Distills matched vision tokens. kLogits: reverse KL of matched vision
/// logits. kHidden: smooth-L1 of matched hidden states (needs equal widths).
Tensor vsd_loss(const ModelOutputs& teacher, const ModelOutputs& student, const MatchResult& match,
                VsdObject object, const LossWeights& weights);

/// Smooth-L1 between the student and teacher vision-to-language cosine
/// affinity matrices, each [matched tokens x N_text].
Tensor vlad_loss(const ModelOutputs& teacher, const ModelOutputs& student, const MatchResult& match,
                 double delta = kSmoothL1Delta);

/// Mean negative log-likelihood over positions whose label is not kIgnoreLabel.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);

/// reverse_kl restricted to rows whose label is not kIgnoreLabel.
Tensor response_rld(const Tensor& student_logits, const Tensor& teacher_logits,
                    std::span<const std::int64_t> labels, double temperature = 1.0);

/// total = alpha sup + (1 - alpha) rld + beta vsd + gamma vlad.
LossBreakdown combine(const LossWeights& weights, double sup, double rld, double vsd, double vlad);

/// Same weighting over tensors, evaluated in the same order as combine() so
/// the scalar result is bitwise equal to LossBreakdown::total.
Tensor combine_loss(const LossWeights& weights, const Tensor& sup, const Tensor& rld,
                    const Tensor& vsd, const Tensor& vlad);

}  // namespace emkd
