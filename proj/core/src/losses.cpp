#include "emkd/losses.hpp"

#include <stdexcept>
#include <string>

namespace emkd {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

const char* to_string(VsdObject object) {
  return object == VsdObject::kLogits ? "logits" : "hidden";
}

VsdObject parse_vsd_object(const std::string& name) {
  if (name == "logits") return VsdObject::kLogits;
  if (name == "hidden") return VsdObject::kHidden;
  throw std::invalid_argument("unknown vsd object '" + name + "'");
}

Tensor reverse_kl(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("reverse_kl: logits disagree, student " + shape_to_string(student_logits.shape()) +
                     " vs teacher " + shape_to_string(teacher_logits.shape()));
  }
  if (student_logits.dim(0) == 0) throw ShapeError("reverse_kl: no rows");
  const double inv_t = 1.0 / temperature;
  Tensor log_q;
  {
    NoGradGuard no_grad;
    log_q = log_softmax(scale(teacher_logits.detach(), inv_t));
  }
  Tensor log_p = log_softmax(scale(student_logits, inv_t));
  Tensor per_row = sum(mul(exp(log_p), sub(log_p, log_q)), 1);
  return mean(per_row);
}

namespace {

struct MatchedRows {
  Tensor teacher;  // detached
  Tensor student;
};

// Aligns teacher and student rows of the chosen per-token field.
MatchedRows matched_rows(const ModelOutputs& teacher, const ModelOutputs& student,
                         const MatchResult& match, bool logits) {
  const Tensor& t = logits ? teacher.vision_logits : teacher.vision_hidden;
  const Tensor& s = logits ? student.vision_logits : student.vision_hidden;
  if (const auto* a = std::get_if<Assignment>(&match)) {
    Tensor rows_t;
    {
      NoGradGuard no_grad;
      rows_t = gather_rows(t.detach(), a->teacher_indices());
    }
    return {rows_t, gather_rows(s, a->student_indices())};
  }
  const auto& pooled = std::get<PooledTokens>(match);
  const Tensor& rows_t = logits ? pooled.vision_logits : pooled.vision_hidden;
  if (rows_t.shape() != s.shape()) {
    throw ShapeError("pooled teacher tokens " + shape_to_string(rows_t.shape()) +
                     " do not line up with student tokens " + shape_to_string(s.shape()));
  }
  return {rows_t.detach(), s};
}

}  // namespace

Tensor vsd_loss(const ModelOutputs& teacher, const ModelOutputs& student, const MatchResult& match,
                VsdObject object, const LossWeights& weights) {
  if (object == VsdObject::kLogits) {
    auto rows = matched_rows(teacher, student, match, true);
    return reverse_kl(rows.student, rows.teacher, weights.temperature);
  }
  if (teacher.vision_hidden.dim(1) != student.vision_hidden.dim(1)) {
    throw std::invalid_argument("hidden-state VSD needs equal hidden dims, teacher " +
                                std::to_string(teacher.vision_hidden.dim(1)) + " vs student " +
                                std::to_string(student.vision_hidden.dim(1)));
  }
  auto rows = matched_rows(teacher, student, match, false);
  return smooth_l1(rows.student, rows.teacher, kSmoothL1Delta);
}

Tensor vlad_loss(const ModelOutputs& teacher, const ModelOutputs& student, const MatchResult& match,
                 double delta) {
  const auto nt = teacher.language_hidden.dim(0), ns = student.language_hidden.dim(0);
  if (nt != ns) {
    throw std::invalid_argument("vlad_loss: text lengths differ, teacher " + std::to_string(nt) +
                                " vs student " + std::to_string(ns));
  }
  auto rows = matched_rows(teacher, student, match, false);
  Tensor affinity_t;
  {
    NoGradGuard no_grad;
    affinity_t = cosine_rows(rows.teacher, teacher.language_hidden.detach());
  }
  Tensor affinity_s = cosine_rows(rows.student, student.language_hidden);
  return smooth_l1(affinity_s, affinity_t, delta);
}

namespace {

std::vector<std::size_t> active_positions(std::span<const std::int64_t> labels, std::size_t vocab,
                                          const char* op) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= vocab) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(labels[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument(std::string(op) + ": every position is ignored");
  return rows;
}

void check_label_count(const Tensor& logits, std::span<const std::int64_t> labels, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(logits.shape()));
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
  check_label_count(logits, labels, "cross_entropy");
  auto rows = active_positions(labels, logits.dim(1), "cross_entropy");
  std::vector<std::size_t> targets;
  targets.reserve(rows.size());
  for (auto r : rows) targets.push_back(static_cast<std::size_t>(labels[r]));
  Tensor log_probs = log_softmax(gather_rows(logits, rows));
  return scale(mean(pick(log_probs, targets)), -1.0);
}

Tensor response_rld(const Tensor& student_logits, const Tensor& teacher_logits,
                    std::span<const std::int64_t> labels, double temperature) {
  check_label_count(student_logits, labels, "response_rld");
  auto rows = active_positions(labels, student_logits.dim(1), "response_rld");
  Tensor teacher_rows;
  {
    NoGradGuard no_grad;
    teacher_rows = gather_rows(teacher_logits.detach(), rows);
  }
  return reverse_kl(gather_rows(student_logits, rows), teacher_rows, temperature);
}

LossBreakdown combine(const LossWeights& weights, double sup, double rld, double vsd, double vlad) {
  LossBreakdown b{sup, rld, vsd, vlad, 0.0};
  const double a = weights.alpha * sup;
  const double r = (1.0 - weights.alpha) * rld;
  const double v = weights.beta * vsd;
  const double l = weights.gamma * vlad;
  b.total = ((a + r) + v) + l;
  return b;
}

Tensor combine_loss(const LossWeights& weights, const Tensor& sup, const Tensor& rld,
                    const Tensor& vsd, const Tensor& vlad) {
  Tensor total = add(scale(sup, weights.alpha), scale(rld, 1.0 - weights.alpha));
  total = add(total, scale(vsd, weights.beta));
  return add(total, scale(vlad, weights.gamma));
}

}  // namespace emkd
