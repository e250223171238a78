#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "emkd/outputs.hpp"
#include "emkd/tensor.hpp"

namespace emkd {

/// Pairwise matching costs, rows indexed by teacher token and columns by
/// student token.
class CostMatrix {
 public:
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> costs);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return costs_[r * cols_ + c]; }
  const std::vector<double>& costs() const { return costs_; }
  CostMatrix transposed() const;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> costs_;
};

struct MatchPair {
  std::size_t teacher;
  std::size_t student;
  friend bool operator==(const MatchPair&, const MatchPair&) = default;
  friend auto operator<=>(const MatchPair&, const MatchPair&) = default;
};

/// Injective matching of the smaller token set into the larger one.
///
/// Pairs are ordered by the index on the smaller side; total_cost is the sum
/// of the selected entries accumulated in that order.
struct Assignment {
  std::vector<MatchPair> pairs;
  double total_cost = 0.0;

  std::vector<std::size_t> teacher_indices() const;
  std::vector<std::size_t> student_indices() const;
};

/// entry (i, j) = sum_v |teacher[i, v] - student[j, v]|. Reads raw values and
/// never touches the tape.
CostMatrix manhattan_cost(const Tensor& teacher_logits, const Tensor& student_logits);

/// Minimum-cost rectangular assignment by shortest augmenting paths with
/// dual potentials, O(n^2 m) for n = min side, m = max side. Ties resolve to
/// the lowest column index.
Assignment solve_lap(const CostMatrix& cost);

inline constexpr std::size_t kBruteForceLimit = 8;

/// Exhaustive minimum over all injections; among exact ties keeps the
/// lexicographically smallest pair list. min(rows, cols) <= kBruteForceLimit.
Assignment brute_force_lap(const CostMatrix& cost);

/// 1D adaptive average pooling of [N_t x D] teacher tokens down to
/// [target_len x D]; pooled token i pairs with student token i.
Tensor pool_match(const Tensor& teacher_tokens, std::size_t target_len);

enum class MatchStrategy { kHungarianLogits, kHungarianHidden, kPooling };

const char* to_string(MatchStrategy strategy);
MatchStrategy parse_match_strategy(const std::string& name);

/// Teacher vision tokens pooled to the student's length.
struct PooledTokens {
  Tensor vision_hidden;
  Tensor vision_logits;
};

using MatchResult = std::variant<Assignment, PooledTokens>;

/// Pairs teacher and student vision tokens. Always runs without recording.
MatchResult match_vision_tokens(const ModelOutputs& teacher, const ModelOutputs& student,
                                MatchStrategy strategy);

}  // namespace emkd
