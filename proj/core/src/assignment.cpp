#include "emkd/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace emkd {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> costs)
    : rows_(rows), cols_(cols), costs_(std::move(costs)) {
  if (costs_.size() != rows_ * cols_) {
    throw ShapeError("cost matrix " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                     " given " + std::to_string(costs_.size()) + " entries");
  }
}

CostMatrix CostMatrix::transposed() const {
  std::vector<double> t(costs_.size());
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t[c * rows_ + r] = costs_[r * cols_ + c];
  return CostMatrix(cols_, rows_, std::move(t));
}

std::vector<std::size_t> Assignment::teacher_indices() const {
  std::vector<std::size_t> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.teacher);
  return out;
}

std::vector<std::size_t> Assignment::student_indices() const {
  std::vector<std::size_t> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.student);
  return out;
}

CostMatrix manhattan_cost(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.rank() != 2 || student_logits.rank() != 2 ||
      teacher_logits.dim(1) != student_logits.dim(1)) {
    throw ShapeError("manhattan_cost: vocabularies differ, teacher " +
                     shape_to_string(teacher_logits.shape()) + " vs student " +
                     shape_to_string(student_logits.shape()));
  }
  const std::size_t nt = teacher_logits.dim(0), ns = student_logits.dim(0), v = teacher_logits.dim(1);
  const double* t = teacher_logits.values().data();
  const double* s = student_logits.values().data();
  std::vector<double> costs(nt * ns);
  for (std::size_t i = 0; i < nt; ++i)
    for (std::size_t j = 0; j < ns; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < v; ++k) acc += std::abs(t[i * v + k] - s[j * v + k]);
      costs[i * ns + j] = acc;
    }
  return CostMatrix(nt, ns, std::move(costs));
}

namespace {

void validate(const CostMatrix& cost) {
  if (cost.rows() == 0 || cost.cols() == 0) {
    throw std::invalid_argument("assignment needs a non-empty cost matrix");
  }
  for (double c : cost.costs()) {
    if (std::isnan(c)) throw std::invalid_argument("cost matrix contains NaN");
    if (!std::isfinite(c)) throw std::invalid_argument("cost matrix contains an infinite entry");
  }
}

// Assembles the result from row_to_col over the smaller side. `transposed`
// means rows of the working matrix are students.
Assignment make_assignment(const CostMatrix& cost, const std::vector<std::size_t>& row_to_col,
                           bool transposed) {
  Assignment a;
  a.pairs.reserve(row_to_col.size());
  for (std::size_t r = 0; r < row_to_col.size(); ++r) {
    const std::size_t c = row_to_col[r];
    a.pairs.push_back(transposed ? MatchPair{c, r} : MatchPair{r, c});
    a.total_cost += transposed ? cost(c, r) : cost(r, c);
  }
  return a;
}

}  // namespace

Assignment solve_lap(const CostMatrix& cost) {
  validate(cost);
  // Work with rows = smaller side.
  const bool transposed = cost.rows() > cost.cols();
  const CostMatrix work = transposed ? cost.transposed() : cost;
  const std::size_t n = work.rows(), m = work.cols();
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // 1-based potentials; column 0 is the virtual source of each augmentation.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = work(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = j - 1;
  return make_assignment(cost, row_to_col, transposed);
}

namespace {

struct Enumerator {
  const CostMatrix& work;
  std::vector<std::size_t> current, best;
  std::vector<char> taken;
  double best_cost = std::numeric_limits<double>::infinity();

  void search(std::size_t row, double partial) {
    if (partial >= best_cost) return;  // costs are nonnegative
    if (row == work.rows()) {
      best_cost = partial;
      best = current;
      return;
    }
    for (std::size_t c = 0; c < work.cols(); ++c) {
      if (taken[c]) continue;
      taken[c] = 1;
      current[row] = c;
      search(row + 1, partial + work(row, c));
      taken[c] = 0;
    }
  }
};

}  // namespace

Assignment brute_force_lap(const CostMatrix& cost) {
  validate(cost);
  if (std::min(cost.rows(), cost.cols()) > kBruteForceLimit) {
    throw std::invalid_argument("brute_force_lap: smaller side " +
                                std::to_string(std::min(cost.rows(), cost.cols())) +
                                " exceeds enumeration bound " + std::to_string(kBruteForceLimit));
  }
  for (double c : cost.costs())
    if (c < 0.0) throw std::invalid_argument("brute_force_lap: costs must be nonnegative");
  const bool transposed = cost.rows() > cost.cols();
  const CostMatrix work = transposed ? cost.transposed() : cost;
  Enumerator e{work, std::vector<std::size_t>(work.rows()), {}, std::vector<char>(work.cols(), 0)};
  e.search(0, 0.0);
  return make_assignment(cost, e.best, transposed);
}

Tensor pool_match(const Tensor& teacher_tokens, std::size_t target_len) {
  if (teacher_tokens.rank() != 2) {
    throw ShapeError("pool_match: expected [N x D] tokens, got " +
                     shape_to_string(teacher_tokens.shape()));
  }
  if (target_len == 0 || target_len > teacher_tokens.dim(0)) {
    throw std::invalid_argument("pool_match: cannot pool " + std::to_string(teacher_tokens.dim(0)) +
                                " teacher tokens to " + std::to_string(target_len));
  }
  return adaptive_avg_pool1d(teacher_tokens, target_len);
}

const char* to_string(MatchStrategy strategy) {
  switch (strategy) {
    case MatchStrategy::kHungarianLogits: return "hungarian_logits";
    case MatchStrategy::kHungarianHidden: return "hungarian_hidden";
    case MatchStrategy::kPooling: return "pooling";
  }
  return "unknown";
}

MatchStrategy parse_match_strategy(const std::string& name) {
  if (name == "hungarian_logits") return MatchStrategy::kHungarianLogits;
  if (name == "hungarian_hidden") return MatchStrategy::kHungarianHidden;
  if (name == "pooling") return MatchStrategy::kPooling;
  throw std::invalid_argument("unknown matcher strategy '" + name + "'");
}

MatchResult match_vision_tokens(const ModelOutputs& teacher, const ModelOutputs& student,
                                MatchStrategy strategy) {
  NoGradGuard no_grad;
  switch (strategy) {
    case MatchStrategy::kHungarianLogits:
      return solve_lap(manhattan_cost(teacher.vision_logits, student.vision_logits));
    case MatchStrategy::kHungarianHidden: {
      const auto dt = teacher.vision_hidden.dim(1), ds = student.vision_hidden.dim(1);
      if (dt != ds) {
        throw std::invalid_argument("hungarian_hidden needs equal hidden dims, teacher " +
                                    std::to_string(dt) + " vs student " + std::to_string(ds));
      }
      return solve_lap(manhattan_cost(teacher.vision_hidden, student.vision_hidden));
    }
    case MatchStrategy::kPooling: {
      const auto n = student.vision_hidden.dim(0);
      return PooledTokens{pool_match(teacher.vision_hidden.detach(), n),
                          pool_match(teacher.vision_logits.detach(), n)};
    }
  }
  throw std::invalid_argument("unknown matcher strategy");
}

}  // namespace emkd
