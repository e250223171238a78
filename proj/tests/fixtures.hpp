#pragma once

#include <random>

#include "emkd/losses.hpp"
#include "emkd/model.hpp"
#include "emkd/data.hpp"
#include "emkd/run_config.hpp"

namespace fixtures {

// D = 8, one layer, V = 11; a 4 x 4 patch grid pooled to 2 x 2 for the student.
inline emkd::ModelConfig tiny_config(emkd::ModelRole role) {
  emkd::ModelConfig c;
  c.vocab_size = 11;
  c.hidden_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.grid_h = 4;
  c.grid_w = 4;
  c.patch_dim = 3;
  c.pooled_h = 2;
  c.pooled_w = 2;
  c.mlp_ratio = 2;
  c.max_seq_len = 32;
  c.role = role;
  return c;
}

inline emkd::SyntheticExample tiny_example(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> token(2, 10);
  emkd::SyntheticExample ex;
  std::vector<double> grid(4 * 4 * 3);
  for (auto& v : grid) v = normal(rng);
  ex.patch_grid = emkd::Tensor::from({4, 4, 3}, grid);
  ex.prompt_ids = {2, 3};
  ex.response_ids = {token(rng), token(rng), token(rng), 1};
  // Inputs: prompt + response[:-1]; position t predicts input t + 1.
  auto inputs = ex.input_ids();
  ex.labels.assign(inputs.size(), emkd::kIgnoreLabel);
  for (std::size_t i = 0; i < ex.response_ids.size(); ++i)
    ex.labels[ex.prompt_ids.size() - 1 + i] = ex.response_ids[i];
  return ex;
}

// A 2 x 2 cell task rendered as the 4 x 4 x 3 image tiny_config expects;
// symbols 5..7 fit the 11-token vocabulary.
inline emkd::DatasetConfig tiny_data() {
  emkd::DatasetConfig c;
  c.grid_h = 2;
  c.grid_w = 2;
  c.cell_size = 2;
  c.patch_dim = 3;
  c.num_symbols = 3;
  c.prompt_ids = {2, 3};
  c.first_symbol_id = 5;
  c.train_size = 24;
  c.eval_size = 6;
  c.base_seed = 77;
  return c;
}

// Whole-pipeline config on the tiny models, small enough for CLI tests.
inline emkd::RunConfig tiny_run_config() {
  emkd::RunConfig rc;
  rc.model_teacher = tiny_config(emkd::ModelRole::kTeacher);
  rc.model_student = tiny_config(emkd::ModelRole::kStudent);
  rc.data = tiny_data();
  rc.train_teacher.steps = 6;
  rc.train_teacher.eval_interval = 3;
  rc.train_teacher.batch_size = 4;
  rc.train_teacher.eval_examples = 4;
  rc.distill.steps = 4;
  rc.distill.eval_interval = 2;
  rc.distill.batch_size = 4;
  rc.distill.eval_examples = 4;
  return rc;
}

// Per-sample distillation objective with a fixed matching.
inline emkd::Tensor distill_total(const emkd::ModelOutputs& teacher, const emkd::ModelOutputs& student,
                                  const emkd::SyntheticExample& ex, const emkd::MatchResult& match,
                                  const emkd::LossWeights& w) {
  using namespace emkd;
  Tensor sup = cross_entropy(student.response_logits, ex.labels);
  Tensor rld = response_rld(student.response_logits, teacher.response_logits, ex.labels, w.temperature);
  Tensor vsd = vsd_loss(teacher, student, match, VsdObject::kLogits, w);
  Tensor vlad = vlad_loss(teacher, student, match);
  return combine_loss(w, sup, rld, vsd, vlad);
}

}  // namespace fixtures
