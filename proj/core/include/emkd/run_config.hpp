#pragma once

#include <string>

#include "emkd/data.hpp"
#include "emkd/model.hpp"
#include "emkd/pipeline.hpp"

namespace emkd {

/// JSON run description. Sections: model_teacher, model_student, data,
/// train_teacher, distill. Keys use the snake_case field names of the
/// corresponding structs; missing keys keep their defaults, unknown keys are
/// rejected.
struct RunConfig {
  ModelConfig model_teacher = ModelConfig::teacher_default();
  ModelConfig model_student = ModelConfig::student_default();
  DatasetConfig data;
  TrainConfig train_teacher;
  DistillConfig distill;

  /// Cross-section checks: shared vocabulary, image grid vs. model grid,
  /// sequence lengths.
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& config);

}  // namespace emkd
