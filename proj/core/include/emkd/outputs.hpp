#pragma once

#include "emkd/tensor.hpp"

namespace emkd {

/// Segmented view of one teacher-forced forward pass over the sequence
/// [vision | prompt | response inputs].
struct ModelOutputs {
  Tensor vision_hidden;    // [N_v x D], final-norm hidden states at vision positions
  Tensor language_hidden;  // [N_text x D], prompt and response-input positions
  Tensor vision_logits;    // [N_v x V]
  /// [N_text x V]; row t predicts text token t + 1. Rows whose label is the
  /// ignore sentinel (inside the prompt) are masked by the losses.
  Tensor response_logits;
  Tensor full_hidden;  // [N_v + N_text x D]
};

}  // namespace emkd
