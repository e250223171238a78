#include "emkd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace emkd {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be >= 1");
}

void DistillConfig::validate() const {
  weights.validate();
  if (!(smooth_l1_delta > 0.0)) throw std::invalid_argument("smooth_l1_delta must be > 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be >= 1");
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["sup"] = r.sup;
  j["rld"] = r.rld;
  j["vsd"] = r.vsd;
  j["vlad"] = r.vlad;
  j["total"] = r.total;
  j["eval_ce"] = r.eval_ce;
  j["agreement"] = r.agreement;
  j["exact_match"] = r.exact_match;
  j["ms"] = r.ms;
  return j.dump();
}

MetricsRecord metrics_from_json_line(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.sup = j.at("sup").get<double>();
  r.rld = j.at("rld").get<double>();
  r.vsd = j.at("vsd").get<double>();
  r.vlad = j.at("vlad").get<double>();
  r.total = j.at("total").get<double>();
  r.eval_ce = j.at("eval_ce").get<double>();
  r.agreement = j.at("agreement").get<double>();
  r.exact_match = j.at("exact_match").get<double>();
  r.ms = j.at("ms").get<double>();
  return r;
}

void adam_update(TrainState& state, ModelParameters& params, double learning_rate) {
  for (const auto& [name, t] : params.tensors()) {
    if (!t.has_grad()) continue;
    for (double g : t.impl()->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(kAdamBeta1, t);
  const double correction2 = 1.0 - std::pow(kAdamBeta2, t);
  for (auto& [name, tensor] : params.tensors()) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(tensor.numel(), 0.0);
      v.assign(tensor.numel(), 0.0);
    }
    if (!tensor.has_grad()) continue;
    const auto& g = tensor.impl()->grad;
    auto& p = tensor.impl()->data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
      v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + kAdamEps);
    }
  }
}

namespace {

Tensor batch_mean(const std::vector<Tensor>& terms) {
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void require_shared_vocab(const ModelParameters& teacher, const ModelParameters& student) {
  if (teacher.config().vocab_size != student.config().vocab_size) {
    throw std::invalid_argument("teacher and student vocabularies differ: " +
                                std::to_string(teacher.config().vocab_size) + " vs " +
                                std::to_string(student.config().vocab_size));
  }
}

}  // namespace

Tensor supervised_loss(const ModelParameters& params, std::span<const SyntheticExample> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<Tensor> terms;
  for (const auto& ex : batch) terms.push_back(cross_entropy(forward(params, ex).response_logits, ex.labels));
  return batch_mean(terms);
}

LossBreakdown distill_step(const ModelParameters& teacher, ModelParameters& student,
                           std::span<const SyntheticExample> batch, const DistillConfig& config) {
  if (batch.empty()) throw std::invalid_argument("distill_step: empty batch");
  require_shared_vocab(teacher, student);
  const LossWeights& w = config.weights;
  student.zero_grad();

  Tape tape;
  TapeScope scope(tape);
  auto component = [](double weight, auto&& build) {
    if (weight == 0.0) {
      NoGradGuard no_grad;
      return build();
    }
    return build();
  };

  std::vector<Tensor> sups, rlds, vsds, vlads;
  for (const auto& ex : batch) {
    ModelOutputs t;
    {
      NoGradGuard no_grad;
      t = forward(teacher, ex);
    }
    ModelOutputs s = forward(student, ex);
    const MatchResult match = match_vision_tokens(t, s, config.matcher);
    sups.push_back(component(w.alpha, [&] { return cross_entropy(s.response_logits, ex.labels); }));
    rlds.push_back(component(1.0 - w.alpha, [&] {
      return response_rld(s.response_logits, t.response_logits, ex.labels, w.temperature);
    }));
    vsds.push_back(component(w.beta, [&] { return vsd_loss(t, s, match, config.vsd_object, w); }));
    vlads.push_back(component(w.gamma, [&] { return vlad_loss(t, s, match, config.smooth_l1_delta); }));
  }
  Tensor sup = batch_mean(sups), rld = batch_mean(rlds), vsd = batch_mean(vsds), vlad = batch_mean(vlads);
  Tensor total = combine_loss(w, sup, rld, vsd, vlad);
  LossBreakdown breakdown = combine(w, sup.item(), rld.item(), vsd.item(), vlad.item());
  tape.backward(total);
  return breakdown;
}

std::vector<SyntheticExample> scheduled_batch(const SyntheticDataset& dataset, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t step) {
  const std::size_t n = dataset.size(Split::kTrain);
  if (n < batch_size) throw std::invalid_argument("train split smaller than one batch");
  const std::size_t per_epoch = n / batch_size;  // full batches only
  const std::size_t epoch = step / per_epoch;
  BatchSequence seq(dataset, Split::kTrain, batch_size, seed * 1000003ULL + epoch);
  return seq.batch(step % per_epoch);
}

namespace {

using Clock = std::chrono::steady_clock;

[[noreturn]] void diverged(std::size_t step, const char* what, const std::vector<MetricsRecord>& history) {
  const std::string last = history.empty() ? "none" : to_json_line(history.back());
  throw std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what +
                           "; last metrics: " + last);
}

// Shared loop: computes gradients for `step`, records metrics on schedule,
// then applies Adam (except after the final evaluation step).
template <typename StepFn, typename EvalFn>
std::vector<MetricsRecord> run_schedule(ModelParameters& params, std::size_t steps, std::size_t interval,
                                        double lr, StepFn&& step_fn, EvalFn&& eval_fn,
                                        const MetricsSink& sink) {
  TrainState state;
  std::vector<MetricsRecord> history;
  const auto start = Clock::now();
  for (std::size_t step = 0; step <= steps; ++step) {
    const bool record = step % interval == 0;
    if (step == steps && !record) break;
    LossBreakdown b;
    try {
      b = step_fn(step);
      if (!std::isfinite(b.total)) throw NumericError("loss is not finite");
    } catch (const NumericError& e) {
      diverged(step, e.what(), history);
    }
    if (record) {
      MetricsRecord r = eval_fn(static_cast<const ModelParameters&>(params));
      r.step = step;
      r.sup = b.sup;
      r.rld = b.rld;
      r.vsd = b.vsd;
      r.vlad = b.vlad;
      r.total = b.total;
      r.ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
      history.push_back(r);
      if (sink) sink(r);
    }
    if (step < steps) {
      try {
        adam_update(state, params, lr);
      } catch (const NumericError& e) {
        diverged(step, e.what(), history);
      }
    }
  }
  params.zero_grad();
  return history;
}

}  // namespace

TrainResult train_teacher(const ModelConfig& config, const SyntheticDataset& dataset,
                          const TrainConfig& train, const MetricsSink& sink) {
  train.validate();
  TrainResult result{init_params(config, train.seed), {}};
  const LossWeights sft{1.0, 0.0, 0.0, 1.0};
  result.metrics = run_schedule(
      result.params, train.steps, train.eval_interval, train.learning_rate,
      [&](std::size_t step) {
        auto batch = scheduled_batch(dataset, train.batch_size, train.seed, step);
        result.params.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = supervised_loss(result.params, batch);
        const double sup = loss.item();
        tape.backward(loss);
        return combine(sft, sup, 0.0, 0.0, 0.0);
      },
      [&](const ModelParameters& p) {
        return evaluate(p, dataset, Split::kEval, nullptr, train.eval_examples);
      },
      sink);
  return result;
}

TrainResult train_distill(const ModelParameters& teacher, const ModelParameters& student_init,
                          const SyntheticDataset& dataset, const DistillConfig& config,
                          const MetricsSink& sink) {
  config.validate();
  require_shared_vocab(teacher, student_init);
  TrainResult result{student_init.clone(), {}};
  result.metrics = run_schedule(
      result.params, config.steps, config.eval_interval, config.learning_rate,
      [&](std::size_t step) {
        auto batch = scheduled_batch(dataset, config.batch_size, config.seed, step);
        return distill_step(teacher, result.params, batch, config);
      },
      [&](const ModelParameters& p) {
        return evaluate(p, dataset, Split::kEval, &teacher, config.eval_examples);
      },
      sink);
  return result;
}

MetricsRecord evaluate(const ModelParameters& params, const SyntheticDataset& dataset, Split split,
                       const ModelParameters* teacher, std::size_t max_examples) {
  NoGradGuard no_grad;
  std::size_t n = dataset.size(split);
  if (max_examples != 0) n = std::min(n, max_examples);
  if (n == 0) throw std::invalid_argument("evaluate: no examples");
  const std::size_t v = params.config().vocab_size;

  double ce_sum = 0.0;
  std::size_t agree = 0, positions = 0, exact = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const SyntheticExample ex = dataset.generate(split, i);
    const ModelOutputs out = forward(params, ex);
    ce_sum += cross_entropy(out.response_logits, ex.labels).item();
    ModelOutputs ref;
    if (teacher != nullptr) ref = forward(*teacher, ex);
    // Causal masking makes teacher-forced logits identical to the incremental
    // ones, so greedy decoding reproduces the response iff every supervised
    // argmax already hits its label.
    bool all_hit = true;
    for (std::size_t t = 0; t < ex.labels.size(); ++t) {
      if (ex.labels[t] == kIgnoreLabel) continue;
      const auto mine = argmax(out.response_logits.values().subspan(t * v, v));
      all_hit = all_hit && mine == static_cast<std::size_t>(ex.labels[t]);
      const auto target = teacher != nullptr
                              ? argmax(ref.response_logits.values().subspan(t * v, v))
                              : static_cast<std::size_t>(ex.labels[t]);
      agree += mine == target ? 1 : 0;
      ++positions;
    }
    exact += all_hit ? 1 : 0;
  }
  MetricsRecord r;
  r.eval_ce = ce_sum / static_cast<double>(n);
  r.agreement = static_cast<double>(agree) / static_cast<double>(positions);
  r.exact_match = static_cast<double>(exact) / static_cast<double>(n);
  return r;
}

std::vector<std::vector<TokenLogit>> decode_vision_tokens(const ModelParameters& params,
                                                          const SyntheticExample& example,
                                                          std::size_t k) {
  const std::size_t v = params.config().vocab_size;
  if (k == 0 || k > v) throw std::invalid_argument("top-k must lie in [1, vocab_size]");
  ModelOutputs out;
  {
    NoGradGuard no_grad;
    out = forward(params, example);
  }
  const std::size_t nv = out.vision_logits.dim(0);
  std::vector<std::vector<TokenLogit>> result(nv);
  std::vector<std::size_t> order(v);
  for (std::size_t i = 0; i < nv; ++i) {
    const auto row = out.vision_logits.values().subspan(i * v, v);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j)
      result[i].push_back({static_cast<std::int64_t>(order[j]), row[order[j]]});
  }
  return result;
}

std::vector<std::int64_t> vision_token_symbols(const ModelConfig& config, const DatasetConfig& data,
                                               const SyntheticExample& example) {
  if (config.grid_h != data.image_h() || config.grid_w != data.image_w()) {
    throw std::invalid_argument("model patch grid does not match the dataset image");
  }
  std::vector<std::int64_t> out;
  auto cell_symbol = [&](std::size_t r, std::size_t c) {
    return example.response_ids[(r / data.cell_size) * data.grid_w + c / data.cell_size];
  };
  if (config.role == ModelRole::kTeacher) {
    for (std::size_t r = 0; r < config.grid_h; ++r)
      for (std::size_t c = 0; c < config.grid_w; ++c) out.push_back(cell_symbol(r, c));
    return out;
  }
  for (std::size_t i = 0; i < config.pooled_h; ++i) {
    const auto wr = adaptive_pool_window(i, config.grid_h, config.pooled_h);
    for (std::size_t j = 0; j < config.pooled_w; ++j) {
      const auto wc = adaptive_pool_window(j, config.grid_w, config.pooled_w);
      out.push_back(cell_symbol((wr.begin + wr.end - 1) / 2, (wc.begin + wc.end - 1) / 2));
    }
  }
  return out;
}

double vision_symbol_hit_rate(const ModelParameters& params, const SyntheticDataset& dataset,
                              Split split, std::size_t num_examples, std::size_t k) {
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < num_examples; ++i) {
    const auto ex = dataset.generate(split, i);
    const auto top = decode_vision_tokens(params, ex, k);
    const auto truth = vision_token_symbols(params.config(), dataset.config(), ex);
    for (std::size_t t = 0; t < top.size(); ++t) {
      hits += std::any_of(top[t].begin(), top[t].end(),
                          [&](const TokenLogit& e) { return e.token == truth[t]; })
                  ? 1
                  : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace emkd
