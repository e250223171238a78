#include "emkd/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emkd/checkpoint.hpp"
#include "emkd/pipeline.hpp"
#include "emkd/run_config.hpp"

namespace emkd::cli {

namespace {

using nlohmann::ordered_json;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_path;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool out_required) {
  cmd->add_option("--config", flags.config_path, "JSON run config (defaults when omitted)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", flags.seed, "Overrides the seed of the config");
  auto* out = cmd->add_option("--out", flags.out_path,
                              out_required ? "Output file" : "Write the report here instead of stdout");
  if (out_required) out->required();
}

RunConfig load_config(const CommonFlags& flags) {
  RunConfig config = flags.config_path.empty() ? RunConfig{} : load_run_config(flags.config_path);
  config.validate();
  return config;
}

std::string default_metrics_path(const std::string& out) { return out + ".metrics.jsonl"; }

// Reports go to --out when given, otherwise to `out`.
class Report {
 public:
  Report(const std::string& path, std::ostream& fallback) : stream_(&fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary | std::ios::trunc);
      if (!file_) throw std::runtime_error("cannot open " + path + " for writing");
      stream_ = &file_;
    }
  }
  std::ostream& stream() { return *stream_; }
  void close() {
    if (file_.is_open()) {
      file_.close();
      if (!file_) throw std::runtime_error("write failed");
    }
  }

 private:
  std::ofstream file_;
  std::ostream* stream_;
};

class MetricsFile {
 public:
  explicit MetricsFile(const std::string& path) : file_(path, std::ios::binary | std::ios::trunc) {
    if (!file_) throw std::runtime_error("cannot open " + path + " for writing");
  }
  void operator()(const MetricsRecord& r) { file_ << to_json_line(r) << '\n'; }
  void close() {
    file_.close();
    if (!file_) throw std::runtime_error("metrics write failed");
  }

 private:
  std::ofstream file_;
};

ordered_json metrics_json(const MetricsRecord& r) { return ordered_json::parse(to_json_line(r)); }

int cmd_gen_data(const CommonFlags& flags, const std::string& split_name, std::size_t count,
                 std::ostream& out) {
  RunConfig config = load_config(flags);
  if (flags.seed) config.data.base_seed = *flags.seed;
  const Split split = parse_split(split_name);
  SyntheticDataset dataset(config.data);
  const std::size_t n = count == 0 ? dataset.size(split) : std::min(count, dataset.size(split));
  save_checkpoint(flags.out_path, dataset_to_arrays(dataset, split, n));
  ordered_json j;
  j["command"] = "gen-data";
  j["out"] = flags.out_path;
  j["split"] = to_string(split);
  j["examples"] = n;
  j["base_seed"] = config.data.base_seed;
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_train_teacher(const CommonFlags& flags, std::string metrics_path, std::ostream& out) {
  RunConfig config = load_config(flags);
  if (flags.seed) config.train_teacher.seed = *flags.seed;
  if (metrics_path.empty()) metrics_path = default_metrics_path(flags.out_path);
  SyntheticDataset dataset(config.data);
  MetricsFile metrics(metrics_path);
  TrainResult result = train_teacher(config.model_teacher, dataset, config.train_teacher,
                                     [&](const MetricsRecord& r) { metrics(r); });
  metrics.close();
  save_model(flags.out_path, result.params,
             {{"seed", static_cast<std::int64_t>(config.train_teacher.seed)},
              {"steps", static_cast<std::int64_t>(config.train_teacher.steps)}});
  ordered_json j;
  j["command"] = "train-teacher";
  j["out"] = flags.out_path;
  j["metrics"] = metrics_path;
  j["final"] = metrics_json(result.metrics.back());
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_distill(const CommonFlags& flags, const std::string& teacher_path, std::string metrics_path,
                std::ostream& out) {
  RunConfig config = load_config(flags);
  if (flags.seed) config.distill.seed = *flags.seed;
  if (metrics_path.empty()) metrics_path = default_metrics_path(flags.out_path);
  const ModelParameters teacher = load_model(teacher_path);
  SyntheticDataset dataset(config.data);
  const ModelParameters student = init_params(config.model_student, config.distill.seed);
  MetricsFile metrics(metrics_path);
  TrainResult result = train_distill(teacher, student, dataset, config.distill,
                                     [&](const MetricsRecord& r) { metrics(r); });
  metrics.close();
  save_model(flags.out_path, result.params,
             {{"seed", static_cast<std::int64_t>(config.distill.seed)},
              {"steps", static_cast<std::int64_t>(config.distill.steps)}});
  ordered_json j;
  j["command"] = "distill";
  j["out"] = flags.out_path;
  j["metrics"] = metrics_path;
  j["final"] = metrics_json(result.metrics.back());
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& model_path, const std::string& teacher_path,
             const std::string& split_name, std::optional<std::size_t> max_examples,
             std::ostream& out) {
  RunConfig config = load_config(flags);
  const std::vector<NamedArray> entries = load_checkpoint(model_path);
  const ModelParameters model = model_from_arrays(entries);
  std::optional<ModelParameters> teacher;
  if (!teacher_path.empty()) teacher = load_model(teacher_path);
  SyntheticDataset dataset(config.data);
  // Match the in-training evaluation of the run that produced the checkpoint.
  const std::size_t n = max_examples.value_or(teacher ? config.distill.eval_examples
                                                      : config.train_teacher.eval_examples);
  MetricsRecord r = evaluate(model, dataset, parse_split(split_name), teacher ? &*teacher : nullptr, n);
  const auto meta = model_meta(entries);
  if (auto it = meta.find("steps"); it != meta.end()) r.step = static_cast<std::size_t>(it->second);
  Report report(flags.out_path, out);
  report.stream() << to_json_line(r) << '\n';
  report.close();
  return kExitOk;
}

std::size_t token_grid_cols(const ModelConfig& c) {
  return c.role == ModelRole::kStudent ? c.pooled_w : c.grid_w;
}

int cmd_inspect_vision(const CommonFlags& flags, const std::string& model_path,
                       const std::string& split_name, std::size_t index, std::size_t topk,
                       std::ostream& out) {
  RunConfig config = load_config(flags);
  const ModelParameters model = load_model(model_path);
  SyntheticDataset dataset(config.data);
  const Split split = parse_split(split_name);
  if (index >= dataset.size(split)) {
    throw std::out_of_range("example index " + std::to_string(index) + " out of range for " +
                            to_string(split) + " split of " + std::to_string(dataset.size(split)));
  }
  const SyntheticExample example = dataset.generate(split, index);
  const auto decoded = decode_vision_tokens(model, example, topk);
  const auto symbols = vision_token_symbols(model.config(), config.data, example);
  const std::size_t cols = token_grid_cols(model.config());
  Report report(flags.out_path, out);
  for (std::size_t t = 0; t < decoded.size(); ++t) {
    ordered_json j;
    j["token"] = t;
    j["row"] = t / cols;
    j["col"] = t % cols;
    j["symbol"] = symbols[t];
    ordered_json top = ordered_json::array();
    for (const auto& e : decoded[t]) top.push_back({e.token, e.logit});
    j["topk"] = std::move(top);
    report.stream() << j.dump() << '\n';
  }
  report.close();
  return kExitOk;
}

int cmd_match_dump(const CommonFlags& flags, const std::string& teacher_path,
                   const std::string& model_path, const std::string& strategy_name,
                   const std::string& split_name, std::size_t count, std::ostream& out) {
  RunConfig config = load_config(flags);
  const MatchStrategy strategy =
      strategy_name.empty() ? config.distill.matcher : parse_match_strategy(strategy_name);
  if (strategy == MatchStrategy::kPooling) {
    throw std::invalid_argument("match-dump needs a hungarian strategy; pooling has no assignment");
  }
  const ModelParameters teacher = load_model(teacher_path);
  const ModelParameters student = load_model(model_path);
  SyntheticDataset dataset(config.data);
  const Split split = parse_split(split_name);
  const std::size_t n = std::min(count, dataset.size(split));

  ordered_json j;
  j["strategy"] = to_string(strategy);
  j["split"] = to_string(split);
  ordered_json examples = ordered_json::array();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const SyntheticExample ex = dataset.generate(split, i);
    const auto result = match_vision_tokens(forward(teacher, ex), forward(student, ex), strategy);
    const auto& a = std::get<Assignment>(result);
    ordered_json pairs = ordered_json::array();
    for (const auto& p : a.pairs) pairs.push_back({p.teacher, p.student});
    ordered_json e;
    e["index"] = i;
    e["pairs"] = std::move(pairs);
    e["total_cost"] = a.total_cost;
    examples.push_back(std::move(e));
  }
  j["examples"] = std::move(examples);
  Report report(flags.out_path, out);
  report.stream() << j.dump() << '\n';
  report.close();
  return kExitOk;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision-token knowledge distillation on a synthetic multimodal task", "emkd"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string split = "eval";
  std::string teacher_path, model_path, metrics_path, strategy;
  std::size_t gen_count = 0, match_count = 4, index = 0, topk = 5;
  std::optional<std::size_t> max_examples;

  auto* gen = app.add_subcommand("gen-data", "Write a dataset split to a binary file");
  add_common(gen, flags, true);
  gen->add_option("--split", split, "train or eval")->capture_default_str();
  gen->add_option("--count", gen_count, "Number of examples (0 = whole split)")->capture_default_str();

  auto* train = app.add_subcommand("train-teacher", "Train the teacher with cross-entropy");
  add_common(train, flags, true);
  train->add_option("--metrics", metrics_path, "Metrics JSONL (default <out>.metrics.jsonl)");

  auto* distill = app.add_subcommand("distill", "Distill a student from a teacher checkpoint");
  add_common(distill, flags, true);
  distill->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  distill->add_option("--metrics", metrics_path, "Metrics JSONL (default <out>.metrics.jsonl)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and print a metrics record");
  add_common(eval, flags, false);
  eval->add_option("--model", model_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--teacher", teacher_path, "Measure agreement against this teacher")
      ->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train or eval")->capture_default_str();
  eval->add_option("--max-examples", max_examples, "Examples to score (0 = whole split)");

  auto* inspect = app.add_subcommand("inspect-vision", "Decode vision tokens into the vocabulary");
  add_common(inspect, flags, false);
  inspect->add_option("--model", model_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
  inspect->add_option("--example-index", index, "Example to inspect")->capture_default_str();
  inspect->add_option("--topk", topk, "Entries per token")->capture_default_str()->check(CLI::PositiveNumber);
  inspect->add_option("--split", split, "train or eval")->capture_default_str();

  auto* match = app.add_subcommand("match-dump", "Print teacher/student token assignments");
  add_common(match, flags, false);
  match->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  match->add_option("--model", model_path, "Student checkpoint")->required()->check(CLI::ExistingFile);
  match->add_option("--strategy", strategy, "hungarian_logits or hungarian_hidden (default from config)");
  match->add_option("--split", split, "train or eval")->capture_default_str();
  match->add_option("--count", match_count, "Number of examples")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(flags, split, gen_count, out);
    if (*train) return cmd_train_teacher(flags, metrics_path, out);
    if (*distill) return cmd_distill(flags, teacher_path, metrics_path, out);
    if (*eval) return cmd_eval(flags, model_path, teacher_path, split, max_examples, out);
    if (*inspect) return cmd_inspect_vision(flags, model_path, split, index, topk, out);
    if (*match) return cmd_match_dump(flags, teacher_path, model_path, strategy, split, match_count, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace emkd::cli
