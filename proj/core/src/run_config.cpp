#include "emkd/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace emkd {

namespace {

using nlohmann::json;
using Setter = std::function<void(const json&)>;
using FieldTable = std::vector<std::pair<const char*, Setter>>;

template <typename T>
Setter set(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

void apply(const json& section, const char* section_name, const FieldTable& fields) {
  if (!section.is_object()) throw std::invalid_argument(std::string("config section '") + section_name + "' must be an object");
  for (const auto& [key, value] : section.items()) {
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return key == f.first; });
    if (it == fields.end()) {
      throw std::invalid_argument(std::string("unknown key '") + key + "' in section '" + section_name + "'");
    }
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("bad value for '") + section_name + "." + key + "': " + e.what());
    }
  }
}

FieldTable model_fields(ModelConfig& c) {
  return {{"vocab_size", set(c.vocab_size)},
          {"hidden_dim", set(c.hidden_dim)},
          {"num_layers", set(c.num_layers)},
          {"num_heads", set(c.num_heads)},
          {"grid_h", set(c.grid_h)},
          {"grid_w", set(c.grid_w)},
          {"patch_dim", set(c.patch_dim)},
          {"pooled_h", set(c.pooled_h)},
          {"pooled_w", set(c.pooled_w)},
          {"mlp_ratio", set(c.mlp_ratio)},
          {"max_seq_len", set(c.max_seq_len)},
          {"role", [&c](const json& v) { c.role = parse_model_role(v.get<std::string>()); }}};
}

FieldTable data_fields(DatasetConfig& c) {
  return {{"grid_h", set(c.grid_h)},
          {"grid_w", set(c.grid_w)},
          {"cell_size", set(c.cell_size)},
          {"patch_dim", set(c.patch_dim)},
          {"num_symbols", set(c.num_symbols)},
          {"noise_std", set(c.noise_std)},
          {"prompt_ids", set(c.prompt_ids)},
          {"eos_id", set(c.eos_id)},
          {"first_symbol_id", set(c.first_symbol_id)},
          {"train_size", set(c.train_size)},
          {"eval_size", set(c.eval_size)},
          {"base_seed", set(c.base_seed)}};
}

FieldTable train_fields(TrainConfig& c) {
  return {{"learning_rate", set(c.learning_rate)},
          {"steps", set(c.steps)},
          {"batch_size", set(c.batch_size)},
          {"seed", set(c.seed)},
          {"eval_interval", set(c.eval_interval)},
          {"eval_examples", set(c.eval_examples)}};
}

FieldTable distill_fields(DistillConfig& c) {
  return {{"alpha", set(c.weights.alpha)},
          {"beta", set(c.weights.beta)},
          {"gamma", set(c.weights.gamma)},
          {"temperature", set(c.weights.temperature)},
          {"matcher", [&c](const json& v) { c.matcher = parse_match_strategy(v.get<std::string>()); }},
          {"vsd_object", [&c](const json& v) { c.vsd_object = parse_vsd_object(v.get<std::string>()); }},
          {"smooth_l1_delta", set(c.smooth_l1_delta)},
          {"learning_rate", set(c.learning_rate)},
          {"steps", set(c.steps)},
          {"batch_size", set(c.batch_size)},
          {"seed", set(c.seed)},
          {"eval_interval", set(c.eval_interval)},
          {"eval_examples", set(c.eval_examples)}};
}

json model_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"grid_h", c.grid_h},         {"grid_w", c.grid_w},
          {"patch_dim", c.patch_dim},   {"pooled_h", c.pooled_h},     {"pooled_w", c.pooled_w},
          {"mlp_ratio", c.mlp_ratio},   {"max_seq_len", c.max_seq_len}, {"role", to_string(c.role)}};
}

}  // namespace

void RunConfig::validate() const {
  model_teacher.validate();
  model_student.validate();
  data.validate();
  train_teacher.validate();
  distill.validate();
  if (model_teacher.role != ModelRole::kTeacher) throw std::invalid_argument("model_teacher.role must be teacher");
  if (model_student.role != ModelRole::kStudent) throw std::invalid_argument("model_student.role must be student");
  if (model_teacher.vocab_size != model_student.vocab_size) {
    throw std::invalid_argument("teacher and student must share vocab_size");
  }
  if (model_teacher.vocab_size < data.min_vocab()) {
    throw std::invalid_argument("vocab_size " + std::to_string(model_teacher.vocab_size) +
                                " cannot hold the task's " + std::to_string(data.min_vocab()) + " token ids");
  }
  if (model_student.vision_tokens() > model_teacher.vision_tokens()) {
    throw std::invalid_argument("student must not have more vision tokens than the teacher");
  }
  for (const ModelConfig* m : {&model_teacher, &model_student}) {
    if (m->grid_h != data.image_h() || m->grid_w != data.image_w() || m->patch_dim != data.patch_dim) {
      throw std::invalid_argument(std::string(to_string(m->role)) + " patch grid does not match the data image");
    }
    if (m->vision_tokens() + data.text_length() > m->max_seq_len) {
      throw std::invalid_argument(std::string(to_string(m->role)) + " max_seq_len is too short for the task");
    }
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  RunConfig rc;
  for (const auto& [key, section] : doc.items()) {
    if (key == "model_teacher") apply(section, "model_teacher", model_fields(rc.model_teacher));
    else if (key == "model_student") apply(section, "model_student", model_fields(rc.model_student));
    else if (key == "data") apply(section, "data", data_fields(rc.data));
    else if (key == "train_teacher") apply(section, "train_teacher", train_fields(rc.train_teacher));
    else if (key == "distill") apply(section, "distill", distill_fields(rc.distill));
    else throw std::invalid_argument("unknown config section '" + key + "'");
  }
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model_teacher"] = model_json(c.model_teacher);
  j["model_student"] = model_json(c.model_student);
  j["data"] = {{"grid_h", c.data.grid_h},           {"grid_w", c.data.grid_w},
               {"cell_size", c.data.cell_size},     {"patch_dim", c.data.patch_dim},
               {"num_symbols", c.data.num_symbols}, {"noise_std", c.data.noise_std},
               {"prompt_ids", c.data.prompt_ids},   {"eos_id", c.data.eos_id},
               {"first_symbol_id", c.data.first_symbol_id}, {"train_size", c.data.train_size},
               {"eval_size", c.data.eval_size},     {"base_seed", c.data.base_seed}};
  j["train_teacher"] = {{"learning_rate", c.train_teacher.learning_rate}, {"steps", c.train_teacher.steps},
                        {"batch_size", c.train_teacher.batch_size},       {"seed", c.train_teacher.seed},
                        {"eval_interval", c.train_teacher.eval_interval}, {"eval_examples", c.train_teacher.eval_examples}};
  j["distill"] = {{"alpha", c.distill.weights.alpha},
                  {"beta", c.distill.weights.beta},
                  {"gamma", c.distill.weights.gamma},
                  {"temperature", c.distill.weights.temperature},
                  {"matcher", to_string(c.distill.matcher)},
                  {"vsd_object", to_string(c.distill.vsd_object)},
                  {"smooth_l1_delta", c.distill.smooth_l1_delta},
                  {"learning_rate", c.distill.learning_rate},
                  {"steps", c.distill.steps},
                  {"batch_size", c.distill.batch_size},
                  {"seed", c.distill.seed},
                  {"eval_interval", c.distill.eval_interval},
                  {"eval_examples", c.distill.eval_examples}};
  return j.dump(2);
}

}  // namespace emkd
