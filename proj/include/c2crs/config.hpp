#pragma once

// Training configuration: YAML files with model/train/data sections, JSON
// for checkpoint manifests, and the ablation variants.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "c2crs/encoders.hpp"

namespace c2crs {

enum class Stage { kCoarse, kFine, kRec, kConv, kMultiTask };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kCoarse: return "coarse";
    case Stage::kFine: return "fine";
    case Stage::kRec: return "rec";
    case Stage::kConv: return "conv";
    case Stage::kMultiTask: return "multi-task";
  }
  return "unknown";
}

inline Stage parse_stage(const std::string& name) {
  if (name == "coarse" || name == "pretrain_coarse") return Stage::kCoarse;
  if (name == "fine" || name == "pretrain_fine") return Stage::kFine;
  if (name == "rec" || name == "finetune_rec") return Stage::kRec;
  if (name == "conv" || name == "finetune_conv") return Stage::kConv;
  if (name == "multi-task" || name == "multi_task" || name == "multitask") return Stage::kMultiTask;
  throw Error("unknown stage '" + name + "'");
}

/// Length of one stage: `steps` optimizer steps plus `epochs` full passes.
struct StageSpec {
  Stage stage = Stage::kCoarse;
  int steps = 0;
  int epochs = 0;
  bool operator==(const StageSpec&) const = default;
};

struct TrainConfig {
  ModelConfig model;
  std::vector<StageSpec> schedule = {
      {Stage::kCoarse, 0, 1}, {Stage::kFine, 0, 1}, {Stage::kRec, 0, 1}, {Stage::kConv, 0, 1}};
  double learning_rate = 0.001;
  int batch_size = 256;
  double grad_clip = 0.1;  // global-norm bound
  std::uint64_t seed = 0;
  bool freeze_encoders = false;
  std::string data_dir;

  void validate() const {
    model.validate();
    if (!(learning_rate > 0)) throw Error("learning_rate must be positive");
    if (batch_size < 1) throw Error("batch_size must be positive");
    if (!(grad_clip > 0)) throw Error("grad_clip must be positive");
    for (const auto& s : schedule) {
      if (s.steps < 0 || s.epochs < 0 || s.steps + s.epochs == 0)
        throw Error("stage " + stage_name(s.stage) + " needs a positive number of steps or epochs");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const ModelConfig& m) {
  return {{"d_conv", m.d_conv},
          {"d_rec", m.d_rec},
          {"d_cl", m.d_cl},
          {"n_enc_layers", m.n_enc_layers},
          {"n_dec_layers", m.n_dec_layers},
          {"n_heads", m.n_heads},
          {"ffn_width", m.ffn_width},
          {"n_rgcn_layers", m.n_rgcn_layers},
          {"rgcn_norm", m.rgcn_norm},
          {"temperature", m.temperature},
          {"coarse_weight", m.coarse_weight},
          {"weight_threshold", m.weight_threshold},
          {"weight_floor", m.weight_floor},
          {"max_context_len", m.max_context_len},
          {"max_response_len", m.max_response_len},
          {"max_review_sentences", m.max_review_sentences},
          {"max_sentence_len", m.max_sentence_len},
          {"use_conversation_view", m.use_conversation_view},
          {"use_kg_view", m.use_kg_view},
          {"use_review_view", m.use_review_view},
          {"literal_infonce", m.literal_infonce},
          {"symmetric", m.symmetric},
          {"exclude_same_conversation", m.exclude_same_conversation}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("d_conv", m.d_conv);
  get("d_rec", m.d_rec);
  get("d_cl", m.d_cl);
  get("n_enc_layers", m.n_enc_layers);
  get("n_dec_layers", m.n_dec_layers);
  get("n_heads", m.n_heads);
  get("ffn_width", m.ffn_width);
  get("n_rgcn_layers", m.n_rgcn_layers);
  get("rgcn_norm", m.rgcn_norm);
  get("temperature", m.temperature);
  get("coarse_weight", m.coarse_weight);
  get("weight_threshold", m.weight_threshold);
  get("weight_floor", m.weight_floor);
  get("max_context_len", m.max_context_len);
  get("max_response_len", m.max_response_len);
  get("max_review_sentences", m.max_review_sentences);
  get("max_sentence_len", m.max_sentence_len);
  get("use_conversation_view", m.use_conversation_view);
  get("use_kg_view", m.use_kg_view);
  get("use_review_view", m.use_review_view);
  get("literal_infonce", m.literal_infonce);
  get("symmetric", m.symmetric);
  get("exclude_same_conversation", m.exclude_same_conversation);
  return m;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json schedule = nlohmann::ordered_json::array();
  for (const auto& s : c.schedule)
    schedule.push_back({{"stage", stage_name(s.stage)}, {"steps", s.steps}, {"epochs", s.epochs}});
  return {{"model", to_json(c.model)},
          {"train",
           {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed},
            {"freeze_encoders", c.freeze_encoders},
            {"schedule", schedule}}},
          {"data", {{"dir", c.data_dir}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.learning_rate = t.value("learning_rate", c.learning_rate);
    c.batch_size = t.value("batch_size", c.batch_size);
    c.grad_clip = t.value("grad_clip", c.grad_clip);
    c.seed = t.value("seed", c.seed);
    c.freeze_encoders = t.value("freeze_encoders", c.freeze_encoders);
    if (t.contains("schedule")) {
      c.schedule.clear();
      for (const auto& s : t.at("schedule"))
        c.schedule.push_back({parse_stage(s.at("stage").get<std::string>()), s.value("steps", 0), s.value("epochs", 0)});
    }
  }
  if (j.contains("data")) c.data_dir = j.at("data").value("dir", std::string());
  return c;
}

// ---------------------------------------------------------------------------
// YAML

namespace detail {

template <typename V>
void yaml_get(const YAML::Node& n, const char* key, V& out) {
  if (n[key]) out = n[key].as<V>();
}

inline void yaml_model(const YAML::Node& n, ModelConfig& m) {
  yaml_get(n, "d_conv", m.d_conv);
  yaml_get(n, "d_rec", m.d_rec);
  yaml_get(n, "d_cl", m.d_cl);
  yaml_get(n, "n_enc_layers", m.n_enc_layers);
  yaml_get(n, "n_dec_layers", m.n_dec_layers);
  yaml_get(n, "n_heads", m.n_heads);
  yaml_get(n, "ffn_width", m.ffn_width);
  yaml_get(n, "n_rgcn_layers", m.n_rgcn_layers);
  yaml_get(n, "rgcn_norm", m.rgcn_norm);
  yaml_get(n, "temperature", m.temperature);
  yaml_get(n, "coarse_weight", m.coarse_weight);
  yaml_get(n, "weight_threshold", m.weight_threshold);
  yaml_get(n, "weight_floor", m.weight_floor);
  yaml_get(n, "use_conversation_view", m.use_conversation_view);
  yaml_get(n, "use_kg_view", m.use_kg_view);
  yaml_get(n, "use_review_view", m.use_review_view);
  yaml_get(n, "literal_infonce", m.literal_infonce);
  yaml_get(n, "symmetric", m.symmetric);
  yaml_get(n, "exclude_same_conversation", m.exclude_same_conversation);
}

}  // namespace detail

/// Parses a YAML config. Missing keys keep their defaults.
inline TrainConfig parse_config_yaml(const std::string& text) {
  TrainConfig c;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  try {
    if (auto m = root["model"]) detail::yaml_model(m, c.model);
    if (auto t = root["train"]) {
      detail::yaml_get(t, "learning_rate", c.learning_rate);
      detail::yaml_get(t, "batch_size", c.batch_size);
      detail::yaml_get(t, "grad_clip", c.grad_clip);
      detail::yaml_get(t, "seed", c.seed);
      detail::yaml_get(t, "freeze_encoders", c.freeze_encoders);
      if (auto s = t["schedule"]) {
        c.schedule.clear();
        for (const auto& e : s) {
          StageSpec spec{parse_stage(e["stage"].as<std::string>()), 0, 0};
          detail::yaml_get(e, "steps", spec.steps);
          detail::yaml_get(e, "epochs", spec.epochs);
          c.schedule.push_back(spec);
        }
      }
    }
    if (auto d = root["data"]) {
      detail::yaml_get(d, "dir", c.data_dir);
      detail::yaml_get(d, "max_context_len", c.model.max_context_len);
      detail::yaml_get(d, "max_response_len", c.model.max_response_len);
      detail::yaml_get(d, "max_review_sentences", c.model.max_review_sentences);
      detail::yaml_get(d, "max_sentence_len", c.model.max_sentence_len);
    }
  } catch (const YAML::Exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_yaml(ss.str());
}

inline std::string to_yaml(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  YAML::Emitter out;
  out.SetDoublePrecision(15);
  out << YAML::BeginMap;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "d_conv" << YAML::Value << m.d_conv;
  out << YAML::Key << "d_rec" << YAML::Value << m.d_rec;
  out << YAML::Key << "d_cl" << YAML::Value << m.d_cl;
  out << YAML::Key << "n_enc_layers" << YAML::Value << m.n_enc_layers;
  out << YAML::Key << "n_dec_layers" << YAML::Value << m.n_dec_layers;
  out << YAML::Key << "n_heads" << YAML::Value << m.n_heads;
  out << YAML::Key << "ffn_width" << YAML::Value << m.ffn_width;
  out << YAML::Key << "n_rgcn_layers" << YAML::Value << m.n_rgcn_layers;
  out << YAML::Key << "rgcn_norm" << YAML::Value << m.rgcn_norm;
  out << YAML::Key << "temperature" << YAML::Value << m.temperature;
  out << YAML::Key << "coarse_weight" << YAML::Value << m.coarse_weight;
  out << YAML::Key << "weight_threshold" << YAML::Value << m.weight_threshold;
  out << YAML::Key << "weight_floor" << YAML::Value << m.weight_floor;
  out << YAML::Key << "use_conversation_view" << YAML::Value << m.use_conversation_view;
  out << YAML::Key << "use_kg_view" << YAML::Value << m.use_kg_view;
  out << YAML::Key << "use_review_view" << YAML::Value << m.use_review_view;
  out << YAML::Key << "literal_infonce" << YAML::Value << m.literal_infonce;
  out << YAML::Key << "symmetric" << YAML::Value << m.symmetric;
  out << YAML::Key << "exclude_same_conversation" << YAML::Value << m.exclude_same_conversation;
  out << YAML::EndMap;

  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "learning_rate" << YAML::Value << c.learning_rate;
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "grad_clip" << YAML::Value << c.grad_clip;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "freeze_encoders" << YAML::Value << c.freeze_encoders;
  out << YAML::Key << "schedule" << YAML::Value << YAML::BeginSeq;
  for (const auto& s : c.schedule) {
    out << YAML::BeginMap << YAML::Key << "stage" << YAML::Value << stage_name(s.stage);
    if (s.steps) out << YAML::Key << "steps" << YAML::Value << s.steps;
    if (s.epochs) out << YAML::Key << "epochs" << YAML::Value << s.epochs;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;

  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "dir" << YAML::Value << c.data_dir;
  out << YAML::Key << "max_context_len" << YAML::Value << m.max_context_len;
  out << YAML::Key << "max_response_len" << YAML::Value << m.max_response_len;
  out << YAML::Key << "max_review_sentences" << YAML::Value << m.max_review_sentences;
  out << YAML::Key << "max_sentence_len" << YAML::Value << m.max_sentence_len;
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Ablations

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names = {"full", "w/o Coarse-Fine", "w/o Coarse", "w/o Fine",
                                                 "Multi-task", "w/o CH", "w/o SD", "w/o UD"};
  return names;
}

/// Config for one ablation variant. Names are matched case-insensitively
/// ignoring punctuation, so "w/o Coarse-Fine" and "wo-coarse-fine" agree.
inline TrainConfig ablate(TrainConfig config, const std::string& variant) {
  std::string key;
  for (char ch : variant)
    if (std::isalnum(static_cast<unsigned char>(ch))) key += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  auto drop = [&](std::initializer_list<Stage> stages) {
    std::erase_if(config.schedule, [&](const StageSpec& s) {
      return std::find(stages.begin(), stages.end(), s.stage) != stages.end();
    });
  };
  if (key == "full" || key == "c2crs") {
  } else if (key == "wocoarsefine") {
    drop({Stage::kCoarse, Stage::kFine});
  } else if (key == "wocoarse") {
    drop({Stage::kCoarse});
  } else if (key == "wofine") {
    drop({Stage::kFine});
  } else if (key == "multitask") {
    StageSpec joint{Stage::kMultiTask, 0, 0};
    for (const auto& s : config.schedule) {
      joint.steps += s.steps;
      joint.epochs += s.epochs;
    }
    config.schedule = {joint};
  } else if (key == "woch") {
    config.model.use_conversation_view = false;
  } else if (key == "wosd") {
    config.model.use_kg_view = false;
  } else if (key == "woud") {
    config.model.use_review_view = false;
  } else {
    throw Error("unknown ablation variant '" + variant + "'");
  }
  return config;
}

}  // namespace c2crs
