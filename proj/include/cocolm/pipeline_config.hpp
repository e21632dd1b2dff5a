#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cocolm/encoder.hpp"
#include "cocolm/masking.hpp"
#include "cocolm/synth_kg.hpp"
#include "cocolm/trainer.hpp"
#include "cocolm/walk_sampler.hpp"

namespace cocolm {

// Stage tags for seed derivation; each stage draws from derive_seed(seed, tag).
enum class Stage : std::uint64_t { Synth = 1, Walk = 2, Mask = 3, Train = 4, Check = 5 };

struct PipelineConfig {
  nlohmann::json doc;  // fully resolved settings

  static nlohmann::json defaults() {
    WalkConfig walk;
    TrainConfig train;
    ModelConfig model;
    MaskConfig mask;
    SynthSpec synth;
    return {
        {"seed", 42},
        {"workers", 1},
        {"paths",
         {{"nodes", "nodes.tsv"},
          {"edges", "edges.tsv"},
          {"answer_key", "answer_key.jsonl"},
          {"choices", "choices.jsonl"},
          {"corpus", "corpus.jsonl"},
          {"histogram", "histogram.json"},
          {"vocab", "vocab.tsv"},
          {"instances", "instances.jsonl"},
          {"checkpoint", "model.ckpt"},
          {"trace", "loss_trace.csv"},
          {"metrics", "metrics.json"},
          {"predictions", "predictions.jsonl"},
          {"lexicon", ""}}},
        {"synth",
         {{"num_nodes", synth.num_nodes},
          {"pattern", "uniform"},
          {"out_degree", synth.out_degree},
          {"heldout_degree", synth.heldout_degree},
          {"topic_size", synth.topic_size},
          {"verbs_per_class", synth.verbs_per_class},
          {"choice_tasks", synth.num_choice_tasks}}},
        {"walk",
         {{"min_start_frequency", walk.min_start_frequency},
          {"min_hops", walk.min_hops},
          {"max_hops", walk.max_hops},
          {"transitive_relations", {"Precedence", "Succession", "Reason", "Result"}},
          {"pattern_boost", walk.pattern_boost},
          {"downsample_percentile", walk.downsample_percentile},
          {"downsample_power", walk.downsample_power},
          {"num_sequences", walk.num_sequences},
          {"retry_budget", walk.retry_budget}}},
        {"mask",
         {{"budget_fraction", mask.budget_fraction},
          {"eventuality_probability", mask.eventuality_probability},
          {"min_count", 1}}},
        {"model",
         {{"d_model", model.d_model},
          {"num_layers", model.num_layers},
          {"num_heads", model.num_heads},
          {"d_ff", model.d_ff},
          {"max_len", model.max_len},
          {"dropout_rate", 0.1},
          {"init_scheme", "fan_in"}}},
        {"train",
         {{"preset", "desk"},
          {"learning_rate", train.learning_rate},
          {"weight_decay", train.weight_decay},
          {"batch_size", train.batch_size},
          {"epochs", train.epochs},
          {"max_steps", train.max_steps},
          {"clip_norm", train.clip_norm},
          {"checkpoint_every", train.checkpoint_every},
          {"use_rel", true},
          {"use_occur", true},
          {"use_eventuality_mask", true}}},
    };
  }

  // Merges `overlay` into `base`; every key must already exist in `base`.
  static void merge(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "") {
    for (const auto& [key, value] : overlay.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!base.contains(key)) throw Error(ErrorCode::ConfigParse, "unknown config key '" + path + "'");
      if (base[key].is_object() && value.is_object()) {
        merge(base[key], value, path);
      } else {
        base[key] = value;
      }
    }
  }

  // `key=value`, key dotted; the value is read as JSON when it parses, else as a string.
  static void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(ErrorCode::ConfigParse, "override '" + assignment + "' is not key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      value = text;
    }
    nlohmann::json* node = &doc;
    std::string path;
    for (auto part : detail::split(key, '.')) {
      const std::string k(part);
      path += (path.empty() ? "" : ".") + k;
      if (!node->is_object() || !node->contains(k)) {
        throw Error(ErrorCode::ConfigParse, "unknown config key '" + path + "'");
      }
      node = &(*node)[k];
    }
    if (node->is_object()) throw Error(ErrorCode::ConfigParse, "cannot override section '" + key + "'");
    *node = value;
  }

  static PipelineConfig resolve(const std::string& file, const std::vector<std::string>& overrides) {
    PipelineConfig cfg{defaults()};
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw Error(ErrorCode::ConfigParse, "cannot read config file " + file);
      try {
        merge(cfg.doc, nlohmann::json::parse(in));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigParse, std::string("config file: ") + e.what());
      }
    }
    for (const auto& o : overrides) apply_override(cfg.doc, o);
    // Surface type errors at resolution time.
    try {
      (void)cfg.walk();
      (void)cfg.train();
      (void)cfg.model(kNumReserved + 1);
      (void)cfg.synth();
      (void)cfg.mask();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ConfigParse, e.what());
    }
    return cfg;
  }

  std::uint64_t seed() const { return doc.at("seed").get<std::uint64_t>(); }
  std::uint64_t stage_seed(Stage s) const { return derive_seed(seed(), static_cast<std::uint64_t>(s)); }
  std::string path(const std::string& key) const { return doc.at("paths").at(key).get<std::string>(); }

  WalkConfig walk() const {
    const auto& j = doc.at("walk");
    WalkConfig c;
    c.min_start_frequency = j.at("min_start_frequency").get<std::uint64_t>();
    c.min_hops = j.at("min_hops").get<int>();
    c.max_hops = j.at("max_hops").get<int>();
    c.transitive_relations = RelationSet{};
    for (const auto& r : j.at("transitive_relations")) c.transitive_relations.insert(parse_relation(r.get<std::string>()));
    c.pattern_boost = j.at("pattern_boost").get<double>();
    c.downsample_percentile = j.at("downsample_percentile").get<double>();
    c.downsample_power = j.at("downsample_power").get<double>();
    c.num_sequences = j.at("num_sequences").get<std::size_t>();
    c.retry_budget = j.at("retry_budget").get<std::size_t>();
    c.workers = doc.at("workers").get<unsigned>();
    c.seed = stage_seed(Stage::Walk);
    return c;
  }

  MaskConfig mask() const {
    const auto& j = doc.at("mask");
    MaskConfig c;
    c.budget_fraction = j.at("budget_fraction").get<double>();
    c.eventuality_probability = j.at("eventuality_probability").get<double>();
    return c;
  }

  std::size_t min_count() const { return doc.at("mask").at("min_count").get<std::size_t>(); }

  ModelConfig model(int vocab_size) const {
    const auto& j = doc.at("model");
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = j.at("d_model").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.init_scheme = j.at("init_scheme").get<std::string>();
    return c;
  }

  TrainConfig train() const {
    const auto& j = doc.at("train");
    const auto preset = j.at("preset").get<std::string>();
    if (preset != "desk" && preset != "continual") {
      throw Error(ErrorCode::ConfigParse, "train.preset must be 'desk' or 'continual'");
    }
    TrainConfig c = preset == "continual" ? TrainConfig::continual_preset() : TrainConfig{};
    if (preset == "desk") {
      c.learning_rate = j.at("learning_rate").get<double>();
      c.batch_size = j.at("batch_size").get<int>();
    }
    c.weight_decay = j.at("weight_decay").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.max_steps = j.at("max_steps").get<int>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    c.switches.use_rel = j.at("use_rel").get<bool>();
    c.switches.use_occur = j.at("use_occur").get<bool>();
    c.switches.use_eventuality_mask = j.at("use_eventuality_mask").get<bool>();
    c.seed = stage_seed(Stage::Train);
    return c;
  }

  SynthSpec synth() const {
    const auto& j = doc.at("synth");
    SynthSpec s;
    s.num_nodes = j.at("num_nodes").get<std::size_t>();
    s.set_pattern(j.at("pattern").get<std::string>());
    s.out_degree = j.at("out_degree").get<int>();
    s.heldout_degree = j.at("heldout_degree").get<int>();
    s.topic_size = j.at("topic_size").get<std::size_t>();
    s.verbs_per_class = j.at("verbs_per_class").get<int>();
    s.num_choice_tasks = j.at("choice_tasks").get<std::size_t>();
    s.seed = stage_seed(Stage::Synth);
    return s;
  }
};

}  // namespace cocolm
