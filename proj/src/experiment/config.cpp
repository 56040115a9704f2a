#include "ets/experiment/config.hpp"

#include <fstream>
#include <set>

#include "ets/synth/spec_json.hpp"
#include "ets/train/checkpoint.hpp"

namespace ets::experiment {
namespace {

using nlohmann::json;

json overlay(json base, const json& doc, const std::string& what) {
  if (!doc.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, value] : doc.items()) base[key] = value;
  return base;
}

template <class F>
auto wrap(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

void check_keys(const json& doc, const std::set<std::string>& known, const std::string& what) {
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw ConfigError(what + ": unknown key '" + key + "'");
  }
}

std::size_t as_size(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError(key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + " must be a number");
  return v.get<double>();
}

}  // namespace

void ExperimentConfig::validate() const {
  source.validate();
  target.validate();
  encoder.validate();
  pretrain.validate();
  finetune.validate();
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) throw ConfigError("dev_fraction must be in (0, 1)");
  if (n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (eval.replicates < 1) throw ConfigError("eval.replicates must be >= 1");
  if (!(eval.level > 0.0 && eval.level < 1.0)) throw ConfigError("eval.level must be in (0, 1)");
  if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) throw ConfigError("eval.threshold must be in [0, 1]");
  if (workdir.empty()) throw ConfigError("workdir must not be empty");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.source.n_patients = 20000;
  c.source.ecgs_per_patient_mean = 1.0;
  c.source.prevalence = 0.0;
  c.source.seed = 1001;
  c.target.n_patients = 667;
  c.target.prevalence = 0.3;
  c.target.effect_size = 0.07;
  c.target.seed = 2001;
  c.encoder.stem_stride = 16;
  c.pretrain.max_epochs = 8;
  c.finetune.max_epochs = 40;
  return c;
}

json train_config_to_json(const train::TrainConfig& c) {
  return {{"initial_lr", c.initial_lr},       {"floor_lr", c.floor_lr},     {"patience_lr", c.patience_lr},
          {"patience_stop", c.patience_stop}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"tuning_fraction", c.tuning_fraction}, {"mtlr_c", c.mtlr_c}, {"seed", c.seed}};
}

train::TrainConfig train_config_from_json(const json& doc, const train::TrainConfig& base) {
  return wrap("train config", [&] {
    if (!doc.is_object()) throw ConfigError("train config must be a JSON object");
    check_keys(doc,
               {"initial_lr", "floor_lr", "patience_lr", "patience_stop", "batch_size", "max_epochs", "tuning_fraction",
                "mtlr_c", "seed"},
               "train config");
    train::TrainConfig c = base;
    for (const auto& [key, v] : doc.items()) {
      if (key == "initial_lr") c.initial_lr = as_double(v, key);
      if (key == "floor_lr") c.floor_lr = as_double(v, key);
      if (key == "patience_lr") c.patience_lr = as_size(v, key);
      if (key == "patience_stop") c.patience_stop = as_size(v, key);
      if (key == "batch_size") c.batch_size = as_size(v, key);
      if (key == "max_epochs") c.max_epochs = as_size(v, key);
      if (key == "tuning_fraction") c.tuning_fraction = as_double(v, key);
      if (key == "mtlr_c") c.mtlr_c = as_double(v, key);
      if (key == "seed") c.seed = as_size(v, key);
    }
    c.validate();
    return c;
  });
}

json config_to_json(const ExperimentConfig& c) {
  return {{"workdir", c.workdir.string()},
          {"source", synth::spec_to_json(c.source)},
          {"target", synth::spec_to_json(c.target)},
          {"encoder", train::encoder_config_to_json(c.encoder)},
          {"pretrain", train_config_to_json(c.pretrain)},
          {"finetune", train_config_to_json(c.finetune)},
          {"eval",
           {{"replicates", c.eval.replicates},
            {"level", c.eval.level},
            {"threshold", c.eval.threshold},
            {"l1_reduction", c.eval.l1_reduction == metrics::Reduction::sum ? "sum" : "mean"}}},
          {"dev_fraction", c.dev_fraction},
          {"n_seeds", c.n_seeds},
          {"seed", c.seed},
          {"jobs", c.jobs}};
}

ExperimentConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  check_keys(doc,
             {"workdir", "source", "target", "encoder", "pretrain", "finetune", "eval", "dev_fraction", "n_seeds", "seed",
              "jobs"},
             "configuration");
  ExperimentConfig c = default_config();
  if (doc.contains("workdir")) {
    if (!doc.at("workdir").is_string()) throw ConfigError("workdir must be a string");
    c.workdir = doc.at("workdir").get<std::string>();
  }
  if (doc.contains("source")) {
    c.source = wrap("source", [&] { return synth::spec_from_json(overlay(synth::spec_to_json(c.source), doc.at("source"), "source")); });
  }
  if (doc.contains("target")) {
    c.target = wrap("target", [&] { return synth::spec_from_json(overlay(synth::spec_to_json(c.target), doc.at("target"), "target")); });
  }
  if (doc.contains("encoder")) {
    c.encoder = wrap("encoder", [&] {
      return train::encoder_config_from_json(overlay(train::encoder_config_to_json(c.encoder), doc.at("encoder"), "encoder"));
    });
  }
  if (doc.contains("pretrain")) c.pretrain = train_config_from_json(doc.at("pretrain"), c.pretrain);
  if (doc.contains("finetune")) c.finetune = train_config_from_json(doc.at("finetune"), c.finetune);
  if (doc.contains("eval")) {
    const auto& e = doc.at("eval");
    if (!e.is_object()) throw ConfigError("eval must be a JSON object");
    check_keys(e, {"replicates", "level", "threshold", "l1_reduction"}, "eval");
    if (e.contains("replicates")) c.eval.replicates = as_size(e.at("replicates"), "eval.replicates");
    if (e.contains("level")) c.eval.level = as_double(e.at("level"), "eval.level");
    if (e.contains("threshold")) c.eval.threshold = as_double(e.at("threshold"), "eval.threshold");
    if (e.contains("l1_reduction")) {
      const auto& r = e.at("l1_reduction");
      if (r == "sum") {
        c.eval.l1_reduction = metrics::Reduction::sum;
      } else if (r == "mean") {
        c.eval.l1_reduction = metrics::Reduction::mean;
      } else {
        throw ConfigError("eval.l1_reduction must be \"sum\" or \"mean\"");
      }
    }
  }
  if (doc.contains("dev_fraction")) c.dev_fraction = as_double(doc.at("dev_fraction"), "dev_fraction");
  if (doc.contains("n_seeds")) c.n_seeds = as_size(doc.at("n_seeds"), "n_seeds");
  if (doc.contains("seed")) c.seed = as_size(doc.at("seed"), "seed");
  if (doc.contains("jobs")) c.jobs = as_size(doc.at("jobs"), "jobs");
  wrap("configuration", [&] {
    c.validate();
    return 0;
  });
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

}  // namespace ets::experiment
