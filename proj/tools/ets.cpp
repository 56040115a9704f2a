// Command-line driver: generate, pretrain, finetune, evaluate, km, reproduce.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ets/experiment/pipeline.hpp"
#include "ets/synth/spec_json.hpp"

namespace {

namespace fs = std::filesystem;
using namespace ets;
using experiment::Arm;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool quiet = false;
};

experiment::ExperimentConfig resolve(const Common& c) {
  auto cfg = c.config_path.empty() ? experiment::default_config() : experiment::load_config(c.config_path);
  if (const char* env = std::getenv("ETS_SEED")) {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw experiment::ConfigError(std::string("ETS_SEED must be a non-negative integer, got '") + env + "'");
    }
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.jobs) cfg.jobs = *c.jobs;
  cfg.validate();
  return cfg;
}

experiment::Log logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << "\n"; };
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "experiment configuration (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "overrides the configuration seed and ETS_SEED");
  app->add_option("--jobs", c.jobs, "worker cap for bootstrap resampling")->check(CLI::PositiveNumber);
  app->add_flag("-q,--quiet", c.quiet, "suppress progress output");
}

synth::Cohort load_existing(const std::string& dir) {
  if (!fs::is_directory(dir)) throw synth::DataError("cohort directory " + dir + " does not exist");
  return synth::load_cohort(dir);
}

void print_summary(const synth::Cohort& cohort) {
  std::size_t positive = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) positive += cohort.meta(i).label_covid.value_or(0);
  std::cout << "patients " << cohort.patient_count() << ", ecgs " << cohort.size() << ", positive fraction "
            << static_cast<double>(positive) / static_cast<double>(std::max<std::size_t>(cohort.size(), 1))
            << " (configured patient prevalence " << cohort.spec().prevalence << ")\n";
}

void write_artifacts(const experiment::Evaluation& ev, model::EcgModel& m, const fs::path& out) {
  fs::create_directories(out);
  experiment::write_text(out / "report.json", metrics::report_to_json(ev.report));
  if (ev.km) {
    experiment::write_curves_csv(ev, *m.grid(), out / "curves.csv");
    experiment::write_km_csv(*ev.km, out / "km.csv");
  }
}

template <class F>
int guarded(F&& body) {
  try {
    body();
    return kOk;
  } catch (const experiment::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const synth::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const train::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const metrics::MetricError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer learning for ECG-based COVID-19 outcome models on synthetic cohorts"};
  app.require_subcommand(1);
  Common common;

  auto* generate = app.add_subcommand("generate", "write a synthetic cohort container");
  std::string which = "target", out_dir;
  std::size_t repetition = 0;
  add_common(generate, common);
  generate->add_option("--which", which, "source or target cohort")->check(CLI::IsMember({"source", "target"}));
  generate->add_option("--repetition", repetition, "target repetition index");
  generate->add_option("-o,--out", out_dir, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "train a source model");
  std::string cohort_dir, kind_name = "multilabel", ckpt_out;
  add_common(pretrain, common);
  pretrain->add_option("--cohort", cohort_dir, "source cohort directory")->required();
  pretrain->add_option("--kind", kind_name, "multilabel, mortality30 or isd")
      ->check(CLI::IsMember({"multilabel", "mortality30", "isd"}));
  pretrain->add_option("-o,--out", ckpt_out, "checkpoint path")->required();

  auto* finetune = app.add_subcommand("finetune", "train a target model with or without transfer");
  std::string task_name = "diagnosis", source_ckpt;
  bool transfer = false;
  add_common(finetune, common);
  finetune->add_option("--cohort", cohort_dir, "target cohort directory (its development split is used)")->required();
  finetune->add_option("--task", task_name, "diagnosis, mortality30 or isd");
  finetune->add_option("--source", source_ckpt, "source checkpoint for --transfer");
  finetune->add_flag("--transfer,!--no-transfer", transfer, "freeze the source model and train a new head");
  finetune->add_option("--repetition", repetition, "split repetition index");
  finetune->add_option("-o,--out", ckpt_out, "checkpoint path")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score a target model on the holdout split");
  std::string ckpt_in;
  add_common(evaluate, common);
  evaluate->add_option("--cohort", cohort_dir, "target cohort directory")->required();
  evaluate->add_option("--task", task_name, "diagnosis, mortality30 or isd");
  evaluate->add_option("--checkpoint", ckpt_in, "target checkpoint")->required();
  evaluate->add_option("--repetition", repetition, "split repetition index");
  evaluate->add_option("-o,--out", out_dir, "output directory for report.json (and curves.csv, km.csv)")->required();

  auto* km = app.add_subcommand("km", "Kaplan-Meier curve of the positive patients of a cohort");
  add_common(km, common);
  km->add_option("--cohort", cohort_dir, "cohort directory")->required();
  km->add_option("-o,--out", ckpt_out, "CSV path")->required();

  auto* reproduce = app.add_subcommand("reproduce", "run the full paired transfer experiment");
  std::string workdir;
  add_common(reproduce, common);
  reproduce->add_option("--workdir", workdir, "overrides the configured work directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (generate->parsed()) {
    return guarded([&] {
      const auto cfg = resolve(common);
      const auto spec = which == "source" ? cfg.source : experiment::target_spec(cfg, repetition);
      const auto cohort = synth::generate_cohort(spec);
      synth::save_cohort(cohort, out_dir);
      print_summary(cohort);
    });
  }
  if (pretrain->parsed()) {
    return guarded([&] {
      const auto cfg = resolve(common);
      const auto cohort = load_existing(cohort_dir);
      const auto kind = model::kind_from_string(kind_name);
      auto t = experiment::pretrain(cohort, kind, cfg, experiment::source_seed(cfg, kind), logger(common));
      train::save_checkpoint(t.model, t.history, ckpt_out);
      experiment::write_text(ckpt_out + ".history.json", train::history_to_json(t.history).dump(2) + "\n");
      std::cout << "wrote " << ckpt_out << " (" << t.history.size() << " epochs)\n";
    });
  }
  if (finetune->parsed()) {
    return guarded([&] {
      const auto cfg = resolve(common);
      const auto task = experiment::task_from_string(task_name);
      const auto cohort = load_existing(cohort_dir).materialize();
      const auto [dev, holdout] = experiment::dev_holdout(cohort, cfg, repetition);
      const Arm arm = transfer ? Arm::transfer : Arm::scratch;
      std::optional<train::Checkpoint> source;
      if (!source_ckpt.empty()) {
        if (transfer) {
          source = train::load_checkpoint(source_ckpt);
        } else {
          std::cerr << "warning: --source is ignored without --transfer\n";
        }
      } else if (transfer) {
        throw experiment::ConfigError("--transfer requires --source");
      }
      auto ft = experiment::finetune(dev, task, arm, std::move(source), cfg,
                                     experiment::finetune_seed(cfg, repetition, task, arm), logger(common));
      train::save_checkpoint(ft.trained.model, ft.trained.history, ckpt_out);
      experiment::write_text(ckpt_out + ".history.json", train::history_to_json(ft.trained.history).dump(2) + "\n");
      std::cout << "wrote " << ckpt_out << " (" << ft.trained.history.size() << " epochs)\n";
      if (ft.audit) {
        std::cout << "frozen blocks identical to source: " << (ft.audit->frozen_identical ? "yes" : "NO") << " ("
                  << ft.audit->frozen_blocks << " blocks); trainable parameters " << ft.audit->trainable
                  << ", new head " << ft.audit->head_only << "\n";
        if (!ft.audit->frozen_identical || ft.audit->trainable != ft.audit->head_only) {
          throw NumericalError("freeze contract violated");
        }
      }
    });
  }
  if (evaluate->parsed()) {
    return guarded([&] {
      const auto cfg = resolve(common);
      const auto task = experiment::task_from_string(task_name);
      auto ckpt = train::load_checkpoint(ckpt_in);
      if (ckpt.model.kind() != experiment::target_kind(task)) {
        throw experiment::ConfigError("checkpoint holds a " + model::to_string(ckpt.model.kind()) +
                                      " model, task is " + task_name);
      }
      const auto cohort = load_existing(cohort_dir);
      const auto [dev, holdout] = experiment::dev_holdout(cohort, cfg, repetition);
      const auto ev = experiment::evaluate(ckpt.model, holdout, task, cfg.eval,
                                           experiment::eval_seed(cfg, repetition, task), cfg.jobs);
      write_artifacts(ev, ckpt.model, out_dir);
      const auto& head = ev.report.at(ev.headline);
      std::cout << ev.headline << " " << (head ? std::to_string(head->point) : std::string("undefined")) << "\n";
    });
  }
  if (km->parsed()) {
    return guarded([&] {
      const auto cohort = load_existing(cohort_dir);
      const auto rows = synth::select_eval_ecgs(cohort, synth::Task::isd, resolve(common).seed);
      std::vector<double> times;
      std::vector<std::uint8_t> events;
      for (std::size_t r : rows) {
        times.push_back(cohort.meta(r).survival->time);
        events.push_back(!cohort.meta(r).survival->censored);
      }
      experiment::write_km_csv(metrics::kaplan_meier(times, events), ckpt_out);
      std::cout << "wrote " << ckpt_out << " (" << rows.size() << " patients)\n";
    });
  }
  if (reproduce->parsed()) {
    return guarded([&] {
      auto cfg = resolve(common);
      if (!workdir.empty()) cfg.workdir = workdir;
      const auto result = experiment::reproduce(cfg, logger(common));
      std::cout << result.markdown;
    });
  }
  return kUsage;
}
