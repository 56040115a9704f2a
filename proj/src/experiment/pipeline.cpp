#include "ets/experiment/pipeline.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace ets::experiment {
namespace {

using model::EcgModel;
using model::ModelKind;
using synth::Task;

constexpr std::uint64_t kInitKey = 1;
constexpr std::uint64_t kTrainKey = 2;
constexpr std::uint64_t kHeadKey = 3;
constexpr std::uint64_t kSourceKey = 4;
constexpr std::uint64_t kSplitKey = 5;
constexpr std::uint64_t kFinetuneKey = 6;
constexpr std::uint64_t kEvalKey = 7;
constexpr std::uint64_t kBootstrapKey = 8;
constexpr std::uint64_t kTargetKey = 9;

constexpr std::size_t kEvalBatch = 64;

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::uint64_t kind_key(ModelKind k) { return static_cast<std::uint64_t>(k) + 100; }
std::uint64_t task_key(Task t) { return static_cast<std::uint64_t>(t) + 200; }

train::EpochCallback epoch_logger(const Log& log, const std::string& label) {
  if (!log) return {};
  return [log, label](const train::EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s epoch %zu: train %.5f tuning %.5f lr %.0e", label.c_str(), r.epoch,
                  r.train_loss, r.tuning_loss, r.lr);
    log(buf);
  };
}

std::vector<std::size_t> rows_where(const synth::Cohort& c, const std::function<bool(const synth::RecordMeta&)>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (keep(c.meta(i))) rows.push_back(i);
  }
  return rows;
}

}  // namespace

std::string to_string(Arm arm) { return arm == Arm::scratch ? "scratch" : "transfer"; }

std::string to_string(Task task) {
  switch (task) {
    case Task::diagnosis:
      return "diagnosis";
    case Task::mortality30:
      return "mortality30";
    case Task::isd:
      return "isd";
  }
  return "unknown";
}

Task task_from_string(const std::string& name) {
  for (auto t : {Task::diagnosis, Task::mortality30, Task::isd}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown task '" + name + "' (expected diagnosis, mortality30 or isd)");
}

ModelKind target_kind(Task task) {
  switch (task) {
    case Task::diagnosis:
      return ModelKind::diagnosis;
    case Task::mortality30:
      return ModelKind::mortality30;
    case Task::isd:
      break;
  }
  return ModelKind::isd;
}

ModelKind source_kind(Task task) {
  switch (task) {
    case Task::diagnosis:
      return ModelKind::multilabel;
    case Task::mortality30:
      return ModelKind::mortality30;
    case Task::isd:
      break;
  }
  return ModelKind::isd;
}

std::uint64_t source_seed(const ExperimentConfig& config, ModelKind kind) {
  return derive_seed(config.seed, {kSourceKey, kind_key(kind)});
}

std::uint64_t finetune_seed(const ExperimentConfig& config, std::size_t repetition, Task task, Arm arm) {
  return derive_seed(config.seed, {kFinetuneKey, repetition, task_key(task), arm == Arm::transfer});
}

std::uint64_t eval_seed(const ExperimentConfig& config, std::size_t repetition, Task task) {
  return derive_seed(config.seed, {kEvalKey, repetition, task_key(task)});
}

synth::CohortSpec target_spec(const ExperimentConfig& config, std::size_t repetition) {
  synth::CohortSpec spec = config.target;
  spec.seed = derive_seed(config.target.seed, {kTargetKey, repetition});
  return spec;
}

std::pair<synth::Cohort, synth::Cohort> dev_holdout(const synth::Cohort& cohort, const ExperimentConfig& config,
                                                    std::size_t repetition) {
  return synth::split_by_patient(cohort, config.dev_fraction, derive_seed(config.seed, {kSplitKey, repetition}));
}

synth::Cohort training_population(const synth::Cohort& dev, Task task) {
  if (task == Task::diagnosis) return dev;
  const auto rows = rows_where(dev, [](const synth::RecordMeta& m) { return m.label_covid.value_or(0) == 1; });
  if (rows.empty()) throw synth::DataError("development cohort has no positive episodes for " + to_string(task));
  return dev.subset(rows);
}

Trained pretrain(const synth::Cohort& source, ModelKind kind, const ExperimentConfig& config, std::uint64_t seed,
                 const Log& log) {
  if (kind == ModelKind::diagnosis) throw std::invalid_argument("pretrain: diagnosis is not a source task");
  std::optional<mtlr::TimeGrid> grid;
  if (kind == ModelKind::isd) grid = train::isd_grid(source);
  const std::size_t outputs = kind == ModelKind::multilabel ? source.spec().n_source_labels : 1;
  Trained out{model::build_model(kind, config.encoder, grid, derive_seed(seed, {kInitKey}), outputs), {}};
  train::TrainConfig tc = config.pretrain;
  tc.seed = derive_seed(seed, {kTrainKey});
  out.history = train::pretrain_source(out.model, source, tc, epoch_logger(log, "pretrain " + model::to_string(kind))).history;
  return out;
}

FineTuned finetune(const synth::Cohort& dev, Task task, Arm arm, std::optional<train::Checkpoint> source,
                   const ExperimentConfig& config, std::uint64_t seed, const Log& log) {
  const synth::Cohort population = training_population(dev, task);
  const ModelKind kind = target_kind(task);
  std::optional<mtlr::TimeGrid> grid;
  if (kind == ModelKind::isd) grid = train::isd_grid(population);
  train::TrainConfig tc = config.finetune;
  tc.seed = derive_seed(seed, {kTrainKey});
  const std::string label = to_string(task) + "/" + to_string(arm);

  if (arm == Arm::scratch) {
    if (source) say(log, "warning: " + label + " trains from scratch; the source checkpoint is ignored");
    FineTuned out{{model::build_model(kind, config.encoder, grid, derive_seed(seed, {kInitKey})), {}}, std::nullopt};
    out.trained.history = train::train(out.trained.model, population, tc, epoch_logger(log, label)).history;
    return out;
  }

  if (!source) throw std::invalid_argument(label + ": transfer needs a source checkpoint");
  if (source->model.kind() != source_kind(task)) {
    throw std::invalid_argument(label + ": source checkpoint is " + model::to_string(source->model.kind()) +
                                ", expected " + model::to_string(source_kind(task)));
  }
  std::map<std::string, Tensor> original;
  source->model.visit_parameters([&](const std::string& name, nn::Parameter& p) { original[name] = p.value; });
  source->model.visit_buffers([&](const std::string& name, Tensor& t) { original[name] = t; });

  EcgModel m = train::freeze_for_transfer(std::move(source->model), kind, grid, derive_seed(seed, {kHeadKey}));
  if (kind != ModelKind::isd) train::standardize_head_inputs(m, population, tc.batch_size);
  FreezeAudit audit;
  audit.trainable = m.trainable_parameter_count();
  if (kind == ModelKind::isd) {
    audit.head_only = grid->size() * (config.encoder.isd_head[2] + 1);
  } else {
    const std::size_t h = config.encoder.transfer_hidden;
    audit.head_only = m.fused_width() * h + h + h + 1;
  }
  FineTuned out{{std::move(m), {}}, std::nullopt};
  out.trained.history = train::train(out.trained.model, population, tc, epoch_logger(log, label)).history;

  auto compare = [&](const std::string& name, const Tensor& t) {
    ++audit.frozen_blocks;
    const auto it = original.find(name);
    if (it == original.end() || it->second.shape() != t.shape() ||
        std::memcmp(it->second.data(), t.data(), t.size() * sizeof(double)) != 0) {
      audit.frozen_identical = false;
    }
  };
  out.trained.model.visit_parameters([&](const std::string& name, nn::Parameter& p) {
    if (p.frozen) compare(name, p.value);
  });
  // Every buffer of a transferred model belongs to a frozen stage.
  out.trained.model.visit_buffers(compare);
  out.audit = audit;
  return out;
}

Evaluation evaluate(EcgModel& m, const synth::Cohort& holdout, Task task, const EvalConfig& eval, std::uint64_t seed,
                    std::size_t jobs) {
  if (m.kind() != target_kind(task)) {
    throw std::invalid_argument("evaluate: model is " + model::to_string(m.kind()) + " but the task is " +
                                to_string(task));
  }
  const auto rows = synth::select_eval_ecgs(holdout, task, derive_seed(seed, {kEvalKey}));
  const metrics::BootstrapOptions opts{eval.replicates, derive_seed(seed, {kBootstrapKey}), eval.level, jobs};
  Evaluation out;
  if (task != Task::isd) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (std::size_t start = 0; start < rows.size(); start += kEvalBatch) {
      const std::span<const std::size_t> chunk(rows.data() + start, std::min(rows.size() - start, kEvalBatch));
      const Tensor p = model::classify_forward(m, model::make_batch(holdout, chunk));
      for (double v : p.values()) scores.push_back(v);
    }
    for (std::size_t r : rows) {
      const auto& meta = holdout.meta(r);
      labels.push_back(task == Task::diagnosis ? *meta.label_covid : synth::mortality30_label(*meta.survival));
    }
    out.report = metrics::classification_report(scores, labels, eval.threshold, opts);
    out.headline = "auroc";
    return out;
  }
  std::vector<double> times;
  std::vector<std::uint8_t> censored, events;
  for (std::size_t start = 0; start < rows.size(); start += kEvalBatch) {
    const std::span<const std::size_t> chunk(rows.data() + start, std::min(rows.size() - start, kEvalBatch));
    auto res = model::isd_forward(m, model::make_batch(holdout, chunk));
    for (auto& c : res.curves) out.curves.push_back(std::move(c));
  }
  for (std::size_t r : rows) {
    const auto& meta = holdout.meta(r);
    out.patient_ids.push_back(meta.patient_id);
    times.push_back(meta.survival->time);
    censored.push_back(meta.survival->censored);
    events.push_back(!meta.survival->censored);
  }
  out.report = metrics::survival_report({times, censored}, out.curves, *m.grid(), opts, eval.l1_reduction);
  out.km = metrics::kaplan_meier(times, events);
  out.headline = "c_index";
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

void write_curves_csv(const Evaluation& ev, const mtlr::TimeGrid& grid, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "patient_id,t0";
  for (double t : grid.times()) s << ",t" << fixed(t).substr(0, fixed(t).find('.'));
  s << "\n";
  for (std::size_t i = 0; i < ev.curves.size(); ++i) {
    s << ev.patient_ids[i];
    for (double v : ev.curves[i]) s << "," << fixed(v);
    s << "\n";
  }
  write_text(path, s.str());
}

void write_km_csv(const metrics::KaplanMeier& km, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "time,survival\n0.000000,1.000000\n";
  for (std::size_t i = 0; i < km.times.size(); ++i) s << fixed(km.times[i]) << "," << fixed(km.survival[i]) << "\n";
  write_text(path, s.str());
}

std::optional<double> arm_mean(const std::vector<ComparisonRow>& rows, Task task, Arm arm) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.task == task && r.arm == arm && r.value) sum += r.value->point, ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

ReproduceResult reproduce(const ExperimentConfig& config, const Log& log) {
  config.validate();
  namespace fs = std::filesystem;
  const fs::path ckpt_dir = config.workdir / "checkpoints";
  fs::create_directories(ckpt_dir);
  write_text(config.workdir / "config.json", config_to_json(config).dump(2) + "\n");

  say(log, "generating source cohort (" + std::to_string(config.source.n_patients) + " patients)");
  const synth::Cohort source = synth::generate_cohort(config.source);
  std::map<ModelKind, fs::path> source_paths;
  for (ModelKind kind : {ModelKind::multilabel, ModelKind::mortality30, ModelKind::isd}) {
    say(log, "pretraining source model " + model::to_string(kind));
    Trained t = pretrain(source, kind, config, source_seed(config, kind), log);
    const fs::path path = ckpt_dir / ("source_" + model::to_string(kind) + ".etsv");
    train::save_checkpoint(t.model, t.history, path);
    write_text(path.string() + ".history.json", train::history_to_json(t.history).dump(2) + "\n");
    source_paths[kind] = path;
  }

  ReproduceResult result;
  for (std::size_t rep = 0; rep < config.n_seeds; ++rep) {
    const synth::CohortSpec spec = target_spec(config, rep);
    say(log, "repetition " + std::to_string(rep + 1) + "/" + std::to_string(config.n_seeds) + ": target cohort");
    const synth::Cohort cohort = synth::generate_cohort(spec).materialize();
    const auto [dev, holdout] = dev_holdout(cohort, config, rep);
    const fs::path rep_dir = config.workdir / ("rep_" + std::to_string(rep));
    fs::create_directories(rep_dir);
    for (Task task : {Task::diagnosis, Task::mortality30, Task::isd}) {
      for (Arm arm : {Arm::scratch, Arm::transfer}) {
        std::optional<train::Checkpoint> src;
        if (arm == Arm::transfer) src = train::load_checkpoint(source_paths.at(source_kind(task)));
        FineTuned ft = finetune(dev, task, arm, std::move(src), config, finetune_seed(config, rep, task, arm), log);
        if (ft.audit) result.audits.push_back(*ft.audit);
        const std::string stem = to_string(task) + "_" + to_string(arm);
        train::save_checkpoint(ft.trained.model, ft.trained.history, rep_dir / (stem + ".etsv"));
        write_text(rep_dir / (stem + ".history.json"), train::history_to_json(ft.trained.history).dump(2) + "\n");

        ComparisonRow row{task, arm, rep, "", std::nullopt};
        try {
          const Evaluation ev =
              evaluate(ft.trained.model, holdout, task, config.eval, eval_seed(config, rep, task), config.jobs);
          write_text(rep_dir / (stem + ".report.json"), metrics::report_to_json(ev.report));
          if (ev.km) {
            write_curves_csv(ev, *ft.trained.model.grid(), rep_dir / (stem + ".curves.csv"));
            write_km_csv(*ev.km, rep_dir / (stem + ".km.csv"));
          }
          row.metric = ev.headline;
          row.value = ev.report.at(ev.headline);
        } catch (const metrics::MetricError& e) {
          row.metric = task == Task::isd ? "c_index" : "auroc";
          say(log, "warning: " + stem + " metric undefined on repetition " + std::to_string(rep) + ": " + e.what());
        }
        say(log, stem + " rep " + std::to_string(rep) + ": " + row.metric + " = " +
                     (row.value ? fixed(row.value->point) : std::string("undefined")));
        result.rows.push_back(row);
      }
    }
  }

  std::ostringstream csv, md;
  csv << "task,arm,repetition,metric,point,ci_lo,ci_hi\n";
  for (const auto& r : result.rows) {
    csv << to_string(r.task) << "," << to_string(r.arm) << "," << r.repetition << "," << r.metric << ",";
    if (r.value) {
      csv << fixed(r.value->point) << "," << fixed(r.value->ci_lo) << "," << fixed(r.value->ci_hi) << "\n";
    } else {
      csv << ",,\n";
    }
  }
  md << "| task | metric | scratch | transfer | difference |\n|---|---|---|---|---|\n";
  for (Task task : {Task::diagnosis, Task::mortality30, Task::isd}) {
    const auto a = arm_mean(result.rows, task, Arm::scratch);
    const auto b = arm_mean(result.rows, task, Arm::transfer);
    md << "| " << to_string(task) << " | " << (task == Task::isd ? "c_index" : "auroc") << " | "
       << (a ? fixed(*a) : "n/a") << " | " << (b ? fixed(*b) : "n/a") << " | "
       << (a && b ? fixed(*b - *a) : "n/a") << " |\n";
  }
  md << "\n| task | arm | repetition | point | CI |\n|---|---|---|---|---|\n";
  for (const auto& r : result.rows) {
    md << "| " << to_string(r.task) << " | " << to_string(r.arm) << " | " << r.repetition << " | ";
    if (r.value) {
      md << fixed(r.value->point) << " | [" << fixed(r.value->ci_lo) << ", " << fixed(r.value->ci_hi) << "] |\n";
    } else {
      md << "n/a | n/a |\n";
    }
  }
  result.csv = csv.str();
  result.markdown = md.str();
  write_text(config.workdir / "comparison.csv", result.csv);
  write_text(config.workdir / "comparison.md", result.markdown);
  return result;
}

}  // namespace ets::experiment
