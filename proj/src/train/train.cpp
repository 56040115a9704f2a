#include "ets/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ets/train/losses.hpp"

namespace ets::train {
namespace {

using model::EcgModel;
using model::ModelKind;

constexpr std::uint64_t kSplitKey = 0x73706c6974ULL;
constexpr std::uint64_t kShuffleKey = 0x73687566ULL;
constexpr std::uint64_t kDropoutKey = 0x64726f70ULL;

enum class Stage { full, head, theta };

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t w = t.dim(1);
  Tensor out({rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(t.data() + rows[i] * w, w, out.data() + i * w);
  return out;
}

/// Per-epoch data for one side of the split.
struct Partition {
  synth::Cohort cohort;
  Tensor targets;                         // classifiers
  std::vector<mtlr::EncodedLabel> encoded;  // isd
  Tensor cache;                           // fused features or z when frozen
};

std::vector<Tensor> snapshot(EcgModel& m) {
  std::vector<Tensor> out;
  m.visit_parameters([&](const std::string&, nn::Parameter& p) { out.push_back(p.value); });
  m.visit_buffers([&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

void restore(EcgModel& m, const std::vector<Tensor>& saved) {
  std::size_t i = 0;
  m.visit_parameters([&](const std::string&, nn::Parameter& p) { p.value = saved.at(i++); });
  m.visit_buffers([&](const std::string&, Tensor& t) { t = saved.at(i++); });
}

class Trainer {
 public:
  Trainer(EcgModel& model, const TrainConfig& config) : model_(model), config_(config) {
    const bool isd = model.kind() == ModelKind::isd;
    if (isd && model.trunk_frozen() && model.head_frozen()) {
      stage_ = Stage::theta;
    } else if (model.trunk_frozen()) {
      stage_ = Stage::head;
    }
  }

  void prepare(Partition& part) const {
    if (model_.kind() == ModelKind::isd) {
      for (const auto& s : survival_targets(part.cohort)) part.encoded.push_back(mtlr::encode_label(s, *model_.grid()));
    } else {
      part.targets = classification_targets(part.cohort, model_.kind(), model_.outputs());
    }
    if (stage_ == Stage::full) return;
    const nn::ForwardContext eval{nn::Mode::eval, nullptr};
    const std::size_t n = part.cohort.size();
    for (std::size_t start = 0; start < n; start += config_.batch_size) {
      const auto rows = range(start, std::min(n, start + config_.batch_size));
      const auto batch = model::make_batch(part.cohort, rows);
      const Tensor out = stage_ == Stage::theta ? model_.forward(batch, eval) : model_.trunk_forward(batch, eval);
      if (part.cache.empty()) part.cache = Tensor({n, out.dim(1)});
      std::copy_n(out.data(), out.size(), part.cache.data() + start * out.dim(1));
    }
  }

  Tensor forward(const Partition& part, std::span<const std::size_t> rows, const nn::ForwardContext& ctx) {
    switch (stage_) {
      case Stage::full:
        return model_.forward(model::make_batch(part.cohort, rows), ctx);
      case Stage::head:
        return model_.head_forward(gather_rows(part.cache, rows), ctx);
      case Stage::theta:
        break;
    }
    return gather_rows(part.cache, rows);
  }

  /// Loss on the given rows; with `learn`, also backpropagates.
  double loss(const Partition& part, std::span<const std::size_t> rows, const Tensor& out, bool learn) {
    if (model_.kind() == ModelKind::isd) {
      std::vector<mtlr::EncodedLabel> labels;
      for (std::size_t r : rows) labels.push_back(part.encoded[r]);
      const auto l = mtlr_minibatch_loss(model_.theta().value, out, labels, config_.mtlr_c, n_train_);
      if (learn) {
        backward(l.grad_features);
        auto& theta = model_.theta();
        if (!theta.frozen) {
          for (std::size_t i = 0; i < theta.grad.size(); ++i) theta.grad[i] += l.grad_theta[i];
        }
      }
      return l.value;
    }
    const auto l = bce_with_logits(out, gather_rows(part.targets, rows));
    if (learn) backward(l.grad);
    return l.value;
  }

  double tuning_loss(const Partition& part) {
    const nn::ForwardContext eval{nn::Mode::eval, nullptr};
    const std::size_t n = part.cohort.size();
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config_.batch_size) {
      const auto rows = range(start, std::min(n, start + config_.batch_size));
      total += loss(part, rows, forward(part, rows, eval), false) * static_cast<double>(rows.size());
    }
    return total / static_cast<double>(n);
  }

  TrainResult run(Partition& train_part, Partition& tune_part, const EpochCallback& on_epoch) {
    n_train_ = train_part.cohort.size();
    prepare(train_part);
    prepare(tune_part);
    const auto schedule = config_.schedule();
    AdamState adam;
    double lr = config_.initial_lr;
    TrainResult result;
    result.best_tuning_loss = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best = snapshot(model_);
    std::vector<double> tuning;
    auto visit = [&](const nn::ParameterVisitor& v) { model_.visit_parameters(v); };

    for (std::size_t epoch = 1; epoch <= config_.max_epochs; ++epoch) {
      Rng shuffle = make_stream(config_.seed, {kShuffleKey, epoch});
      const auto order = shuffled_indices(n_train_, shuffle);
      double sum = 0.0;
      std::size_t batch_index = 0;
      for (std::size_t start = 0; start < n_train_; start += config_.batch_size, ++batch_index) {
        const std::span<const std::size_t> rows(order.data() + start, std::min(n_train_, start + config_.batch_size) - start);
        model_.zero_grad();
        Rng drop = make_stream(config_.seed, {kDropoutKey, epoch, batch_index});
        const Tensor out = forward(train_part, rows, {nn::Mode::train, &drop});
        const double value = loss(train_part, rows, out, true);
        if (!std::isfinite(value)) {
          std::ostringstream msg;
          msg << "training loss is not finite at epoch " << epoch << ", batch " << batch_index;
          throw NumericalError(msg.str());
        }
        adam_step(visit, adam, lr);
        sum += value * static_cast<double>(rows.size());
      }
      EpochRecord rec{epoch, sum / static_cast<double>(n_train_), tuning_loss(tune_part), lr};
      if (!std::isfinite(rec.tuning_loss)) {
        throw NumericalError("tuning loss is not finite at epoch " + std::to_string(epoch));
      }
      result.history.push_back(rec);
      tuning.push_back(rec.tuning_loss);
      if (rec.tuning_loss < result.best_tuning_loss) {
        result.best_tuning_loss = rec.tuning_loss;
        result.best_epoch = epoch;
        best = snapshot(model_);
      }
      if (on_epoch) on_epoch(rec);
      const auto decision = lr_schedule_update(tuning, lr, schedule);
      lr = decision.lr;
      if (decision.stop) break;
    }
    restore(model_, best);
    return result;
  }

 private:
  static std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> v;
    for (std::size_t i = lo; i < hi; ++i) v.push_back(i);
    return v;
  }

  void backward(const Tensor& grad) {
    if (stage_ == Stage::full) {
      model_.backward(grad);
    } else if (stage_ == Stage::head) {
      model_.head_backward(grad);
    }
  }

  EcgModel& model_;
  const TrainConfig& config_;
  Stage stage_ = Stage::full;
  std::size_t n_train_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  schedule().validate();
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  if (!(tuning_fraction > 0.0 && tuning_fraction < 1.0)) {
    throw std::invalid_argument("train config: tuning_fraction must be in (0, 1)");
  }
  if (!(mtlr_c >= 0.0) || !std::isfinite(mtlr_c)) throw std::invalid_argument("train config: mtlr_c must be >= 0");
}

Tensor classification_targets(const synth::Cohort& cohort, ModelKind kind, std::size_t outputs) {
  if (!model::is_classifier(kind)) throw std::invalid_argument("classification_targets: isd is not a classifier");
  Tensor y({cohort.size(), outputs});
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& m = cohort.meta(i);
    switch (kind) {
      case ModelKind::diagnosis:
        if (!m.label_covid) throw synth::DataError("record of " + m.patient_id + " has no diagnosis label");
        y.at(i, 0) = *m.label_covid;
        break;
      case ModelKind::mortality30:
        if (!m.survival) throw synth::DataError("record of " + m.patient_id + " has no survival label");
        y.at(i, 0) = synth::mortality30_label(*m.survival);
        break;
      case ModelKind::multilabel:
        if (m.source_labels.size() != outputs) {
          throw synth::DataError("record of " + m.patient_id + " has " + std::to_string(m.source_labels.size()) +
                                 " source labels, model expects " + std::to_string(outputs));
        }
        for (std::size_t k = 0; k < outputs; ++k) y.at(i, k) = m.source_labels[k];
        break;
      case ModelKind::isd:
        break;
    }
  }
  return y;
}

std::vector<mtlr::SurvivalLabel> survival_targets(const synth::Cohort& cohort) {
  std::vector<mtlr::SurvivalLabel> out;
  out.reserve(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& m = cohort.meta(i);
    if (!m.survival) throw synth::DataError("record of " + m.patient_id + " has no survival label");
    out.push_back(*m.survival);
  }
  return out;
}

mtlr::TimeGrid isd_grid(const synth::Cohort& cohort) {
  std::vector<double> times;
  std::vector<std::uint8_t> censored;
  for (const auto& s : survival_targets(cohort)) {
    times.push_back(s.time);
    censored.push_back(s.censored);
  }
  return mtlr::build_time_grid(times, censored);
}

TrainResult train(EcgModel& model, const synth::Cohort& dev, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (dev.patient_count() < 2) throw synth::DataError("training needs at least two patients");
  auto [train_set, tune_set] = synth::split_by_patient(dev, 1.0 - config.tuning_fraction,
                                                       derive_seed(config.seed, {kSplitKey}));
  if (train_set.empty() || tune_set.empty()) throw synth::DataError("training or tuning partition is empty");
  Partition train_part{std::move(train_set), {}, {}, {}};
  Partition tune_part{std::move(tune_set), {}, {}, {}};
  Trainer trainer(model, config);
  return trainer.run(train_part, tune_part, on_epoch);
}

TrainResult pretrain_source(EcgModel& model, const synth::Cohort& source, const TrainConfig& config,
                            const EpochCallback& on_epoch) {
  if (model.kind() == ModelKind::diagnosis) {
    throw std::invalid_argument("pretrain_source: source tasks are multilabel, mortality30 or isd");
  }
  return train(model, source, config, on_epoch);
}

EcgModel freeze_for_transfer(EcgModel source, ModelKind target, std::optional<mtlr::TimeGrid> grid,
                             std::uint64_t seed) {
  if (target == ModelKind::isd) {
    if (!grid) throw std::invalid_argument("freeze_for_transfer: isd target needs a time grid");
    source.retarget_isd(*grid);
  } else {
    source.rehead_for_transfer(target, seed);
  }
  return source;
}

void standardize_head_inputs(EcgModel& model, const synth::Cohort& population, std::size_t batch_size) {
  if (!model.transferred() || !model::is_classifier(model.kind())) {
    throw std::invalid_argument("standardize_head_inputs: needs a re-headed classification model");
  }
  if (population.empty()) throw synth::DataError("standardize_head_inputs: empty population");
  if (batch_size < 1) throw std::invalid_argument("standardize_head_inputs: batch_size must be >= 1");
  const std::size_t f = model.fused_width();
  std::vector<double> sum(f, 0.0), sq(f, 0.0);
  const std::size_t n = population.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> rows(std::min(n, start + batch_size) - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor fused = model.trunk_forward(model::make_batch(population, rows), {nn::Mode::eval, nullptr});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < f; ++j) sum[j] += fused.at(r, j);
    }
  }
  std::vector<double> mean(f);
  for (std::size_t j = 0; j < f; ++j) mean[j] = sum[j] / static_cast<double>(n);
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> rows(std::min(n, start + batch_size) - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor fused = model.trunk_forward(model::make_batch(population, rows), {nn::Mode::eval, nullptr});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < f; ++j) sq[j] += (fused.at(r, j) - mean[j]) * (fused.at(r, j) - mean[j]);
    }
  }
  auto& first = dynamic_cast<nn::Dense&>(model.head()[0]);
  Tensor& w = first.weight().value;
  Tensor& b = first.bias().value;
  for (std::size_t j = 0; j < f; ++j) {
    const double sd = std::sqrt(sq[j] / static_cast<double>(n));
    // Constant features keep their weights.
    const double scale = sd > 1e-8 ? 1.0 / sd : 1.0;
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      w.at(o, j) *= scale;
      b[o] -= w.at(o, j) * mean[j];
    }
  }
}

}  // namespace ets::train
