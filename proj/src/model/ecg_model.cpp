#include "ets/model/ecg_model.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace ets::model {
namespace {

constexpr std::uint64_t kInitKey = 0x696e6974ULL;
constexpr std::uint64_t kHeadKey = 0x68656164ULL;

void require_classifier(const EcgModel& m, const char* what) {
  if (!is_classifier(m.kind())) throw std::invalid_argument(std::string(what) + ": model is not a classifier");
}

}  // namespace

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::diagnosis:
      return "diagnosis";
    case ModelKind::mortality30:
      return "mortality30";
    case ModelKind::isd:
      return "isd";
    case ModelKind::multilabel:
      return "multilabel";
  }
  return "unknown";
}

ModelKind kind_from_string(const std::string& name) {
  for (auto k : {ModelKind::diagnosis, ModelKind::mortality30, ModelKind::isd, ModelKind::multilabel}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown model kind '" + name + "'");
}

bool is_classifier(ModelKind kind) { return kind != ModelKind::isd; }

void EncoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("encoder config: " + what); };
  if (kernel < 1) fail("kernel must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (stem_channels < 1 || stem_stride < 1) fail("stem channels and stride must be >= 1");
  for (const auto& b : blocks) {
    if (b.channels < 1 || b.stride < 1) fail("block channels and strides must be >= 1");
  }
  if (dense_units < 1 || tabular_units < 1 || transfer_hidden < 1) fail("layer widths must be >= 1");
  for (auto w : isd_head) {
    if (w < 1) fail("isd head widths must be >= 1");
  }
}

Tensor tabular_features(double age, std::uint8_t sex) { return Tensor({2}, {(age - 65.0) / 15.0, sex ? 1.0 : 0.0}); }

Batch make_batch(const synth::Cohort& cohort, std::span<const std::size_t> rows) {
  const std::size_t n = rows.size();
  Batch b{Tensor({n, synth::kLeads, synth::kModelSamples}), Tensor({n, 2})};
  const std::size_t block = synth::kLeads * synth::kModelSamples;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor v = cohort.voltages(rows[i]);
    std::memcpy(b.ecg.data() + i * block, v.data(), block * sizeof(double));
    const auto& m = cohort.meta(rows[i]);
    const Tensor t = tabular_features(m.age, m.sex);
    b.tabular.at(i, 0) = t[0];
    b.tabular.at(i, 1) = t[1];
  }
  return b;
}

EcgModel::EcgModel(ModelKind kind, EncoderConfig config, std::size_t outputs, std::optional<mtlr::TimeGrid> grid)
    : kind_(kind), config_(std::move(config)), outputs_(outputs), grid_(std::move(grid)) {
  config_.validate();
  if (kind_ == ModelKind::isd && !grid_) throw std::invalid_argument("build_model: isd requires a time grid");
  if (is_classifier(kind_) && outputs_ < 1) throw std::invalid_argument("build_model: need at least one output");
  if (kind_ != ModelKind::multilabel && is_classifier(kind_) && outputs_ != 1) {
    throw std::invalid_argument("build_model: binary classifiers have exactly one output");
  }

  const auto& c = config_;
  encoder_.add<nn::Conv1d>(synth::kLeads, c.stem_channels, c.kernel, c.stem_stride);
  encoder_.add<nn::BatchNorm1d>(c.stem_channels);
  encoder_.add<nn::Relu>();
  encoder_.add<nn::Dropout>(c.dropout);
  std::size_t channels = c.stem_channels;
  for (const auto& b : c.blocks) {
    encoder_.add<nn::ResidualBlock>(channels, b.channels, c.kernel, b.stride, c.dropout);
    channels = b.channels;
  }
  encoder_.add<nn::GlobalAvgPool>();
  encoder_.add<nn::Dense>(channels, c.dense_units);

  tabular_.add<nn::Dense>(2, c.tabular_units);
  tabular_.add<nn::Relu>();
  build_head();
}

void EcgModel::build_head() {
  head_ = nn::Sequential();
  const std::size_t fused = fused_width();
  if (kind_ == ModelKind::isd) {
    const auto& h = config_.isd_head;
    head_.add<nn::Relu>();
    head_.add<nn::Dense>(fused, h[0]);
    head_.add<nn::Relu>();
    head_.add<nn::Dense>(h[0], h[1]);
    head_.add<nn::Relu>();
    head_.add<nn::Dense>(h[1], h[2]);
    if (theta_.value.size() == 0 || theta_.value.dim(0) != grid_->size()) {
      theta_ = nn::Parameter(Tensor({grid_->size(), h[2] + 1}));
    }
  } else if (transferred_) {
    head_.add<nn::Dense>(fused, config_.transfer_hidden);
    head_.add<nn::Relu>();
    head_.add<nn::Dense>(config_.transfer_hidden, outputs_);
  } else {
    head_.add<nn::Dense>(fused, outputs_);
  }
}

void EcgModel::initialize(std::uint64_t seed) {
  Rng rng = make_stream(seed, {kInitKey});
  encoder_.initialize(rng);
  tabular_.initialize(rng);
  head_.initialize(rng);
  if (kind_ == ModelKind::isd) theta_.value.fill(0.0);
}

nn::ForwardContext EcgModel::stage_context(bool frozen, const nn::ForwardContext& ctx) const {
  if (frozen) return {nn::Mode::eval, nullptr};
  return ctx;
}

Tensor EcgModel::trunk_forward(const Batch& batch, const nn::ForwardContext& ctx) {
  if (batch.ecg.rank() != 3 || batch.ecg.dim(1) != synth::kLeads) {
    throw ShapeError("ecg batch must be [N, 12, L], got " + shape_to_string(batch.ecg.shape()));
  }
  const std::size_t n = batch.ecg.dim(0);
  expect_shape(batch.tabular, {n, 2}, "tabular batch");
  const auto sctx = stage_context(trunk_frozen(), ctx);
  const Tensor e = encoder_.forward(batch.ecg, sctx);
  const Tensor t = tabular_.forward(batch.tabular, sctx);
  const std::size_t d = e.dim(1), k = t.dim(1);
  Tensor fused({n, d + k});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(e.data() + i * d, d, fused.data() + i * (d + k));
    std::copy_n(t.data() + i * k, k, fused.data() + i * (d + k) + d);
  }
  return fused;
}

Tensor EcgModel::head_forward(const Tensor& fused, const nn::ForwardContext& ctx) {
  expect_shape(fused, {fused.dim(0), fused_width()}, "fused features");
  return head_.forward(fused, stage_context(head_frozen(), ctx));
}

Tensor EcgModel::forward(const Batch& batch, const nn::ForwardContext& ctx) {
  return head_forward(trunk_forward(batch, ctx), ctx);
}

Tensor EcgModel::head_backward(const Tensor& grad_output) { return head_.backward(grad_output); }

void EcgModel::backward(const Tensor& grad_output) {
  if (trunk_frozen()) {
    if (!head_frozen()) head_.backward(grad_output);
    return;
  }
  const Tensor g = head_.backward(grad_output);
  const std::size_t n = g.dim(0), d = config_.dense_units, k = config_.tabular_units;
  Tensor ge({n, d}), gt({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(g.data() + i * (d + k), d, ge.data() + i * d);
    std::copy_n(g.data() + i * (d + k) + d, k, gt.data() + i * k);
  }
  encoder_.backward(ge);
  tabular_.backward(gt);
}

bool EcgModel::trunk_frozen() { return encoder_.fully_frozen() && tabular_.fully_frozen(); }
bool EcgModel::head_frozen() { return head_.fully_frozen(); }

void EcgModel::visit_parameters(const nn::ParameterVisitor& visit) {
  encoder_.visit_parameters("encoder", visit);
  tabular_.visit_parameters("tabular", visit);
  head_.visit_parameters("head", visit);
  if (kind_ == ModelKind::isd) visit("mtlr.theta", theta_);
}

void EcgModel::visit_buffers(const nn::BufferVisitor& visit) {
  encoder_.visit_buffers("encoder", visit);
  tabular_.visit_buffers("tabular", visit);
  head_.visit_buffers("head", visit);
}

std::size_t EcgModel::parameter_count() {
  std::size_t n = 0;
  visit_parameters([&](const std::string&, nn::Parameter& p) { n += p.value.size(); });
  return n;
}

std::size_t EcgModel::trainable_parameter_count() {
  std::size_t n = 0;
  visit_parameters([&](const std::string&, nn::Parameter& p) {
    if (!p.frozen) n += p.value.size();
  });
  return n;
}

void EcgModel::zero_grad() {
  visit_parameters([](const std::string&, nn::Parameter& p) { p.zero_grad(); });
}

void EcgModel::rehead_for_transfer(ModelKind target, std::uint64_t seed) {
  if (!is_classifier(kind_) || !is_classifier(target) || target == ModelKind::multilabel) {
    throw std::invalid_argument("transfer: classification targets need a classification source (got " +
                                to_string(kind_) + " -> " + to_string(target) + ")");
  }
  encoder_.set_frozen(true);
  tabular_.set_frozen(true);
  kind_ = target;
  outputs_ = 1;
  transferred_ = true;
  build_head();
  Rng rng = make_stream(seed, {kHeadKey});
  head_.initialize(rng);
}

void EcgModel::retarget_isd(const mtlr::TimeGrid& grid) {
  if (kind_ != ModelKind::isd) {
    throw std::invalid_argument("transfer: isd target needs an isd source (got " + to_string(kind_) + ")");
  }
  encoder_.set_frozen(true);
  tabular_.set_frozen(true);
  head_.set_frozen(true);
  grid_ = grid;
  theta_ = nn::Parameter(Tensor({grid.size(), config_.isd_head[2] + 1}));
  transferred_ = true;
}

void EcgModel::set_transferred_layout(bool transferred) {
  transferred_ = transferred;
  build_head();
}

EcgModel build_model(ModelKind kind, const EncoderConfig& config, std::optional<mtlr::TimeGrid> grid,
                     std::uint64_t seed, std::size_t outputs) {
  EcgModel m(kind, config, kind == ModelKind::isd ? 0 : outputs, std::move(grid));
  m.initialize(seed);
  return m;
}

Tensor classify_forward(EcgModel& model, const Batch& batch) {
  require_classifier(model, "classify_forward");
  return nn::sigmoid_forward(model.forward(batch, {nn::Mode::eval, nullptr}));
}

IsdOutput isd_forward(EcgModel& model, const Batch& batch) {
  if (model.kind() != ModelKind::isd) throw std::invalid_argument("isd_forward: model kind is not isd");
  IsdOutput out;
  out.features = model.forward(batch, {nn::Mode::eval, nullptr});
  const Tensor aug = mtlr::augment(out.features);
  const std::size_t w = aug.dim(1);
  for (std::size_t i = 0; i < aug.dim(0); ++i) {
    out.curves.push_back(mtlr::survival_curve(model.theta().value, std::span<const double>(aug.data() + i * w, w)));
  }
  return out;
}

}  // namespace ets::model
