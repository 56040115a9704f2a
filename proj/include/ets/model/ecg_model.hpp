#pragma once

// ECG encoder with tabular fusion and the three task heads.
//
//   ecg [N,12,L] -> stem conv/BN/ReLU -> 4 residual blocks -> GAP -> dense  -+
//   (age, sex) [N,2] -> dense(10) -> ReLU -----------------------------------+-> concat -> head
//
// Classification heads map the fused features to logits (sigmoid applied on
// output). The ISD head is ReLU -> FC -> ReLU -> FC -> ReLU -> FC, whose output
// z feeds an MTLR block over the model's time grid.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ets/mtlr/mtlr.hpp"
#include "ets/nn/layers.hpp"
#include "ets/synth/cohort.hpp"

namespace ets::model {

enum class ModelKind { diagnosis, mortality30, isd, multilabel };

std::string to_string(ModelKind kind);
ModelKind kind_from_string(const std::string& name);
bool is_classifier(ModelKind kind);

struct BlockConfig {
  std::size_t channels = 16;
  std::size_t stride = 2;
  bool operator==(const BlockConfig&) const = default;
};

struct EncoderConfig {
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 1;
  std::size_t kernel = 16;
  double dropout = 0.2;
  std::array<BlockConfig, 4> blocks{{{16, 2}, {32, 2}, {32, 2}, {64, 2}}};
  std::size_t dense_units = 32;
  std::size_t tabular_units = 10;
  std::array<std::size_t, 3> isd_head{32, 32, 16};  // widths of the three FC layers
  std::size_t transfer_hidden = 32;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Model inputs for a minibatch.
struct Batch {
  Tensor ecg;      // [N, 12, L]
  Tensor tabular;  // [N, 2]: (age - 65) / 15, sex
};

Tensor tabular_features(double age, std::uint8_t sex);

/// Gathers preprocessed voltages and tabular features for the given rows.
Batch make_batch(const synth::Cohort& cohort, std::span<const std::size_t> rows);

class EcgModel {
 public:
  EcgModel(ModelKind kind, EncoderConfig config, std::size_t outputs, std::optional<mtlr::TimeGrid> grid);

  ModelKind kind() const { return kind_; }
  const EncoderConfig& config() const { return config_; }
  std::size_t outputs() const { return outputs_; }
  const std::optional<mtlr::TimeGrid>& grid() const { return grid_; }
  bool transferred() const { return transferred_; }
  std::size_t fused_width() const { return config_.dense_units + config_.tabular_units; }

  nn::Sequential& encoder() { return encoder_; }
  nn::Sequential& tabular() { return tabular_; }
  nn::Sequential& head() { return head_; }
  nn::Parameter& theta() { return theta_; }  // [m, z + 1], isd only

  void initialize(std::uint64_t seed);

  /// Encoder and tabular branches; returns fused features [N, D + 10].
  /// A fully frozen trunk runs in eval mode.
  Tensor trunk_forward(const Batch& batch, const nn::ForwardContext& ctx);
  /// Logits [N, outputs] for classifiers, z [N, zdim] for isd. A fully frozen
  /// head runs in eval mode.
  Tensor head_forward(const Tensor& fused, const nn::ForwardContext& ctx);
  Tensor forward(const Batch& batch, const nn::ForwardContext& ctx);

  /// Backpropagates d(loss)/d(head output). Stops at the first fully frozen
  /// stage, since nothing upstream of it can learn.
  void backward(const Tensor& grad_output);
  /// Backward through the head only; returns d(loss)/d(fused).
  Tensor head_backward(const Tensor& grad_output);

  bool trunk_frozen();
  bool head_frozen();

  void visit_parameters(const nn::ParameterVisitor& visit);
  void visit_buffers(const nn::BufferVisitor& visit);
  std::size_t parameter_count();
  std::size_t trainable_parameter_count();
  void zero_grad();

  /// Classification re-heading for transfer: every existing parameter frozen,
  /// source output layer replaced by FC(transfer_hidden) -> ReLU -> dense(1).
  void rehead_for_transfer(ModelKind target, std::uint64_t seed);
  /// ISD transfer: everything frozen except a zero-initialized MTLR block on
  /// `grid`.
  void retarget_isd(const mtlr::TimeGrid& grid);

  /// Rebuilds the head layout without initializing it (checkpoint loading).
  void set_transferred_layout(bool transferred);

 private:
  nn::ForwardContext stage_context(bool frozen, const nn::ForwardContext& ctx) const;
  void build_head();

  ModelKind kind_;
  EncoderConfig config_;
  std::size_t outputs_;
  std::optional<mtlr::TimeGrid> grid_;
  bool transferred_ = false;
  nn::Sequential encoder_;
  nn::Sequential tabular_;
  nn::Sequential head_;
  nn::Parameter theta_;
};

/// `outputs` is K for multilabel and 1 for the other classifiers; isd needs a
/// grid. Deterministic under `seed`.
EcgModel build_model(ModelKind kind, const EncoderConfig& config, std::optional<mtlr::TimeGrid> grid,
                     std::uint64_t seed, std::size_t outputs = 1);

/// Eval-mode probabilities [N, outputs] for classifier kinds.
Tensor classify_forward(EcgModel& model, const Batch& batch);

struct IsdOutput {
  Tensor features;                         // z, [N, zdim]
  std::vector<std::vector<double>> curves;  // m + 1 values each
};
IsdOutput isd_forward(EcgModel& model, const Batch& batch);

}  // namespace ets::model
