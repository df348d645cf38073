#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nifm/field.hpp"
#include "nifm/grad.hpp"
#include "nifm/model.hpp"
#include "nifm/oracle.hpp"

namespace nifm {

// ------------------------------------------------------------- model setup

/// Architecture knobs; the grid ladder comes either from an explicit base
/// resolution or from a compression ratio against the field's node counts.
struct ModelOptions {
  int d = 64;
  int feat_dim = 8;
  int levels = 4;
  double scale = 1.65;
  std::optional<Resolution> base_resolution;  // [t, x, y(, z)]
  double compression_ratio = 10.0;
  double tau_max = 48.0;  // grid units
};

/// `field_dims` are [t, x, y(, z)] node counts of the (possibly rasterized) field.
ModelConfig configure_model(const Domain& domain, double time_voxel, const Resolution& field_dims,
                            const ModelOptions& options);

// --------------------------------------------------------------- optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

/// One bias-corrected Adam update of a flat parameter range.
void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, long step, double lr, const AdamConfig& cfg);

/// Updates every tensor with a nonzero learning rate (`tensor_lr` is indexed
/// like model.tensors()), then rounds the touched values to float32. Throws
/// NumericalError naming the tensor if an update is non-finite.
void adam_step(NifmModel& model, const ParamGradients& grads, AdamState& state,
               const std::vector<double>& tensor_lr, const AdamConfig& cfg);

// ---------------------------------------------------------------- training

struct StageSchedule {
  int steps = 4000;
  double lr = 0.02;
  int decay_every = 800;
  double decay_factor = 0.5;

  double lr_at(int step) const;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  int batch_size = 4096;
  int threads = 1;
  StageSchedule stage1{4000, 0.02, 800, 0.5};
  StageSchedule stage2{4000, 0.01, 800, 0.5};
  double finetune_lr = 0.0008;
  double tau_min = 0.5;  // grid units
  StepPolicy policy = StepPolicy::Sqrt;
  AdamConfig adam;
  int trace_every = 10;         // loss trace subsampling
  int smooth_window = 200;      // for initial/final smoothed losses
  int divergence_window = 500;  // consecutive steps above the limit
  double divergence_factor = 1e3;
  int log_every = 0;  // progress lines on stderr; 0 = silent

  void validate() const;
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
  std::array<double, 4> by_tau{};  // stage 2 only: mean loss per span quartile (NaN if empty)
};

struct StageReport {
  std::string name;
  int steps = 0;
  std::vector<LossPoint> trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double initial_smoothed = 0.0;  // mean of the first smooth_window step losses
  double final_smoothed = 0.0;    // mean of the last smooth_window step losses
  double wall_seconds = 0.0;
  bool has_tau_buckets = false;
};

struct TrainReport {
  std::vector<StageReport> stages;
  nlohmann::ordered_json config;
  std::string checkpoint;

  nlohmann::ordered_json to_json() const;
};

/// Fits the velocity network to `src` (stage-1 mask). Throws DivergenceError.
StageReport train_stage1(NifmModel& model, const VectorFieldSource& src, const TrainConfig& cfg);
/// Self-consistency training of all parameters; the velocity branch at finetune_lr.
StageReport train_stage2(NifmModel& model, const TrainConfig& cfg);
/// Same loop as stage 2 with ground-truth end velocities as targets.
StageReport train_flowmap_supervised(NifmModel& model, const FlowMapSampleSet& data,
                                     const TrainConfig& cfg);

/// Stage-2 spans are drawn uniformly in [tau_min, tau_max] grid units.
double tau_max_grid(const NifmModel& model);

// ---------------------------------------------------------- loss CSV output

std::string loss_csv(const StageReport& stage);
/// Rows step,loss,tau_bucket for the four span quartiles.
std::string loss_by_tau_csv(const StageReport& stage);

// ------------------------------------------------------------- checkpoints

void save_checkpoint(const NifmModel& model, const std::filesystem::path& path);
NifmModel load_checkpoint(const std::filesystem::path& path);

}  // namespace nifm
