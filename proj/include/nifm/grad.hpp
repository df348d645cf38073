#pragma once

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "nifm/model.hpp"
#include "nifm/oracle.hpp"

namespace nifm {

/// Shape-matched gradient for every parameter, stored in the model's flat layout.
struct ParamGradients {
  std::vector<double> flat;

  std::span<const double> of(const TensorInfo& t) const { return {flat.data() + t.offset, t.size}; }
  std::span<double> of(const TensorInfo& t) { return {flat.data() + t.offset, t.size}; }
};

/// Which tensors a stage optimizes. Stage 1 covers exactly the parameters of
/// the closed-form velocity network; stage 2 covers everything and flags that
/// same set as fine-tuned.
struct StageMask {
  std::vector<bool> active;
  std::vector<bool> finetune;

  static StageMask stage1(const NifmModel& model);
  static StageMask stage2(const NifmModel& model);
  bool contains(int tensor) const { return active[static_cast<std::size_t>(tensor)]; }
};

/// Positions, times and field velocities for the velocity objective.
struct VelocityBatch {
  Eigen::MatrixXd x;  // n x B
  Eigen::VectorXd t;
  Eigen::MatrixXd v;  // n x B, physical units

  Eigen::Index size() const { return t.size(); }
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> sample_loss;  // per-sample residual norm
  ParamGradients grad;
};

/// Mean over the batch of |W_out (m0 * f_nu(x,t)) - v|.
double loss_stage1(const NifmModel& model, const VelocityBatch& batch);

/// Self-consistency targets: the model's own instantaneous velocity at the
/// k-step composed endpoint, at time t + tau. Plain values, no gradient path.
Eigen::MatrixXd stage2_targets(const NifmModel& model, const QueryBatch& batch, StepPolicy policy);

/// Mean over the batch of |dPhi/dtau(x,t,tau) - target|.
double derivative_loss(const NifmModel& model, const QueryBatch& batch,
                       const Eigen::MatrixXd& targets);

double loss_stage2(const NifmModel& model, const QueryBatch& batch, StepPolicy policy);

/// Batch and targets (ground-truth end velocities) of a supervised sample set.
QueryBatch supervised_batch(std::span<const FlowMapSample> samples, Eigen::MatrixXd& targets);
double loss_flowmap_supervised(const NifmModel& model, std::span<const FlowMapSample> samples);

/// Reverse-mode gradients. The batch is processed in fixed shards that are
/// accumulated in shard order per worker, so threads == 1 is bit-reproducible.
/// Tensors outside `mask` get exactly zero. A zero residual contributes zero
/// gradient. Throws NumericalError naming the first tensor with a non-finite
/// gradient.
LossGrad backward_stage1(const NifmModel& model, const VelocityBatch& batch,
                         const StageMask& mask, int threads = 1);
LossGrad backward_derivative(const NifmModel& model, const QueryBatch& batch,
                             const Eigen::MatrixXd& targets, const StageMask& mask,
                             int threads = 1);
/// Freezes the stage-2 targets from the current parameters, then differentiates.
LossGrad backward_stage2(const NifmModel& model, const QueryBatch& batch, StepPolicy policy,
                         const StageMask& mask, int threads = 1);

// ---------------------------------------------------- finite-difference check

struct GradCheckRow {
  std::string tensor;
  std::size_t size = 0;
  double rel_error = 0.0;  // |fd - an|_inf / max(|an|_inf, |fd|_inf)
};

enum class GradCheckLoss { Stage1, Stage2 };

/// Small model (width 8, one grid level) with parameters spread far enough
/// from zero that every pathway carries signal.
NifmModel toy_model(int n, std::uint64_t seed);

/// Central differences with step 1e-3 * max(|p|, 1) on every parameter of the
/// stage's mask. Stage-2 targets are frozen at the unperturbed parameters.
std::vector<GradCheckRow> check_gradients(const NifmModel& model, GradCheckLoss loss,
                                          std::uint64_t seed, int batch_size = 12);

}  // namespace nifm
