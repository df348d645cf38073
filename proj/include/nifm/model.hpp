#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nifm/field.hpp"
#include "nifm/oracle.hpp"

namespace nifm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ------------------------------------------------------------ step policy

/// How many composition steps to take for a span expressed in grid units.
enum class StepPolicy { Sqrt, Full, Log, Single };

int k_for_tau(StepPolicy policy, double tau_g);
std::string_view to_string(StepPolicy policy);
/// Accepts "sqrt", "full", "log", "single"; throws ConfigError otherwise.
StepPolicy parse_step_policy(std::string_view name);

// ------------------------------------------------------- configuration

/// Node counts of one feature-grid level, ordered [t, x, y(, z)].
using Resolution = std::vector<int>;

/// Geometric ladder res_l = ceil(base * scale^l) per axis.
std::vector<Resolution> grid_resolutions(const Resolution& base, double scale, int levels);

struct ModelConfig {
  int n = 2;
  int d = 64;
  int feat_dim = 8;
  std::vector<Resolution> resolutions;  // one entry per level
  int nu_layers = 2;                    // dense layers of the velocity encoder MLP
  int tau_layers = 1;                   // dense layers of the span encoder MLP
  int blocks = 3;                       // tau-gated residual blocks (output layer is L = blocks + 1)
  Domain domain;
  double tau_scale = 1.0;   // physical span that maps to normalized span 1 (tau_max)
  double time_voxel = 1.0;  // physical duration of one temporal grid unit

  int levels() const { return static_cast<int>(resolutions.size()); }
  int feature_width() const { return levels() * feat_dim; }
  void validate() const;
};

/// Total trainable scalars for `cfg` (both encoders, gates and dense weights).
std::size_t parameter_count(const ModelConfig& cfg);

/// Picks the level-0 resolution (proportional to the field's [t, x, y(, z)]
/// node counts) whose ladder brings parameter_count closest to
/// field_floats / compression_ratio. Throws ConfigError when even 2 nodes per
/// axis exceed the budget.
Resolution solve_base_resolution(const ModelConfig& skeleton, const Resolution& field_dims,
                                 double compression_ratio, double scale, int levels);

// ---------------------------------------------------------------- model

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

enum class Encoder { Nu, Tau };

/// All trainable parameters in one flat array, addressed through named
/// tensors. Values stay exactly representable in float32 whenever they are
/// produced by init_params, the optimizer or a checkpoint load.
class NifmModel {
 public:
  /// Indices into tensors() for the structured pieces.
  struct Layout {
    std::vector<int> nu_grid, nu_mlp, tau_grid, tau_mlp;
    std::vector<int> gate;   // m^(0) .. m^(blocks)
    std::vector<int> mixer;  // W^(1) .. W^(blocks), mixer[0] is W^(1)
    int out = -1;            // W^(L)
  };

  explicit NifmModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& tensor(std::string_view name) const;

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> data(const TensorInfo& t) { return {params_.data() + t.offset, t.size}; }
  std::span<const double> data(const TensorInfo& t) const {
    return {params_.data() + t.offset, t.size};
  }

  /// Row-major matrix view of a 2-D tensor.
  Eigen::Map<const RowMatrix> matrix(int tensor_index) const;
  Eigen::Map<RowMatrix> matrix(int tensor_index);
  Eigen::Map<const Eigen::VectorXd> vector(int tensor_index) const;

  const std::vector<int>& grid_tensors(Encoder e) const {
    return e == Encoder::Nu ? layout_.nu_grid : layout_.tau_grid;
  }
  const std::vector<int>& mlp_tensors(Encoder e) const {
    return e == Encoder::Nu ? layout_.nu_mlp : layout_.tau_mlp;
  }

  /// Rounds every parameter to the nearest float32.
  void round_to_f32();

 private:
  ModelConfig cfg_;
  Layout layout_;
  std::vector<TensorInfo> tensors_;
  std::vector<double> params_;
};

/// Deterministic initialization: grid features ~ U(-1e-4, 1e-4), dense weights
/// ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)), gate vectors m = 1 (spans are already
/// normalized by tau_max).
NifmModel init_params(const ModelConfig& cfg, std::uint64_t seed);

// ------------------------------------------------------------ evaluation

/// Column-per-query batch; `tau` in physical units.
struct QueryBatch {
  Eigen::MatrixXd x;  // n x B
  Eigen::VectorXd t;
  Eigen::VectorXd tau;

  Eigen::Index size() const { return t.size(); }
  static QueryBatch from(std::span<const FlowQuery> queries);
  static QueryBatch single(const FlowQuery& q) { return from({&q, 1}); }
};

/// Concatenated per-level interpolated features (levels * feat_dim).
Eigen::VectorXd interpolate_features(const NifmModel& model, Encoder e, const Vec& x, double t);
/// Encoder output in R^d.
Eigen::VectorXd encode(const NifmModel& model, Encoder e, const Vec& x, double t);

Vec forward(const NifmModel& model, const FlowQuery& q);
Vec instantaneous_velocity(const NifmModel& model, const Vec& x, double t);
/// Exact d(Phi)/d(tau) by forward-mode propagation of the span tangent.
Vec tau_derivative(const NifmModel& model, const FlowQuery& q);
/// k applications of the network with span tau/k each; intermediate positions
/// are clamped to the domain.
Vec forward_multi_step(const NifmModel& model, const FlowQuery& q, int k);

Eigen::MatrixXd forward_batch(const NifmModel& model, const QueryBatch& batch);
Eigen::MatrixXd velocity_batch(const NifmModel& model, const Eigen::MatrixXd& x,
                               const Eigen::VectorXd& t);
Eigen::MatrixXd tau_derivative_batch(const NifmModel& model, const QueryBatch& batch);
/// Per-column step counts.
Eigen::MatrixXd multi_step_batch(const NifmModel& model, const QueryBatch& batch,
                                 std::span<const int> steps);

// -------------------------------------------------- trace for the grad module

namespace detail {

struct EncoderTrace {
  Eigen::MatrixXd features;         // levels*F x B
  std::vector<Eigen::MatrixXd> pre;  // pre-activation of each hidden layer
  std::vector<Eigen::MatrixXd> act;  // swish(pre)
  Eigen::MatrixXd out;              // d x B
};

/// Every intermediate of one batched evaluation. Index l of pre/pdot/z/zdot
/// follows the block numbering (z[0] is the gated velocity features).
struct Trace {
  Eigen::MatrixXd coords;  // (n+1) x B normalized space-time coordinates in [0,1]
  EncoderTrace nu;
  EncoderTrace tau;
  Eigen::RowVectorXd span;                // normalized spans s = tau / tau_scale
  std::vector<Eigen::ArrayXXd> gate;      // tanh(s m^(l))
  std::vector<Eigen::ArrayXXd> gate_dot;  // d gate / ds
  Eigen::MatrixXd mixed;                  // W^(1) f_tau
  std::vector<Eigen::MatrixXd> pre, pdot;
  std::vector<Eigen::MatrixXd> z, zdot;
  Eigen::MatrixXd disp;      // W^(L) z_last
  Eigen::MatrixXd disp_dot;  // W^(L) zdot_last (per unit normalized span)
  bool tangent = false;
};

Eigen::MatrixXd normalized_coords(const NifmModel& model, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& t);
void run_encoder(const NifmModel& model, Encoder e, const Eigen::MatrixXd& coords,
                 EncoderTrace& out);
Trace run(const NifmModel& model, const QueryBatch& batch, bool tangent);

/// Adds d(loss)/d(grid values) given d(loss)/d(features) into `grad`
/// (flat, same layout as the model parameters).
void scatter_features(const NifmModel& model, Encoder e, const Eigen::MatrixXd& coords,
                      const Eigen::MatrixXd& feature_grad, std::span<double> grad);

// Swish and its first two derivatives, element-wise.
Eigen::ArrayXXd swish(const Eigen::ArrayXXd& p);
Eigen::ArrayXXd swish_d1(const Eigen::ArrayXXd& p);
Eigen::ArrayXXd swish_d2(const Eigen::ArrayXXd& p);

}  // namespace detail

}  // namespace nifm
