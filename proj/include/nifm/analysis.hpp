#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nifm/field.hpp"
#include "nifm/model.hpp"
#include "nifm/oracle.hpp"

namespace nifm {

// ----------------------------------------------------------------- providers

/// Anything that answers flow-map queries in batches: the neural model, a
/// numerical integrator, or (for the kinds that have one) the closed form.
class FlowMapProvider {
 public:
  /// Spans longer than the model's tau_max are split into ceil(|tau|/tau_max)
  /// equal segments; each segment takes k_for_tau(policy, segment) steps.
  static FlowMapProvider neural(const NifmModel& model, StepPolicy policy = StepPolicy::Sqrt,
                                int threads = 1);
  /// Neural model with a fixed number of composition steps for every span.
  static FlowMapProvider neural_fixed(const NifmModel& model, int steps, int threads = 1);
  static FlowMapProvider oracle(const VectorFieldSource& src, IntegratorSpec spec, int threads = 1);
  /// Throws std::invalid_argument unless src has a closed-form flow map.
  static FlowMapProvider exact(const VectorFieldSource& src);

  const Domain& domain() const { return domain_; }
  /// Endpoints, one column per query.
  Eigen::MatrixXd evaluate(const QueryBatch& batch) const;
  Vec evaluate(const FlowQuery& q) const;

 private:
  std::function<Eigen::MatrixXd(const QueryBatch&)> fn_;
  Domain domain_;
};

/// Composition steps the neural provider takes for one span.
int neural_step_count(const NifmModel& model, StepPolicy policy, double tau);

// ---------------------------------------------------------------- FTLE

/// Node-sampled scalar field over a spatial box, dims [x, y(, z)], last axis
/// fastest.
struct ScalarGrid {
  std::vector<int> dims;
  Vec lo, hi;
  std::vector<float> values;

  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * dims[1] + j; }
  double node_coord(int axis, int i) const;
};

/// Forward (tau > 0) or backward FTLE on a node lattice over `domain`'s
/// spatial box. h_fd <= 0 picks half the smallest output cell.
ScalarGrid ftle(const FlowMapProvider& provider, const Domain& domain, double t0, double tau,
                std::span<const int> dims, double h_fd = 0.0);

/// Largest eigenvalue of the (symmetric) Cauchy-Green tensor J^T J.
double max_cauchy_green_eigenvalue(const Eigen::MatrixXd& jacobian);

std::string scalar_grid_csv(const ScalarGrid& grid);

// ----------------------------------------------------------------- streaklines

/// Vertex i is the particle released at releases[i] observed at t_obs; one
/// batch for all releases.
Polyline streaklines(const FlowMapProvider& provider, const Vec& seed,
                     std::span<const double> releases, double t_obs);

std::string streakline_csv(const Polyline& line);

// ---------------------------------------------------------------- error metric

struct ErrorRecord {
  double t0 = 0.0;
  double tau = 0.0;
  double mean_err = 0.0;  // normalized by the spatial bounding-box diagonal
  double max_err = 0.0;
  std::size_t n = 0;
  double wall_ms = 0.0;  // provider evaluation time
};

ErrorRecord flow_map_error(const FlowMapProvider& provider, const FlowMapProvider& reference,
                           std::span<const FlowQuery> queries);

struct SweepOptions {
  int samples_per_cell = 256;
  std::uint64_t seed = 0;
  bool record_time = true;  // false writes wall_ms = 0 (byte-stable output)
  /// Optional rejection test on sampled queries (e.g. keep trajectories inside
  /// the domain when comparing with a closed form).
  std::function<bool(const FlowQuery&)> accept;
};

/// Uniform spatial seeds per (t0, tau) cell; spans in physical units.
std::vector<ErrorRecord> evaluation_sweep(const FlowMapProvider& provider,
                                          const FlowMapProvider& reference,
                                          std::span<const double> start_times,
                                          std::span<const double> spans, const SweepOptions& options);

std::string sweep_csv(std::span<const ErrorRecord> records);

/// True if the closed-form trajectory stays inside the domain (checked at
/// `checks` evenly spaced times).
bool stays_inside(const VectorFieldSource& src, const FlowQuery& q, int checks = 32);

// ------------------------------------------------------------ method comparison

struct ComparisonRow {
  std::string method;  // "euler", "rk4" or "nifm"
  double param = 0.0;  // step size h (integrators) or step count k (model)
  double tau = 0.0;
  double err = 0.0;    // mean normalized endpoint error vs the closed form
};

struct SlopeRow {
  std::string method;
  double tau = 0.0;
  double slope = 0.0;  // least-squares slope of log(err) vs log(param); NaN if undefined
};

struct ComparisonOptions {
  std::vector<double> step_sizes;  // physical
  std::vector<double> spans;       // physical
  std::vector<int> model_steps;    // k values for the neural rows
  const NifmModel* model = nullptr;
  int samples = 128;
  std::uint64_t seed = 0;
  int threads = 1;
};

std::vector<ComparisonRow> euler_rk4_model_comparison(const VectorFieldSource& src,
                                                      const ComparisonOptions& options);
std::vector<SlopeRow> comparison_slopes(std::span<const ComparisonRow> rows);
std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string slopes_csv(std::span<const SlopeRow> rows);

// ------------------------------------------------------------------ images

struct ImageRange {
  double lo = 0.0;
  double hi = 1.0;
};

/// 8-bit P5 PGM of a 2D grid; row 0 is the max-y edge. Without a fixed range
/// the grid's min/max is used (a constant grid maps to 0). Throws
/// std::invalid_argument for 3D grids.
void emit_scalar_image(const ScalarGrid& grid, const std::filesystem::path& path,
                       std::optional<ImageRange> range = std::nullopt);

struct PgmImage {
  int width = 0;
  int height = 0;
  std::string comment;
  std::vector<unsigned char> pixels;  // row-major, top row first
};

PgmImage read_pgm(const std::filesystem::path& path);

}  // namespace nifm
