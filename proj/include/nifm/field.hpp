#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace nifm {

/// Spatial vector of dimension 2 or 3 (fixed storage, no heap allocation).
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, 3, 1>;

/// Space-time box the field (and every model trained on it) lives in.
struct Domain {
  int n = 2;
  Vec lo;
  Vec hi;
  double t_lo = 0.0;
  double t_hi = 1.0;

  static Domain box(const Vec& lo, const Vec& hi, double t_lo, double t_hi);

  /// Throws std::invalid_argument unless n in {2,3}, lo < hi and t_lo < t_hi.
  void validate() const;

  Vec clamp(const Vec& x) const;
  double clamp_time(double t) const;
  Vec extent() const { return hi - lo; }
  Vec center() const { return 0.5 * (lo + hi); }
  /// Length of the spatial bounding-box diagonal.
  double diagonal() const { return extent().norm(); }
  bool contains(const Vec& x) const;

  friend bool operator==(const Domain& a, const Domain& b) {
    return a.n == b.n && a.lo == b.lo && a.hi == b.hi && a.t_lo == b.t_lo && a.t_hi == b.t_hi;
  }
};

// Analytic field kinds. Parameters are physical.

/// Stream function psi = A sin(pi f(x,t)) sin(pi y), f = a x^2 + b x with
/// a = eps sin(omega t), b = 1 - 2 eps sin(omega t).
struct DoubleGyre {
  double A = 0.1;
  double epsilon = 0.25;
  double omega = 2.0 * 3.14159265358979323846 / 10.0;
};

/// v = omega (-y, x[, 0]); rotation about the origin (z axis in 3D).
struct RigidRotation {
  double omega = 1.0;
};

/// v = lambda (x, -y[, 0]); hyperbolic point at the origin.
struct Saddle {
  double lambda = 0.5;
};

struct Constant {
  Vec c;
};

using AnalyticKind = std::variant<DoubleGyre, RigidRotation, Saddle, Constant>;

/// Velocities on a regular space-time lattice, axis order [t, x, y(, z)].
struct GriddedField {
  std::vector<int> dims;  // node counts, t first
  Domain domain;
  std::vector<float> data;  // node-major, n components per node, last axis fastest

  void validate() const;
  std::size_t node_count() const;
  /// Physical coordinate of node i along axis a (a = 0 is time).
  double node_coord(int axis, int i) const;

  friend bool operator==(const GriddedField& a, const GriddedField& b) {
    return a.dims == b.dims && a.domain == b.domain && a.data == b.data;
  }
};

/// Conversion between physical time spans and temporal voxel counts.
struct GridUnits {
  double time_voxel = 1.0;  // (t_hi - t_lo) / (dims_t - 1)

  static GridUnits from(const Domain& domain, int time_nodes);
  double to_grid(double tau) const { return tau / time_voxel; }
  double to_physical(double tau_g) const { return tau_g * time_voxel; }
};

/// Uniform sampling interface over analytic and gridded velocity fields.
/// Immutable; safe to share between threads.
class VectorFieldSource {
 public:
  /// `time_nodes` is the nominal temporal resolution used for grid units and
  /// rasterization defaults.
  static VectorFieldSource analytic(AnalyticKind kind, const Domain& domain, int time_nodes);
  static VectorFieldSource gridded(GriddedField field);

  const Domain& domain() const { return domain_; }
  int dim() const { return domain_.n; }
  int time_nodes() const { return time_nodes_; }
  GridUnits grid_units() const { return GridUnits::from(domain_, time_nodes_); }

  bool is_gridded() const { return grid_ != nullptr; }
  const GriddedField* grid() const { return grid_.get(); }
  const AnalyticKind* kind() const { return grid_ ? nullptr : &kind_; }

  /// Velocity at (x, t). Out-of-domain positions/times are clamped first.
  /// Throws std::invalid_argument on dimension mismatch.
  Vec sample(const Vec& x, double t) const;

  /// Closed-form flow map for kinds that have one (Constant, RigidRotation,
  /// Saddle). Ignores domain clamping.
  std::optional<Vec> exact_flow_map(const Vec& x, double t, double tau) const;

 private:
  VectorFieldSource() = default;

  Vec sample_analytic(const Vec& x, double t) const;
  Vec sample_grid(const Vec& x, double t) const;

  Domain domain_;
  int time_nodes_ = 2;
  AnalyticKind kind_;
  std::shared_ptr<const GriddedField> grid_;
};

inline Vec sample(const VectorFieldSource& src, const Vec& x, double t) { return src.sample(x, t); }

/// Evaluates `src` at every node of a [t, x, y(, z)] lattice over its domain.
GriddedField rasterize(const VectorFieldSource& src, std::span<const int> dims);

void save_grid(const GriddedField& field, const std::filesystem::path& path);
GriddedField load_grid(const std::filesystem::path& path);

}  // namespace nifm
