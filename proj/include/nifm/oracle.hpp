#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nifm/field.hpp"

namespace nifm {

enum class Scheme { Euler, RK4 };

struct IntegratorSpec {
  Scheme scheme = Scheme::RK4;
  double h = 0.0;  // physical step; must be > 0

  /// RK4 at half the temporal voxel size of `src`.
  static IntegratorSpec standard(const VectorFieldSource& src);
};

/// Particle seeded at x at time t, advected for the signed span tau.
struct FlowQuery {
  Vec x;
  double t = 0.0;
  double tau = 0.0;
};

struct PolylineVertex {
  Vec x;
  double t = 0.0;
};

using Polyline = std::vector<PolylineVertex>;

/// One ground-truth flow-map record: query, endpoint and the field velocity
/// at the endpoint at time t + tau.
struct FlowMapSample {
  FlowQuery query;
  Vec end;
  Vec velocity;
};

struct FlowMapSampleSet {
  int n = 2;
  std::vector<FlowMapSample> records;
};

/// Fixed-step integration from t to t+tau in ceil(|tau|/h) sub-steps; the last
/// sub-step is shortened to land exactly on t+tau. Throws NumericalError if the
/// state becomes non-finite.
Vec integrate(const VectorFieldSource& src, const FlowQuery& q, const IntegratorSpec& spec);

/// Same stepping as integrate(), recording every `record_every`-th sub-step
/// plus both endpoints.
Polyline pathline(const VectorFieldSource& src, const FlowQuery& q, const IntegratorSpec& spec,
                  int record_every = 1);

/// Positions at time t_obs of particles released from `seed` at each release
/// time, ordered by release time.
Polyline reference_streakline(const VectorFieldSource& src, const Vec& seed,
                              std::span<const double> releases, double t_obs,
                              const IntegratorSpec& spec);

struct SpanRange {
  double lo = 0.0;  // physical units
  double hi = 0.0;
};

/// Positions uniform over the domain, spans uniform over `tau_range`, start
/// times uniform over [t_lo, t_hi - |tau|] (just t_lo if the span does not
/// fit). Record i depends only on (seed, i).
FlowMapSampleSet sample_flow_map_dataset(const VectorFieldSource& src, std::size_t count,
                                         SpanRange tau_range, const IntegratorSpec& spec,
                                         std::uint64_t seed, int threads = 1);

void save_sample_set(const FlowMapSampleSet& set, const std::filesystem::path& path);
FlowMapSampleSet load_sample_set(const std::filesystem::path& path);

}  // namespace nifm
