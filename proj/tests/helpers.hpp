#pragma once

#include <filesystem>
#include <string>

#include "nifm/field.hpp"
#include "nifm/model.hpp"
#include "nifm/rng.hpp"

namespace nifm::test {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nifm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Vec vec2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

inline Vec vec3(double x, double y, double z) {
  Vec v(3);
  v << x, y, z;
  return v;
}

inline Domain unit_box(int n, double t_hi = 1.0) {
  return Domain::box(Vec::Zero(n), Vec::Ones(n), 0.0, t_hi);
}

/// Small model with every parameter drawn from U(-scale, scale) so that all
/// pathways are active.
inline NifmModel random_model(int n, std::uint64_t seed, int d = 8, double scale = 0.7) {
  ModelConfig cfg;
  cfg.n = n;
  cfg.d = d;
  cfg.resolutions = grid_resolutions(Resolution(static_cast<std::size_t>(n + 1), 3), 1.65, 2);
  cfg.domain = Domain::box(Vec::Zero(n), Vec::Constant(n, 2.0), 0.0, 4.0);
  cfg.tau_scale = 1.5;
  cfg.time_voxel = 0.25;
  NifmModel m(cfg);
  CounterRng rng(seed, 99);
  for (double& p : m.params()) p = rng.uniform(-scale, scale);
  m.round_to_f32();
  return m;
}

inline FlowQuery random_query(const Domain& dom, CounterRng& rng, double tau_lo, double tau_hi) {
  FlowQuery q;
  q.x.resize(dom.n);
  for (int a = 0; a < dom.n; ++a) q.x[a] = rng.uniform(dom.lo[a], dom.hi[a]);
  q.t = rng.uniform(dom.t_lo, dom.t_hi);
  q.tau = rng.uniform(tau_lo, tau_hi);
  return q;
}

}  // namespace nifm::test
