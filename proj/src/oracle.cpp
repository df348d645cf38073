#include "nifm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nifm/error.hpp"
#include "nifm/io.hpp"
#include "nifm/parallel.hpp"
#include "nifm/rng.hpp"

namespace nifm {

namespace {

int substep_count(double tau, double h) {
  const double q = std::abs(tau) / h;
  // Absorb representation noise so tau = k*h gives exactly k steps.
  return static_cast<int>(std::ceil(q * (1.0 - 1e-12)));
}

void check_finite(const Vec& x, double t) {
  if (!x.allFinite()) {
    std::ostringstream msg;
    msg << "integration produced a non-finite state at t=" << t << ": (" << x.transpose() << ")";
    throw NumericalError(msg.str());
  }
}

Vec step(const VectorFieldSource& src, Scheme scheme, const Vec& x, double t, double h) {
  if (scheme == Scheme::Euler) return x + h * src.sample(x, t);
  const Vec k1 = src.sample(x, t);
  const Vec k2 = src.sample(x + 0.5 * h * k1, t + 0.5 * h);
  const Vec k3 = src.sample(x + 0.5 * h * k2, t + 0.5 * h);
  const Vec k4 = src.sample(x + h * k3, t + h);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

template <typename OnStep>
Vec advance(const VectorFieldSource& src, const FlowQuery& q, const IntegratorSpec& spec,
            OnStep&& on_step) {
  if (!(spec.h > 0.0)) throw std::invalid_argument("integrator step h must be > 0");
  if (q.x.size() != src.dim()) throw std::invalid_argument("query dimension mismatch");
  if (!std::isfinite(q.tau) || !std::isfinite(q.t)) {
    throw std::invalid_argument("query time and span must be finite");
  }
  Vec x = q.x;
  if (q.tau == 0.0) return x;
  const int steps = substep_count(q.tau, spec.h);
  const double hs = q.tau > 0 ? spec.h : -spec.h;
  for (int i = 0; i < steps; ++i) {
    const double t = q.t + i * hs;
    const double h = (i == steps - 1) ? q.tau - i * hs : hs;
    x = step(src, spec.scheme, x, t, h);
    check_finite(x, t + h);
    on_step(i + 1, steps, x, i == steps - 1 ? q.t + q.tau : t + h);
  }
  return x;
}

}  // namespace

IntegratorSpec IntegratorSpec::standard(const VectorFieldSource& src) {
  return IntegratorSpec{Scheme::RK4, 0.5 * src.grid_units().time_voxel};
}

Vec integrate(const VectorFieldSource& src, const FlowQuery& q, const IntegratorSpec& spec) {
  return advance(src, q, spec, [](int, int, const Vec&, double) {});
}

Polyline pathline(const VectorFieldSource& src, const FlowQuery& q, const IntegratorSpec& spec,
                  int record_every) {
  if (record_every < 1) throw std::invalid_argument("record_every must be >= 1");
  Polyline line{{q.x, q.t}};
  advance(src, q, spec, [&](int i, int steps, const Vec& x, double t) {
    if (i % record_every == 0 || i == steps) line.push_back({x, t});
  });
  return line;
}

Polyline reference_streakline(const VectorFieldSource& src, const Vec& seed,
                              std::span<const double> releases, double t_obs,
                              const IntegratorSpec& spec) {
  std::vector<double> sorted(releases.begin(), releases.end());
  std::sort(sorted.begin(), sorted.end());
  Polyline line;
  line.reserve(sorted.size());
  for (double r : sorted) {
    if (r > t_obs) throw std::invalid_argument("release time after the observation time");
    line.push_back({integrate(src, FlowQuery{seed, r, t_obs - r}, spec), r});
  }
  return line;
}

FlowMapSampleSet sample_flow_map_dataset(const VectorFieldSource& src, std::size_t count,
                                         SpanRange tau_range, const IntegratorSpec& spec,
                                         std::uint64_t seed, int threads) {
  if (count == 0) throw std::invalid_argument("sample count must be >= 1");
  if (!(tau_range.lo <= tau_range.hi)) throw std::invalid_argument("empty span range");
  const Domain& dom = src.domain();
  FlowMapSampleSet set;
  set.n = dom.n;
  set.records.resize(count);
  const CounterRng base(seed, 0x666d73);
  parallel_for(count, threads, [&](std::size_t i) {
    CounterRng rng = base.split(i);
    FlowMapSample& rec = set.records[i];
    rec.query.x.resize(dom.n);
    for (int a = 0; a < dom.n; ++a) rec.query.x[a] = rng.uniform(dom.lo[a], dom.hi[a]);
    rec.query.tau = rng.uniform(tau_range.lo, tau_range.hi);
    // Start early enough that t + tau stays inside the time range when it can.
    rec.query.t = rng.uniform(dom.t_lo, std::max(dom.t_lo, dom.t_hi - std::abs(rec.query.tau)));
    rec.end = integrate(src, rec.query, spec);
    rec.velocity = src.sample(rec.end, rec.query.t + rec.query.tau);
  });
  return set;
}

void save_sample_set(const FlowMapSampleSet& set, const std::filesystem::path& path) {
  const int n = set.n;
  std::vector<float> payload;
  payload.reserve(set.records.size() * static_cast<std::size_t>(3 * n + 2));
  for (const auto& r : set.records) {
    for (int a = 0; a < n; ++a) payload.push_back(static_cast<float>(r.query.x[a]));
    payload.push_back(static_cast<float>(r.query.t));
    payload.push_back(static_cast<float>(r.query.tau));
    for (int a = 0; a < n; ++a) payload.push_back(static_cast<float>(r.end[a]));
    for (int a = 0; a < n; ++a) payload.push_back(static_cast<float>(r.velocity[a]));
  }
  io::ordered_json h;
  h["magic"] = "nifm-fms";
  h["version"] = 1;
  h["n"] = n;
  h["count"] = set.records.size();
  io::write_header_payload(path, h, payload);
}

FlowMapSampleSet load_sample_set(const std::filesystem::path& path) {
  FlowMapSampleSet set;
  std::size_t count = 0;
  auto hp = io::read_header_payload(path, "nifm-fms", 1, [&](const nlohmann::json& h) {
    set.n = io::header_get<int>(h, "n");
    if (set.n != 2 && set.n != 3) {
      throw FormatError("'" + path.string() + "': unsupported dimension n=" + std::to_string(set.n));
    }
    count = io::header_get<std::size_t>(h, "count");
    return count * static_cast<std::size_t>(3 * set.n + 2);
  });
  const int n = set.n;
  set.records.resize(count);
  const float* p = hp.payload.data();
  for (auto& r : set.records) {
    r.query.x.resize(n);
    r.end.resize(n);
    r.velocity.resize(n);
    for (int a = 0; a < n; ++a) r.query.x[a] = *p++;
    r.query.t = *p++;
    r.query.tau = *p++;
    for (int a = 0; a < n; ++a) r.end[a] = *p++;
    for (int a = 0; a < n; ++a) r.velocity[a] = *p++;
  }
  return set;
}

}  // namespace nifm
