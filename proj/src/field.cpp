#include "nifm/field.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "nifm/io.hpp"

namespace nifm {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Lattice coordinate of a physical value, clamped to [0, nodes-1]. Values
// within 1e-9 of a node snap onto it so node queries are bit-exact.
double lattice_coord(double v, double lo, double hi, int nodes) {
  double u = (v - lo) / (hi - lo) * (nodes - 1);
  u = std::clamp(u, 0.0, static_cast<double>(nodes - 1));
  const double r = std::round(u);
  if (std::abs(u - r) <= 1e-9) u = r;
  return u;
}

}  // namespace

// ---------------------------------------------------------------- Domain

Domain Domain::box(const Vec& lo, const Vec& hi, double t_lo, double t_hi) {
  Domain d;
  d.n = static_cast<int>(lo.size());
  d.lo = lo;
  d.hi = hi;
  d.t_lo = t_lo;
  d.t_hi = t_hi;
  d.validate();
  return d;
}

void Domain::validate() const {
  if (n != 2 && n != 3) throw std::invalid_argument("domain dimension must be 2 or 3");
  if (lo.size() != n || hi.size() != n) throw std::invalid_argument("domain bounds size != n");
  for (int i = 0; i < n; ++i) {
    if (!(lo[i] < hi[i])) throw std::invalid_argument("domain requires lo < hi on every axis");
  }
  if (!(t_lo < t_hi)) throw std::invalid_argument("domain requires t_lo < t_hi");
}

Vec Domain::clamp(const Vec& x) const { return x.cwiseMax(lo).cwiseMin(hi); }

double Domain::clamp_time(double t) const { return std::clamp(t, t_lo, t_hi); }

bool Domain::contains(const Vec& x) const {
  return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

// ---------------------------------------------------------- GriddedField

void GriddedField::validate() const {
  domain.validate();
  if (static_cast<int>(dims.size()) != domain.n + 1) {
    throw std::invalid_argument("grid dims must have n+1 entries ordered [t, x, y(, z)]");
  }
  for (int d : dims) {
    if (d < 2) throw std::invalid_argument("grid needs at least 2 nodes per axis");
  }
  if (data.size() != node_count() * static_cast<std::size_t>(domain.n)) {
    throw std::invalid_argument("grid data length does not match dims");
  }
}

std::size_t GriddedField::node_count() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

double GriddedField::node_coord(int axis, int i) const {
  const int nodes = dims[axis];
  const double lo = axis == 0 ? domain.t_lo : domain.lo[axis - 1];
  const double hi = axis == 0 ? domain.t_hi : domain.hi[axis - 1];
  if (i == nodes - 1) return hi;
  return lo + (hi - lo) * (static_cast<double>(i) / (nodes - 1));
}

GridUnits GridUnits::from(const Domain& domain, int time_nodes) {
  if (time_nodes < 2) throw std::invalid_argument("grid units need at least 2 time nodes");
  return GridUnits{(domain.t_hi - domain.t_lo) / (time_nodes - 1)};
}

// ---------------------------------------------------- VectorFieldSource

VectorFieldSource VectorFieldSource::analytic(AnalyticKind kind, const Domain& domain,
                                              int time_nodes) {
  domain.validate();
  if (time_nodes < 2) throw std::invalid_argument("time_nodes must be >= 2");
  if (std::holds_alternative<DoubleGyre>(kind) && domain.n != 2) {
    throw std::invalid_argument("the double gyre is two-dimensional");
  }
  if (const auto* c = std::get_if<Constant>(&kind); c && c->c.size() != domain.n) {
    throw std::invalid_argument("constant velocity dimension does not match the domain");
  }
  VectorFieldSource src;
  src.domain_ = domain;
  src.time_nodes_ = time_nodes;
  src.kind_ = std::move(kind);
  return src;
}

VectorFieldSource VectorFieldSource::gridded(GriddedField field) {
  field.validate();
  VectorFieldSource src;
  src.domain_ = field.domain;
  src.time_nodes_ = field.dims[0];
  src.grid_ = std::make_shared<const GriddedField>(std::move(field));
  return src;
}

Vec VectorFieldSource::sample(const Vec& x, double t) const {
  if (x.size() != domain_.n) {
    throw std::invalid_argument("position has dimension " + std::to_string(x.size()) +
                                ", field has " + std::to_string(domain_.n));
  }
  return grid_ ? sample_grid(x, t) : sample_analytic(x, t);
}

Vec VectorFieldSource::sample_analytic(const Vec& x_in, double t_in) const {
  const Vec x = domain_.clamp(x_in);
  const double t = domain_.clamp_time(t_in);
  const int n = domain_.n;
  return std::visit(
      [&](const auto& k) -> Vec {
        using K = std::decay_t<decltype(k)>;
        Vec v = Vec::Zero(n);
        if constexpr (std::is_same_v<K, DoubleGyre>) {
          const double s = k.epsilon * std::sin(k.omega * t);
          const double a = s;
          const double b = 1.0 - 2.0 * s;
          const double f = a * x[0] * x[0] + b * x[0];
          const double dfdx = 2.0 * a * x[0] + b;
          v[0] = -kPi * k.A * std::sin(kPi * f) * std::cos(kPi * x[1]);
          v[1] = kPi * k.A * std::cos(kPi * f) * std::sin(kPi * x[1]) * dfdx;
        } else if constexpr (std::is_same_v<K, RigidRotation>) {
          v[0] = -k.omega * x[1];
          v[1] = k.omega * x[0];
        } else if constexpr (std::is_same_v<K, Saddle>) {
          v[0] = k.lambda * x[0];
          v[1] = -k.lambda * x[1];
        } else {
          v = k.c;
        }
        return v;
      },
      kind_);
}

Vec VectorFieldSource::sample_grid(const Vec& x, double t) const {
  const GriddedField& g = *grid_;
  const int n = domain_.n;
  const int axes = n + 1;
  if (!std::isfinite(t) || !x.allFinite()) return Vec::Constant(n, std::numeric_limits<double>::quiet_NaN());

  int base[4];
  double frac[4];
  for (int a = 0; a < axes; ++a) {
    const double v = a == 0 ? t : x[a - 1];
    const double lo = a == 0 ? domain_.t_lo : domain_.lo[a - 1];
    const double hi = a == 0 ? domain_.t_hi : domain_.hi[a - 1];
    const double u = lattice_coord(v, lo, hi, g.dims[a]);
    const int i0 = std::min(static_cast<int>(u), g.dims[a] - 2);
    base[a] = i0;
    frac[a] = u - i0;
  }

  Vec out = Vec::Zero(n);
  for (int corner = 0; corner < (1 << axes); ++corner) {
    double w = 1.0;
    std::size_t node = 0;
    for (int a = 0; a < axes; ++a) {
      const int bit = (corner >> (axes - 1 - a)) & 1;
      w *= bit ? frac[a] : 1.0 - frac[a];
      node = node * static_cast<std::size_t>(g.dims[a]) + static_cast<std::size_t>(base[a] + bit);
    }
    if (w == 0.0) continue;
    const float* v = &g.data[node * static_cast<std::size_t>(n)];
    for (int c = 0; c < n; ++c) out[c] += w * static_cast<double>(v[c]);
  }
  return out;
}

std::optional<Vec> VectorFieldSource::exact_flow_map(const Vec& x, double /*t*/,
                                                     double tau) const {
  if (grid_) return std::nullopt;
  return std::visit(
      [&](const auto& k) -> std::optional<Vec> {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, DoubleGyre>) {
          return std::nullopt;
        } else if constexpr (std::is_same_v<K, RigidRotation>) {
          const double c = std::cos(k.omega * tau);
          const double s = std::sin(k.omega * tau);
          Vec y = x;
          y[0] = c * x[0] - s * x[1];
          y[1] = s * x[0] + c * x[1];
          return y;
        } else if constexpr (std::is_same_v<K, Saddle>) {
          Vec y = x;
          y[0] = x[0] * std::exp(k.lambda * tau);
          y[1] = x[1] * std::exp(-k.lambda * tau);
          return y;
        } else {
          return Vec(x + tau * k.c);
        }
      },
      kind_);
}

// ------------------------------------------------------------ rasterize

GriddedField rasterize(const VectorFieldSource& src, std::span<const int> dims) {
  GriddedField g;
  g.domain = src.domain();
  g.dims.assign(dims.begin(), dims.end());
  const int n = g.domain.n;
  if (static_cast<int>(g.dims.size()) != n + 1) {
    throw std::invalid_argument("rasterize dims must be [t, x, y(, z)]");
  }
  for (int d : g.dims) {
    if (d < 2) throw std::invalid_argument("rasterize needs at least 2 nodes per axis");
  }
  g.data.resize(g.node_count() * static_cast<std::size_t>(n));

  std::vector<int> idx(n + 1, 0);
  Vec x(n);
  for (std::size_t node = 0; node < g.node_count(); ++node) {
    const double t = g.node_coord(0, idx[0]);
    for (int a = 0; a < n; ++a) x[a] = g.node_coord(a + 1, idx[a + 1]);
    const Vec v = src.sample(x, t);
    for (int c = 0; c < n; ++c) g.data[node * n + c] = static_cast<float>(v[c]);
    for (int a = n; a >= 0; --a) {  // last axis fastest
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return g;
}

// ------------------------------------------------------------------ I/O

void save_grid(const GriddedField& field, const std::filesystem::path& path) {
  field.validate();
  io::ordered_json h;
  h["magic"] = "nifm-grid";
  h["version"] = 1;
  h["n"] = field.domain.n;
  h["dims"] = field.dims;
  h["lo"] = std::vector<double>(field.domain.lo.begin(), field.domain.lo.end());
  h["hi"] = std::vector<double>(field.domain.hi.begin(), field.domain.hi.end());
  h["t_lo"] = field.domain.t_lo;
  h["t_hi"] = field.domain.t_hi;
  io::write_header_payload(path, h, field.data);
}

GriddedField load_grid(const std::filesystem::path& path) {
  GriddedField g;
  auto hp = io::read_header_payload(path, "nifm-grid", 1, [&](const nlohmann::json& h) {
    const int n = io::header_get<int>(h, "n");
    if (n != 2 && n != 3) {
      throw FormatError("'" + path.string() + "': unsupported dimension n=" + std::to_string(n));
    }
    g.dims = io::header_get<std::vector<int>>(h, "dims");
    const auto lo = io::header_get<std::vector<double>>(h, "lo");
    const auto hi = io::header_get<std::vector<double>>(h, "hi");
    if (static_cast<int>(g.dims.size()) != n + 1 || static_cast<int>(lo.size()) != n ||
        static_cast<int>(hi.size()) != n) {
      throw FormatError("'" + path.string() + "': dims/lo/hi inconsistent with n");
    }
    for (int d : g.dims) {
      if (d < 2) throw FormatError("'" + path.string() + "': dims must be >= 2");
    }
    g.domain.n = n;
    g.domain.lo = Eigen::Map<const Eigen::VectorXd>(lo.data(), n);
    g.domain.hi = Eigen::Map<const Eigen::VectorXd>(hi.data(), n);
    g.domain.t_lo = io::header_get<double>(h, "t_lo");
    g.domain.t_hi = io::header_get<double>(h, "t_hi");
    try {
      g.domain.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError("'" + path.string() + "': " + e.what());
    }
    return g.node_count() * static_cast<std::size_t>(n);
  });
  g.data = std::move(hp.payload);
  return g;
}

}  // namespace nifm
