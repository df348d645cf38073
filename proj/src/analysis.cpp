#include "nifm/analysis.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "nifm/error.hpp"
#include "nifm/io.hpp"
#include "nifm/parallel.hpp"
#include "nifm/rng.hpp"

namespace nifm {

using Eigen::MatrixXd;

namespace {

constexpr Eigen::Index kChunk = 2048;

std::string num(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

QueryBatch columns(const QueryBatch& b, Eigen::Index start, Eigen::Index count) {
  return {b.x.middleCols(start, count), b.t.segment(start, count), b.tau.segment(start, count)};
}

// Evaluates fixed-size chunks in parallel; chunk results land in place, so the
// output does not depend on the thread count.
MatrixXd chunked(const QueryBatch& batch, int threads,
                 const std::function<MatrixXd(const QueryBatch&)>& fn) {
  const Eigen::Index B = batch.size();
  MatrixXd out(batch.x.rows(), B);
  const std::size_t chunks = static_cast<std::size_t>((B + kChunk - 1) / kChunk);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const Eigen::Index start = static_cast<Eigen::Index>(c) * kChunk;
    const Eigen::Index len = std::min(kChunk, B - start);
    out.middleCols(start, len) = fn(columns(batch, start, len));
  });
  return out;
}

}  // namespace

// ----------------------------------------------------------------- providers

int neural_step_count(const NifmModel& model, StepPolicy policy, double tau) {
  const ModelConfig& cfg = model.config();
  const double span = std::abs(tau);
  const int segments = std::max(1, static_cast<int>(std::ceil(span / cfg.tau_scale - 1e-9)));
  return segments * k_for_tau(policy, span / segments / cfg.time_voxel);
}

FlowMapProvider FlowMapProvider::neural(const NifmModel& model, StepPolicy policy, int threads) {
  FlowMapProvider p;
  p.domain_ = model.config().domain;
  p.fn_ = [&model, policy, threads](const QueryBatch& batch) {
    return chunked(batch, threads, [&](const QueryBatch& part) {
      std::vector<int> steps(static_cast<std::size_t>(part.size()));
      for (Eigen::Index i = 0; i < part.size(); ++i) {
        steps[static_cast<std::size_t>(i)] = neural_step_count(model, policy, part.tau[i]);
      }
      return multi_step_batch(model, part, steps);
    });
  };
  return p;
}

FlowMapProvider FlowMapProvider::neural_fixed(const NifmModel& model, int steps, int threads) {
  if (steps < 1) throw std::invalid_argument("step count must be >= 1");
  FlowMapProvider p;
  p.domain_ = model.config().domain;
  p.fn_ = [&model, steps, threads](const QueryBatch& batch) {
    return chunked(batch, threads, [&](const QueryBatch& part) {
      const std::vector<int> k(static_cast<std::size_t>(part.size()), steps);
      return multi_step_batch(model, part, k);
    });
  };
  return p;
}

FlowMapProvider FlowMapProvider::oracle(const VectorFieldSource& src, IntegratorSpec spec,
                                        int threads) {
  FlowMapProvider p;
  p.domain_ = src.domain();
  p.fn_ = [&src, spec, threads](const QueryBatch& batch) {
    MatrixXd out(batch.x.rows(), batch.size());
    parallel_for(static_cast<std::size_t>(batch.size()), threads, [&](std::size_t i) {
      const auto c = static_cast<Eigen::Index>(i);
      out.col(c) = integrate(src, FlowQuery{batch.x.col(c), batch.t[c], batch.tau[c]}, spec);
    });
    return out;
  };
  return p;
}

FlowMapProvider FlowMapProvider::exact(const VectorFieldSource& src) {
  if (!src.exact_flow_map(src.domain().center(), src.domain().t_lo, 0.0)) {
    throw std::invalid_argument("field has no closed-form flow map");
  }
  FlowMapProvider p;
  p.domain_ = src.domain();
  p.fn_ = [&src](const QueryBatch& batch) {
    MatrixXd out(batch.x.rows(), batch.size());
    for (Eigen::Index c = 0; c < batch.size(); ++c) {
      out.col(c) = *src.exact_flow_map(batch.x.col(c), batch.t[c], batch.tau[c]);
    }
    return out;
  };
  return p;
}

MatrixXd FlowMapProvider::evaluate(const QueryBatch& batch) const {
  if (batch.x.rows() != domain_.n) throw std::invalid_argument("query dimension mismatch");
  return fn_(batch);
}

Vec FlowMapProvider::evaluate(const FlowQuery& q) const {
  return evaluate(QueryBatch::single(q)).col(0);
}

// ---------------------------------------------------------------- FTLE

double ScalarGrid::node_coord(int axis, int i) const {
  if (i == dims[axis] - 1) return hi[axis];
  return lo[axis] + (hi[axis] - lo[axis]) * i / (dims[axis] - 1);
}

double max_cauchy_green_eigenvalue(const MatrixXd& jacobian) {
  const MatrixXd c = jacobian.transpose() * jacobian;
  if (c.rows() == 2) {
    const double mean = 0.5 * (c(0, 0) + c(1, 1));
    const double half = 0.5 * (c(0, 0) - c(1, 1));
    return mean + std::sqrt(half * half + c(0, 1) * c(0, 1));
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(c, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().maxCoeff();
}

ScalarGrid ftle(const FlowMapProvider& provider, const Domain& domain, double t0, double tau,
                std::span<const int> dims, double h_fd) {
  const int n = domain.n;
  if (tau == 0.0) throw std::invalid_argument("FTLE needs a nonzero span");
  if (static_cast<int>(dims.size()) != n) throw std::invalid_argument("FTLE dims must list n axes");
  ScalarGrid grid;
  grid.dims.assign(dims.begin(), dims.end());
  grid.lo = domain.lo;
  grid.hi = domain.hi;
  double min_cell = std::numeric_limits<double>::infinity();
  std::size_t nodes = 1;
  for (int a = 0; a < n; ++a) {
    if (dims[a] < 2) throw std::invalid_argument("FTLE dims must be >= 2");
    min_cell = std::min(min_cell, (domain.hi[a] - domain.lo[a]) / (dims[a] - 1));
    nodes *= static_cast<std::size_t>(dims[a]);
  }
  if (h_fd <= 0.0) h_fd = 0.5 * min_cell;
  if (h_fd > min_cell * (1.0 + 1e-12)) throw std::invalid_argument("h_fd exceeds one output cell");

  const int stencil = 2 * n + 1;
  QueryBatch batch;
  const auto total = static_cast<Eigen::Index>(nodes * stencil);
  batch.x.resize(n, total);
  batch.t = Eigen::VectorXd::Constant(total, t0);
  batch.tau = Eigen::VectorXd::Constant(total, tau);
  for (std::size_t node = 0; node < nodes; ++node) {
    Vec x(n);
    std::size_t rest = node;
    for (int a = n - 1; a >= 0; --a) {
      x[a] = grid.node_coord(a, static_cast<int>(rest % dims[a]));
      rest /= dims[a];
    }
    const auto col = static_cast<Eigen::Index>(node * stencil);
    batch.x.col(col) = x;
    for (int a = 0; a < n; ++a) {
      batch.x.col(col + 1 + 2 * a) = x;
      batch.x(a, col + 1 + 2 * a) += h_fd;
      batch.x.col(col + 2 + 2 * a) = x;
      batch.x(a, col + 2 + 2 * a) -= h_fd;
    }
  }
  const MatrixXd end = provider.evaluate(batch);
  grid.values.resize(nodes);
  for (std::size_t node = 0; node < nodes; ++node) {
    const auto col = static_cast<Eigen::Index>(node * stencil);
    MatrixXd jac(n, n);
    for (int a = 0; a < n; ++a) {
      jac.col(a) = (end.col(col + 1 + 2 * a) - end.col(col + 2 + 2 * a)) / (2.0 * h_fd);
    }
    const double lambda = std::max(max_cauchy_green_eigenvalue(jac), 1.0 + 1e-12);
    grid.values[node] = static_cast<float>(std::log(std::sqrt(lambda)) / std::abs(tau));
  }
  return grid;
}

std::string scalar_grid_csv(const ScalarGrid& grid) {
  const int n = static_cast<int>(grid.dims.size());
  std::string out = n == 2 ? "x,y,value\n" : "x,y,z,value\n";
  for (std::size_t node = 0; node < grid.values.size(); ++node) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::size_t rest = node;
    for (int a = n - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(rest % grid.dims[a]);
      rest /= grid.dims[a];
    }
    for (int a = 0; a < n; ++a) out += num(grid.node_coord(a, idx[a])) + ",";
    out += num(grid.values[node]) + "\n";
  }
  return out;
}

// ----------------------------------------------------------------- streaklines

Polyline streaklines(const FlowMapProvider& provider, const Vec& seed,
                     std::span<const double> releases, double t_obs) {
  std::vector<double> sorted(releases.begin(), releases.end());
  std::sort(sorted.begin(), sorted.end());
  QueryBatch batch;
  const auto count = static_cast<Eigen::Index>(sorted.size());
  batch.x.resize(seed.size(), count);
  batch.t.resize(count);
  batch.tau.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const double r = sorted[static_cast<std::size_t>(i)];
    if (r > t_obs) throw std::invalid_argument("release time after the observation time");
    batch.x.col(i) = seed;
    batch.t[i] = r;
    batch.tau[i] = t_obs - r;
  }
  Polyline line;
  if (count == 0) return line;
  const MatrixXd end = provider.evaluate(batch);
  for (Eigen::Index i = 0; i < count; ++i) line.push_back({end.col(i), batch.t[i]});
  return line;
}

std::string streakline_csv(const Polyline& line) {
  const Eigen::Index n = line.empty() ? 2 : line.front().x.size();
  std::string out = n == 2 ? "release_t,x,y\n" : "release_t,x,y,z\n";
  for (const auto& v : line) {
    out += num(v.t);
    for (Eigen::Index a = 0; a < n; ++a) out += "," + num(v.x[a]);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------- error metric

ErrorRecord flow_map_error(const FlowMapProvider& provider, const FlowMapProvider& reference,
                           std::span<const FlowQuery> queries) {
  if (queries.empty()) throw std::invalid_argument("flow_map_error needs at least one query");
  const QueryBatch batch = QueryBatch::from(queries);
  const auto start = std::chrono::steady_clock::now();
  const MatrixXd pred = provider.evaluate(batch);
  const auto stop = std::chrono::steady_clock::now();
  const MatrixXd ref = reference.evaluate(batch);
  const double diag = provider.domain().diagonal();
  ErrorRecord rec;
  rec.t0 = queries[0].t;
  rec.tau = queries[0].tau;
  rec.n = queries.size();
  rec.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const double e = (pred.col(i) - ref.col(i)).norm() / diag;
    sum += e;
    rec.max_err = std::max(rec.max_err, e);
  }
  rec.mean_err = sum / static_cast<double>(rec.n);
  return rec;
}

std::vector<ErrorRecord> evaluation_sweep(const FlowMapProvider& provider,
                                          const FlowMapProvider& reference,
                                          std::span<const double> start_times,
                                          std::span<const double> spans,
                                          const SweepOptions& options) {
  if (start_times.empty() || spans.empty()) throw std::invalid_argument("empty sweep grid");
  if (options.samples_per_cell < 1) throw std::invalid_argument("samples_per_cell must be >= 1");
  const Domain& dom = provider.domain();
  const CounterRng base(options.seed, 0x7377);
  std::vector<ErrorRecord> out;
  std::uint64_t cell = 0;
  for (double t0 : start_times) {
    for (double tau : spans) {
      CounterRng rng = base.split(cell++);
      std::vector<FlowQuery> queries;
      const long budget = 1000L * options.samples_per_cell;
      for (long attempt = 0;
           attempt < budget && static_cast<int>(queries.size()) < options.samples_per_cell; ++attempt) {
        FlowQuery q;
        q.x.resize(dom.n);
        for (int a = 0; a < dom.n; ++a) q.x[a] = rng.uniform(dom.lo[a], dom.hi[a]);
        q.t = t0;
        q.tau = tau;
        if (!options.accept || options.accept(q)) queries.push_back(q);
      }
      if (queries.empty()) {
        throw std::invalid_argument("no acceptable query for t0=" + num(t0) + ", tau=" + num(tau));
      }
      ErrorRecord rec = flow_map_error(provider, reference, queries);
      if (!options.record_time) rec.wall_ms = 0.0;
      out.push_back(rec);
    }
  }
  return out;
}

std::string sweep_csv(std::span<const ErrorRecord> records) {
  std::string out = "t0,tau,mean_err,max_err,n,wall_ms\n";
  for (const auto& r : records) {
    out += num(r.t0) + "," + num(r.tau) + "," + num(r.mean_err) + "," + num(r.max_err) + "," +
           std::to_string(r.n) + "," + num(r.wall_ms) + "\n";
  }
  return out;
}

bool stays_inside(const VectorFieldSource& src, const FlowQuery& q, int checks) {
  const Domain& dom = src.domain();
  for (int i = 0; i <= checks; ++i) {
    const auto x = src.exact_flow_map(q.x, q.t, q.tau * i / checks);
    if (!x) throw std::invalid_argument("field has no closed-form flow map");
    if (!dom.contains(*x)) return false;
  }
  return true;
}

// ------------------------------------------------------------ method comparison

std::vector<ComparisonRow> euler_rk4_model_comparison(const VectorFieldSource& src,
                                                      const ComparisonOptions& options) {
  const FlowMapProvider exact = FlowMapProvider::exact(src);
  const Domain& dom = src.domain();
  // Seeds come from the inner 80% of the box so that inexact trajectories stay
  // clear of the clamped walls too.
  Domain inner = dom;
  inner.lo = dom.lo + 0.1 * dom.extent();
  inner.hi = dom.hi - 0.1 * dom.extent();
  const CounterRng base(options.seed, 0x636d70);
  std::vector<ComparisonRow> rows;
  for (std::size_t s = 0; s < options.spans.size(); ++s) {
    const double tau = options.spans[s];
    CounterRng rng = base.split(s);
    std::vector<FlowQuery> queries;
    for (long attempt = 0; attempt < 1000L * options.samples &&
                           static_cast<int>(queries.size()) < options.samples;
         ++attempt) {
      FlowQuery q;
      q.x.resize(dom.n);
      for (int a = 0; a < dom.n; ++a) q.x[a] = rng.uniform(inner.lo[a], inner.hi[a]);
      q.t = dom.t_lo;
      q.tau = tau;
      bool inside = true;
      for (int i = 0; i <= 32 && inside; ++i) {
        inside = inner.contains(*src.exact_flow_map(q.x, q.t, tau * i / 32));
      }
      if (inside) queries.push_back(q);
    }
    if (queries.empty()) throw std::invalid_argument("no query stays inside for tau=" + num(tau));
    for (Scheme scheme : {Scheme::Euler, Scheme::RK4}) {
      for (double h : options.step_sizes) {
        const auto p = FlowMapProvider::oracle(src, IntegratorSpec{scheme, h}, options.threads);
        rows.push_back({scheme == Scheme::Euler ? "euler" : "rk4", h, tau,
                        flow_map_error(p, exact, queries).mean_err});
      }
    }
    if (options.model) {
      for (int k : options.model_steps) {
        const auto p = FlowMapProvider::neural_fixed(*options.model, k, options.threads);
        rows.push_back({"nifm", static_cast<double>(k), tau, flow_map_error(p, exact, queries).mean_err});
      }
    }
  }
  return rows;
}

std::vector<SlopeRow> comparison_slopes(std::span<const ComparisonRow> rows) {
  std::vector<SlopeRow> out;
  std::vector<bool> used(rows.size(), false);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (used[i]) continue;
    std::vector<double> lx, ly;
    bool finite = true;
    for (std::size_t j = i; j < rows.size(); ++j) {
      if (rows[j].method != rows[i].method || rows[j].tau != rows[i].tau) continue;
      used[j] = true;
      if (!(rows[j].err > 0.0) || !(rows[j].param > 0.0)) finite = false;
      lx.push_back(std::log(rows[j].param));
      ly.push_back(std::log(rows[j].err));
    }
    double slope = std::numeric_limits<double>::quiet_NaN();
    if (finite && lx.size() >= 2) {
      const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
      const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
      double sxy = 0.0;
      double sxx = 0.0;
      for (std::size_t k = 0; k < lx.size(); ++k) {
        sxy += (lx[k] - mx) * (ly[k] - my);
        sxx += (lx[k] - mx) * (lx[k] - mx);
      }
      if (sxx > 0.0) slope = sxy / sxx;
    }
    out.push_back({rows[i].method, rows[i].tau, slope});
  }
  return out;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::string out = "method,param,tau,err\n";
  for (const auto& r : rows) {
    out += r.method + "," + num(r.param) + "," + num(r.tau) + "," + num(r.err) + "\n";
  }
  return out;
}

std::string slopes_csv(std::span<const SlopeRow> rows) {
  std::string out = "method,tau,slope\n";
  for (const auto& r : rows) out += r.method + "," + num(r.tau) + "," + num(r.slope) + "\n";
  return out;
}

// ------------------------------------------------------------------ images

void emit_scalar_image(const ScalarGrid& grid, const std::filesystem::path& path,
                       std::optional<ImageRange> range) {
  if (grid.dims.size() != 2) throw std::invalid_argument("images need a 2D grid; emit 3D grids per slice");
  const int w = grid.dims[0];
  const int h = grid.dims[1];
  double lo = 0.0;
  double hi = 0.0;
  if (range) {
    lo = range->lo;
    hi = range->hi;
  } else if (!grid.values.empty()) {
    const auto [mn, mx] = std::minmax_element(grid.values.begin(), grid.values.end());
    lo = *mn;
    hi = *mx;
  }
  std::ostringstream head;
  head << "P5\n# x [" << num(grid.lo[0]) << "," << num(grid.hi[0]) << "] y [" << num(grid.lo[1])
       << "," << num(grid.hi[1]) << "] range [" << num(lo) << "," << num(hi)
       << "] row 0 is max y\n"
       << w << " " << h << "\n255\n";
  std::string data = head.str();
  for (int r = 0; r < h; ++r) {
    const int j = h - 1 - r;
    for (int i = 0; i < w; ++i) {
      const double v = grid.values[grid.index(i, j)];
      double q = hi > lo ? (v - lo) / (hi - lo) : 0.0;
      q = std::clamp(q, 0.0, 1.0);
      data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(q * 255.0))));
    }
  }
  io::write_atomic(path, data);
}

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in = io::open_binary(path);
  std::string magic;
  std::getline(in, magic);
  if (magic != "P5") throw FormatError("'" + path.string() + "': not a binary PGM (P5)");
  PgmImage img;
  while (in.peek() == '#') {
    std::string line;
    std::getline(in, line);
    if (img.comment.empty()) img.comment = line.substr(1);
  }
  int maxval = 0;
  if (!(in >> img.width >> img.height >> maxval) || maxval != 255 || img.width < 1 || img.height < 1) {
    throw FormatError("'" + path.string() + "': bad PGM header");
  }
  in.get();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError("'" + path.string() + "': truncated PGM payload");
  }
  return img;
}

}  // namespace nifm
