#include "nifm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "nifm/error.hpp"
#include "nifm/rng.hpp"

namespace nifm {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ------------------------------------------------------------ step policy

int k_for_tau(StepPolicy policy, double tau_g) {
  if (tau_g < 0) throw std::invalid_argument("k_for_tau needs tau_g >= 0");
  // Tolerance keeps exact integers (e.g. tau_g = 4 under Sqrt) from rounding up.
  auto up = [](double v) { return std::max(1, static_cast<int>(std::ceil(v - 1e-9))); };
  switch (policy) {
    case StepPolicy::Sqrt: return up(std::sqrt(tau_g));
    case StepPolicy::Full: return up(tau_g);
    case StepPolicy::Log: return up(std::log1p(tau_g));
    case StepPolicy::Single: return 1;
  }
  return 1;
}

std::string_view to_string(StepPolicy policy) {
  switch (policy) {
    case StepPolicy::Sqrt: return "sqrt";
    case StepPolicy::Full: return "full";
    case StepPolicy::Log: return "log";
    case StepPolicy::Single: return "single";
  }
  return "sqrt";
}

StepPolicy parse_step_policy(std::string_view name) {
  for (auto p : {StepPolicy::Sqrt, StepPolicy::Full, StepPolicy::Log, StepPolicy::Single}) {
    if (to_string(p) == name) return p;
  }
  throw ConfigError("unknown step policy '" + std::string(name) +
                    "' (expected sqrt, full, log or single)");
}

// ------------------------------------------------------- configuration

std::vector<Resolution> grid_resolutions(const Resolution& base, double scale, int levels) {
  if (levels < 1) throw std::invalid_argument("levels must be >= 1");
  if (!(scale >= 1.0)) throw std::invalid_argument("resolution scale must be >= 1");
  std::vector<Resolution> out(levels, Resolution(base.size()));
  for (int l = 0; l < levels; ++l) {
    const double f = std::pow(scale, l);
    for (std::size_t a = 0; a < base.size(); ++a) {
      out[l][a] = static_cast<int>(std::ceil(base[a] * f - 1e-9));
    }
  }
  return out;
}

void ModelConfig::validate() const {
  domain.validate();
  if (n != domain.n) throw ConfigError("model dimension does not match its domain");
  if (d < 1 || feat_dim < 1) throw ConfigError("model width and feature size must be >= 1");
  if (resolutions.empty()) throw ConfigError("model needs at least one grid level");
  for (const auto& r : resolutions) {
    if (static_cast<int>(r.size()) != n + 1) {
      throw ConfigError("grid resolution must list n+1 axes [t, x, y(, z)]");
    }
    for (int v : r) {
      if (v < 2) throw ConfigError("grid levels need at least 2 nodes per axis");
    }
  }
  if (nu_layers < 1 || tau_layers < 1) throw ConfigError("encoder MLPs need >= 1 layer");
  if (blocks < 1) throw ConfigError("the residual network needs >= 1 block");
  if (!(tau_scale > 0) || !(time_voxel > 0)) throw ConfigError("tau_scale and time_voxel must be > 0");
}

namespace {

std::size_t product(const Resolution& r) {
  return std::accumulate(r.begin(), r.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::size_t grid_count(const ModelConfig& cfg) {
  std::size_t total = 0;
  for (const auto& r : cfg.resolutions) total += product(r) * static_cast<std::size_t>(cfg.feat_dim);
  return total;
}

std::size_t dense_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d;
  const std::size_t in = static_cast<std::size_t>(cfg.feature_width());
  auto mlp = [&](int layers) { return d * in + static_cast<std::size_t>(layers - 1) * d * d; };
  return mlp(cfg.nu_layers) + mlp(cfg.tau_layers) + static_cast<std::size_t>(cfg.blocks + 1) * d +
         static_cast<std::size_t>(cfg.blocks) * d * d + static_cast<std::size_t>(cfg.n) * d;
}

}  // namespace

std::size_t parameter_count(const ModelConfig& cfg) { return 2 * grid_count(cfg) + dense_count(cfg); }

Resolution solve_base_resolution(const ModelConfig& skeleton, const Resolution& field_dims,
                                 double compression_ratio, double scale, int levels) {
  if (!(compression_ratio > 0)) throw ConfigError("compression ratio must be > 0");
  if (static_cast<int>(field_dims.size()) != skeleton.n + 1) {
    throw ConfigError("field dims must list n+1 axes");
  }
  const double field_floats =
      static_cast<double>(product(field_dims)) * static_cast<double>(skeleton.n);
  const double target = field_floats / compression_ratio;

  auto base_for = [&](double alpha) {
    Resolution base(field_dims.size());
    for (std::size_t a = 0; a < base.size(); ++a) {
      base[a] = std::max(2, static_cast<int>(std::ceil(alpha * field_dims[a])));
    }
    return base;
  };
  auto count_res = [&](const Resolution& base) {
    ModelConfig cfg = skeleton;
    cfg.resolutions = grid_resolutions(base, scale, levels);
    return static_cast<double>(parameter_count(cfg));
  };
  auto count_for = [&](double alpha) { return count_res(base_for(alpha)); };

  if (count_for(0.0) > target) {
    throw ConfigError("compression ratio " + std::to_string(compression_ratio) +
                      " is infeasible: grids would drop below 2 nodes per axis");
  }
  double lo = 0.0;
  double hi = 1.0;
  while (count_for(hi) <= target) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (count_for(mid) <= target ? lo : hi) = mid;
  }

  // The uniform scale moves every axis at once; refine one axis at a time.
  Resolution below = base_for(lo);
  double below_count = count_res(below);
  Resolution above = base_for(hi);
  double above_count = count_res(above);
  for (;;) {
    int grow = -1;
    double grow_count = below_count;
    for (std::size_t a = 0; a < below.size(); ++a) {
      Resolution r = below;
      ++r[a];
      const double c = count_res(r);
      if (c <= target && c > grow_count) {
        grow = static_cast<int>(a);
        grow_count = c;
      } else if (c > target && c < above_count) {
        above = r;
        above_count = c;
      }
    }
    if (grow < 0) break;
    ++below[static_cast<std::size_t>(grow)];
    below_count = grow_count;
  }
  return target - below_count <= above_count - target ? below : above;
}

// ---------------------------------------------------------------- model

NifmModel::NifmModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    TensorInfo t;
    t.name = std::move(name);
    t.size = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                             [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    t.shape = std::move(shape);
    t.offset = offset;
    offset += t.size;
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
  };
  auto add_encoder = [&](const std::string& prefix, int layers, std::vector<int>& grids,
                         std::vector<int>& mlp) {
    for (int l = 0; l < cfg_.levels(); ++l) {
      std::vector<int> shape = cfg_.resolutions[l];
      shape.push_back(cfg_.feat_dim);
      grids.push_back(add(prefix + ".grid." + std::to_string(l), shape));
    }
    int in = cfg_.feature_width();
    for (int i = 0; i < layers; ++i) {
      mlp.push_back(add(prefix + ".mlp." + std::to_string(i), {cfg_.d, in}));
      in = cfg_.d;
    }
  };
  add_encoder("nu", cfg_.nu_layers, layout_.nu_grid, layout_.nu_mlp);
  add_encoder("tau", cfg_.tau_layers, layout_.tau_grid, layout_.tau_mlp);
  for (int l = 0; l <= cfg_.blocks; ++l) layout_.gate.push_back(add("m." + std::to_string(l), {cfg_.d}));
  for (int l = 1; l <= cfg_.blocks; ++l) {
    layout_.mixer.push_back(add("W." + std::to_string(l), {cfg_.d, cfg_.d}));
  }
  layout_.out = add("W.out", {cfg_.n, cfg_.d});
  params_.assign(offset, 0.0);
}

const TensorInfo& NifmModel::tensor(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no tensor named '" + std::string(name) + "'");
}

Eigen::Map<const RowMatrix> NifmModel::matrix(int i) const {
  const auto& t = tensors_[i];
  return {params_.data() + t.offset, t.shape[0], t.shape[1]};
}

Eigen::Map<RowMatrix> NifmModel::matrix(int i) {
  const auto& t = tensors_[i];
  return {params_.data() + t.offset, t.shape[0], t.shape[1]};
}

Eigen::Map<const VectorXd> NifmModel::vector(int i) const {
  const auto& t = tensors_[i];
  return {params_.data() + t.offset, static_cast<Eigen::Index>(t.size)};
}

void NifmModel::round_to_f32() {
  for (double& p : params_) p = static_cast<double>(static_cast<float>(p));
}

NifmModel init_params(const ModelConfig& cfg, std::uint64_t seed) {
  NifmModel model(cfg);
  const CounterRng root(seed, 0x696e6974);
  const auto& lay = model.layout();
  auto is_in = [](const std::vector<int>& v, int i) {
    return std::find(v.begin(), v.end(), i) != v.end();
  };
  for (int i = 0; i < static_cast<int>(model.tensors().size()); ++i) {
    const TensorInfo& t = model.tensors()[i];
    CounterRng rng = root.split(static_cast<std::uint64_t>(i));
    auto values = model.data(t);
    if (is_in(lay.nu_grid, i) || is_in(lay.tau_grid, i)) {
      for (double& v : values) v = rng.uniform(-1e-4, 1e-4);
    } else if (is_in(lay.gate, i)) {
      std::fill(values.begin(), values.end(), 1.0);
    } else {
      const double a = std::sqrt(3.0 / t.shape[1]);
      for (double& v : values) v = rng.uniform(-a, a);
    }
  }
  model.round_to_f32();
  return model;
}

// ------------------------------------------------------------ evaluation

QueryBatch QueryBatch::from(std::span<const FlowQuery> queries) {
  QueryBatch b;
  const Eigen::Index count = static_cast<Eigen::Index>(queries.size());
  const Eigen::Index n = queries.empty() ? 0 : queries[0].x.size();
  b.x.resize(n, count);
  b.t.resize(count);
  b.tau.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& q = queries[static_cast<std::size_t>(i)];
    if (q.x.size() != n) throw std::invalid_argument("mixed query dimensions in one batch");
    b.x.col(i) = q.x;
    b.t[i] = q.t;
    b.tau[i] = q.tau;
  }
  return b;
}

namespace detail {

ArrayXXd swish(const ArrayXXd& p) { return p / (1.0 + (-p).exp()); }

ArrayXXd swish_d1(const ArrayXXd& p) {
  const ArrayXXd s = 1.0 / (1.0 + (-p).exp());
  return s + p * s * (1.0 - s);
}

ArrayXXd swish_d2(const ArrayXXd& p) {
  const ArrayXXd s = 1.0 / (1.0 + (-p).exp());
  return s * (1.0 - s) * (2.0 + p * (1.0 - 2.0 * s));
}

namespace {

// Multilinear lookup of one sample in one level: up to 16 corners.
struct Cell {
  std::size_t node[16];
  double weight[16];
  int corners = 0;
};

Cell locate(const Resolution& res, const double* coord, int axes) {
  int base[4];
  double frac[4];
  for (int a = 0; a < axes; ++a) {
    const int nodes = res[a];
    double u = coord[a] * (nodes - 1);
    const double r = std::round(u);
    if (std::abs(u - r) <= 1e-9) u = r;
    const int i0 = std::min(static_cast<int>(u), nodes - 2);
    base[a] = i0;
    frac[a] = u - i0;
  }
  Cell cell;
  cell.corners = 1 << axes;
  for (int c = 0; c < cell.corners; ++c) {
    double w = 1.0;
    std::size_t node = 0;
    for (int a = 0; a < axes; ++a) {
      const int bit = (c >> (axes - 1 - a)) & 1;
      w *= bit ? frac[a] : 1.0 - frac[a];
      node = node * static_cast<std::size_t>(res[a]) + static_cast<std::size_t>(base[a] + bit);
    }
    cell.node[c] = node;
    cell.weight[c] = w;
  }
  return cell;
}

}  // namespace

MatrixXd normalized_coords(const NifmModel& model, const MatrixXd& x, const VectorXd& t) {
  const Domain& dom = model.config().domain;
  const int n = dom.n;
  if (x.rows() != n) throw std::invalid_argument("query dimension does not match the model");
  if (!x.allFinite() || !t.allFinite()) throw NumericalError("non-finite model query");
  MatrixXd c(n + 1, x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    c(0, b) = std::clamp((t[b] - dom.t_lo) / (dom.t_hi - dom.t_lo), 0.0, 1.0);
    for (int a = 0; a < n; ++a) {
      c(a + 1, b) = std::clamp((x(a, b) - dom.lo[a]) / (dom.hi[a] - dom.lo[a]), 0.0, 1.0);
    }
  }
  return c;
}

void run_encoder(const NifmModel& model, Encoder e, const MatrixXd& coords, EncoderTrace& out) {
  const ModelConfig& cfg = model.config();
  const int axes = cfg.n + 1;
  const int F = cfg.feat_dim;
  const Eigen::Index B = coords.cols();
  out.features.setZero(cfg.feature_width(), B);
  const auto& grids = model.grid_tensors(e);
  for (int l = 0; l < cfg.levels(); ++l) {
    const double* values = model.data(model.tensors()[grids[l]]).data();
    const Resolution& res = cfg.resolutions[l];
    for (Eigen::Index b = 0; b < B; ++b) {
      const Cell cell = locate(res, coords.col(b).data(), axes);
      double* dst = out.features.col(b).data() + l * F;
      for (int c = 0; c < cell.corners; ++c) {
        const double w = cell.weight[c];
        if (w == 0.0) continue;
        const double* src = values + cell.node[c] * F;
        for (int f = 0; f < F; ++f) dst[f] += w * src[f];
      }
    }
  }
  const auto& mlp = model.mlp_tensors(e);
  const int hidden = static_cast<int>(mlp.size()) - 1;
  out.pre.resize(hidden);
  out.act.resize(hidden);
  const MatrixXd* in = &out.features;
  for (int i = 0; i < hidden; ++i) {
    out.pre[i].noalias() = model.matrix(mlp[i]) * *in;
    out.act[i] = swish(out.pre[i].array()).matrix();
    in = &out.act[i];
  }
  out.out.noalias() = model.matrix(mlp.back()) * *in;
}

void scatter_features(const NifmModel& model, Encoder e, const MatrixXd& coords,
                      const MatrixXd& feature_grad, std::span<double> grad) {
  const ModelConfig& cfg = model.config();
  const int axes = cfg.n + 1;
  const int F = cfg.feat_dim;
  const auto& grids = model.grid_tensors(e);
  for (int l = 0; l < cfg.levels(); ++l) {
    double* values = grad.data() + model.tensors()[grids[l]].offset;
    const Resolution& res = cfg.resolutions[l];
    for (Eigen::Index b = 0; b < coords.cols(); ++b) {
      const Cell cell = locate(res, coords.col(b).data(), axes);
      const double* g = feature_grad.col(b).data() + l * F;
      for (int c = 0; c < cell.corners; ++c) {
        const double w = cell.weight[c];
        if (w == 0.0) continue;
        double* dst = values + cell.node[c] * F;
        for (int f = 0; f < F; ++f) dst[f] += w * g[f];
      }
    }
  }
}

Trace run(const NifmModel& model, const QueryBatch& batch, bool tangent) {
  const ModelConfig& cfg = model.config();
  const auto& lay = model.layout();
  const int blocks = cfg.blocks;
  Trace tr;
  tr.tangent = tangent;
  tr.coords = normalized_coords(model, batch.x, batch.t);
  run_encoder(model, Encoder::Nu, tr.coords, tr.nu);
  run_encoder(model, Encoder::Tau, tr.coords, tr.tau);
  tr.span = (batch.tau / cfg.tau_scale).transpose();

  tr.gate.resize(blocks + 1);
  tr.gate_dot.resize(blocks + 1);
  for (int l = 0; l <= blocks; ++l) {
    const VectorXd m = model.vector(lay.gate[l]);
    tr.gate[l] = (m * tr.span).array().tanh();
    if (tangent) tr.gate_dot[l] = (1.0 - tr.gate[l].square()).colwise() * m.array();
  }

  tr.pre.resize(blocks + 1);
  tr.pdot.resize(blocks + 1);
  tr.z.resize(blocks + 1);
  tr.zdot.resize(blocks + 1);

  tr.z[0] = (tr.gate[0] * tr.nu.out.array()).matrix();
  if (tangent) tr.zdot[0] = (tr.gate_dot[0] * tr.nu.out.array()).matrix();

  tr.mixed.noalias() = model.matrix(lay.mixer[0]) * tr.tau.out;
  for (int l = 1; l <= blocks; ++l) {
    if (l == 1) {
      tr.pre[1] = (tr.z[0].array() * tr.mixed.array()).matrix();
    } else {
      tr.pre[l].noalias() = model.matrix(lay.mixer[l - 1]) * tr.z[l - 1];
    }
    const ArrayXXd h = swish(tr.pre[l].array());
    tr.z[l] = tr.z[l - 1] + (tr.gate[l] * h).matrix();
    if (tangent) {
      if (l == 1) {
        tr.pdot[1] = (tr.zdot[0].array() * tr.mixed.array()).matrix();
      } else {
        tr.pdot[l].noalias() = model.matrix(lay.mixer[l - 1]) * tr.zdot[l - 1];
      }
      tr.zdot[l] = tr.zdot[l - 1] +
                   (tr.gate_dot[l] * h + tr.gate[l] * swish_d1(tr.pre[l].array()) * tr.pdot[l].array())
                       .matrix();
    }
  }
  const auto w_out = model.matrix(lay.out);
  tr.disp.noalias() = w_out * tr.z[blocks];
  if (tangent) tr.disp_dot.noalias() = w_out * tr.zdot[blocks];
  return tr;
}

}  // namespace detail

Eigen::VectorXd interpolate_features(const NifmModel& model, Encoder e, const Vec& x, double t) {
  detail::EncoderTrace tr;
  const MatrixXd coords = detail::normalized_coords(model, MatrixXd(x), VectorXd::Constant(1, t));
  run_encoder(model, e, coords, tr);
  return tr.features.col(0);
}

Eigen::VectorXd encode(const NifmModel& model, Encoder e, const Vec& x, double t) {
  detail::EncoderTrace tr;
  const MatrixXd coords = detail::normalized_coords(model, MatrixXd(x), VectorXd::Constant(1, t));
  run_encoder(model, e, coords, tr);
  return tr.out.col(0);
}

MatrixXd forward_batch(const NifmModel& model, const QueryBatch& batch) {
  const detail::Trace tr = detail::run(model, batch, false);
  return batch.x + tr.disp;
}

MatrixXd velocity_batch(const NifmModel& model, const MatrixXd& x, const VectorXd& t) {
  const auto& lay = model.layout();
  detail::EncoderTrace nu;
  run_encoder(model, Encoder::Nu, detail::normalized_coords(model, x, t), nu);
  const VectorXd m0 = model.vector(lay.gate[0]);
  const MatrixXd gated = (nu.out.array().colwise() * m0.array()).matrix();
  return (model.matrix(lay.out) * gated) / model.config().tau_scale;
}

MatrixXd tau_derivative_batch(const NifmModel& model, const QueryBatch& batch) {
  const detail::Trace tr = detail::run(model, batch, true);
  return tr.disp_dot / model.config().tau_scale;
}

MatrixXd multi_step_batch(const NifmModel& model, const QueryBatch& batch,
                          std::span<const int> steps) {
  const Eigen::Index B = batch.size();
  if (static_cast<Eigen::Index>(steps.size()) != B) {
    throw std::invalid_argument("one step count per query is required");
  }
  const Domain& dom = model.config().domain;
  MatrixXd pos = batch.x;
  VectorXd time = batch.t;
  int max_k = 0;
  for (int k : steps) {
    if (k < 1) throw std::invalid_argument("step count must be >= 1");
    max_k = std::max(max_k, k);
  }
  std::vector<Eigen::Index> active;
  active.reserve(static_cast<std::size_t>(B));
  for (int j = 0; j < max_k; ++j) {
    active.clear();
    for (Eigen::Index b = 0; b < B; ++b) {
      if (steps[static_cast<std::size_t>(b)] > j) active.push_back(b);
    }
    QueryBatch sub;
    const Eigen::Index A = static_cast<Eigen::Index>(active.size());
    sub.x.resize(pos.rows(), A);
    sub.t.resize(A);
    sub.tau.resize(A);
    for (Eigen::Index i = 0; i < A; ++i) {
      const Eigen::Index b = active[static_cast<std::size_t>(i)];
      sub.x.col(i) = pos.col(b);
      sub.t[i] = time[b];
      sub.tau[i] = batch.tau[b] / steps[static_cast<std::size_t>(b)];
    }
    const MatrixXd out = forward_batch(model, sub);
    for (Eigen::Index i = 0; i < A; ++i) {
      const Eigen::Index b = active[static_cast<std::size_t>(i)];
      const int k = steps[static_cast<std::size_t>(b)];
      if (j + 1 < k) {
        pos.col(b) = dom.clamp(Vec(out.col(i)));
        time[b] = batch.t[b] + (j + 1) * (batch.tau[b] / k);
      } else {
        pos.col(b) = out.col(i);
      }
    }
  }
  return pos;
}

Vec forward(const NifmModel& model, const FlowQuery& q) {
  return forward_batch(model, QueryBatch::single(q)).col(0);
}

Vec instantaneous_velocity(const NifmModel& model, const Vec& x, double t) {
  return velocity_batch(model, MatrixXd(x), VectorXd::Constant(1, t)).col(0);
}

Vec tau_derivative(const NifmModel& model, const FlowQuery& q) {
  return tau_derivative_batch(model, QueryBatch::single(q)).col(0);
}

Vec forward_multi_step(const NifmModel& model, const FlowQuery& q, int k) {
  const int steps[] = {k};
  return multi_step_batch(model, QueryBatch::single(q), steps).col(0);
}

}  // namespace nifm
