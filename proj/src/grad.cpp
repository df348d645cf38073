#include "nifm/grad.hpp"

#include <algorithm>
#include <cmath>

#include "nifm/error.hpp"
#include "nifm/parallel.hpp"
#include "nifm/rng.hpp"

namespace nifm {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr Eigen::Index kShard = 256;

// Unit residual directions scaled by 1/count; zero residuals stay zero.
MatrixXd residual_directions(const MatrixXd& r, double count, std::span<double> norms) {
  MatrixXd dir = MatrixXd::Zero(r.rows(), r.cols());
  for (Eigen::Index b = 0; b < r.cols(); ++b) {
    const double norm = r.col(b).norm();
    norms[static_cast<std::size_t>(b)] = norm;
    if (norm > 0.0) dir.col(b) = r.col(b) / (norm * count);
  }
  return dir;
}

double mean_norm(const MatrixXd& r) {
  if (r.cols() == 0) throw std::invalid_argument("loss over an empty batch");
  return r.colwise().norm().sum() / static_cast<double>(r.cols());
}

void add_matrix(std::span<double> grad, const TensorInfo& t, const MatrixXd& g) {
  Eigen::Map<RowMatrix> dst(grad.data() + t.offset, t.shape[0], t.shape[1]);
  dst += g;
}

void add_vector(std::span<double> grad, const TensorInfo& t, const VectorXd& g) {
  Eigen::Map<VectorXd> dst(grad.data() + t.offset, static_cast<Eigen::Index>(t.size));
  dst += g;
}

bool any_active(const StageMask& mask, const std::vector<int>& tensors) {
  return std::any_of(tensors.begin(), tensors.end(), [&](int i) { return mask.contains(i); });
}

// Back-propagates d(loss)/d(encoder output) through the MLP and into the grids.
void encoder_backward(const NifmModel& model, Encoder e, const MatrixXd& coords,
                      const detail::EncoderTrace& tr, const MatrixXd& out_grad,
                      const StageMask& mask, std::span<double> grad) {
  const auto& mlp = model.mlp_tensors(e);
  const auto& tensors = model.tensors();
  const int hidden = static_cast<int>(mlp.size()) - 1;
  MatrixXd upstream = out_grad;
  for (int i = hidden; i >= 0; --i) {
    const MatrixXd& in = i == 0 ? tr.features : tr.act[i - 1];
    MatrixXd pre_grad = upstream;
    if (i < hidden) pre_grad = (upstream.array() * detail::swish_d1(tr.pre[i].array())).matrix();
    if (mask.contains(mlp[i])) add_matrix(grad, tensors[mlp[i]], pre_grad * in.transpose());
    upstream = model.matrix(mlp[i]).transpose() * pre_grad;
  }
  if (any_active(mask, model.grid_tensors(e))) {
    detail::scatter_features(model, e, coords, upstream, grad);
  }
}

QueryBatch slice(const QueryBatch& b, Eigen::Index start, Eigen::Index count) {
  return {b.x.middleCols(start, count), b.t.segment(start, count), b.tau.segment(start, count)};
}

// Sums shard results per worker in shard order, then workers in index order.
template <typename ShardFn>
LossGrad sharded(const NifmModel& model, Eigen::Index count, const StageMask& mask, int threads,
                 ShardFn&& shard_fn) {
  if (count == 0) throw std::invalid_argument("gradient over an empty batch");
  const std::size_t params = model.params().size();
  const std::size_t shards = static_cast<std::size_t>((count + kShard - 1) / kShard);
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), shards);
  std::vector<std::vector<double>> buffers(workers, std::vector<double>(params, 0.0));
  std::vector<double> norms(static_cast<std::size_t>(count), 0.0);
  parallel_for(workers, static_cast<int>(workers), [&](std::size_t w) {
    const std::size_t lo = shards * w / workers;
    const std::size_t hi = shards * (w + 1) / workers;
    for (std::size_t s = lo; s < hi; ++s) {
      const Eigen::Index start = static_cast<Eigen::Index>(s) * kShard;
      const Eigen::Index len = std::min(kShard, count - start);
      shard_fn(start, len, std::span<double>(buffers[w]),
               std::span<double>(norms).subspan(static_cast<std::size_t>(start),
                                                static_cast<std::size_t>(len)));
    }
  });
  LossGrad out;
  out.grad.flat = std::move(buffers[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    for (std::size_t i = 0; i < params; ++i) out.grad.flat[i] += buffers[w][i];
  }
  double total = 0.0;
  for (double v : norms) total += v;
  out.loss = total / static_cast<double>(count);
  out.sample_loss = std::move(norms);

  const auto& tensors = model.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto g = out.grad.of(tensors[i]);
    if (!mask.contains(static_cast<int>(i))) {
      std::fill(g.begin(), g.end(), 0.0);
      continue;
    }
    for (double v : g) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite gradient in tensor '" + tensors[i].name + "'");
      }
    }
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------------ masks

StageMask StageMask::stage1(const NifmModel& model) {
  const auto& lay = model.layout();
  StageMask m;
  m.active.assign(model.tensors().size(), false);
  for (int i : lay.nu_grid) m.active[i] = true;
  for (int i : lay.nu_mlp) m.active[i] = true;
  m.active[lay.gate[0]] = true;
  m.active[lay.out] = true;
  m.finetune.assign(model.tensors().size(), false);
  return m;
}

StageMask StageMask::stage2(const NifmModel& model) {
  StageMask m;
  m.finetune = stage1(model).active;
  m.active.assign(model.tensors().size(), true);
  return m;
}

// ----------------------------------------------------------------- losses

double loss_stage1(const NifmModel& model, const VelocityBatch& batch) {
  return mean_norm(velocity_batch(model, batch.x, batch.t) - batch.v);
}

MatrixXd stage2_targets(const NifmModel& model, const QueryBatch& batch, StepPolicy policy) {
  const double voxel = model.config().time_voxel;
  std::vector<int> steps(static_cast<std::size_t>(batch.size()));
  for (Eigen::Index b = 0; b < batch.size(); ++b) {
    steps[static_cast<std::size_t>(b)] = k_for_tau(policy, std::abs(batch.tau[b]) / voxel);
  }
  const MatrixXd end = multi_step_batch(model, batch, steps);
  return velocity_batch(model, end, batch.t + batch.tau);
}

double derivative_loss(const NifmModel& model, const QueryBatch& batch, const MatrixXd& targets) {
  return mean_norm(tau_derivative_batch(model, batch) - targets);
}

double loss_stage2(const NifmModel& model, const QueryBatch& batch, StepPolicy policy) {
  return derivative_loss(model, batch, stage2_targets(model, batch, policy));
}

QueryBatch supervised_batch(std::span<const FlowMapSample> samples, MatrixXd& targets) {
  if (samples.empty()) throw std::invalid_argument("empty flow-map sample batch");
  const Eigen::Index n = samples[0].query.x.size();
  const Eigen::Index count = static_cast<Eigen::Index>(samples.size());
  QueryBatch b;
  b.x.resize(n, count);
  b.t.resize(count);
  b.tau.resize(count);
  targets.resize(n, count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    b.x.col(i) = s.query.x;
    b.t[i] = s.query.t;
    b.tau[i] = s.query.tau;
    targets.col(i) = s.velocity;
  }
  return b;
}

double loss_flowmap_supervised(const NifmModel& model, std::span<const FlowMapSample> samples) {
  MatrixXd targets;
  const QueryBatch b = supervised_batch(samples, targets);
  return derivative_loss(model, b, targets);
}

// --------------------------------------------------------------- backward

LossGrad backward_stage1(const NifmModel& model, const VelocityBatch& batch, const StageMask& mask,
                         int threads) {
  const auto& lay = model.layout();
  const auto& tensors = model.tensors();
  const double scale = model.config().tau_scale;
  const double count = static_cast<double>(batch.size());
  return sharded(model, batch.size(), mask, threads,
                 [&](Eigen::Index start, Eigen::Index len, std::span<double> grad,
                     std::span<double> norms) {
    const MatrixXd x = batch.x.middleCols(start, len);
    const MatrixXd coords = detail::normalized_coords(model, x, batch.t.segment(start, len));
    detail::EncoderTrace nu;
    detail::run_encoder(model, Encoder::Nu, coords, nu);
    const VectorXd m0 = model.vector(lay.gate[0]);
    const MatrixXd gated = (nu.out.array().colwise() * m0.array()).matrix();
    const auto w_out = model.matrix(lay.out);
    const MatrixXd r = (w_out * gated) / scale - batch.v.middleCols(start, len);
    const MatrixXd dir = residual_directions(r, count, norms);

    add_matrix(grad, tensors[lay.out], dir * gated.transpose() / scale);
    const MatrixXd gated_grad = w_out.transpose() * dir / scale;
    add_vector(grad, tensors[lay.gate[0]], (gated_grad.array() * nu.out.array()).rowwise().sum());
    const MatrixXd a_grad = (gated_grad.array().colwise() * m0.array()).matrix();
    encoder_backward(model, Encoder::Nu, coords, nu, a_grad, mask, grad);
  });
}

LossGrad backward_derivative(const NifmModel& model, const QueryBatch& batch,
                             const MatrixXd& targets, const StageMask& mask, int threads) {
  const auto& lay = model.layout();
  const auto& tensors = model.tensors();
  const int blocks = model.config().blocks;
  const double scale = model.config().tau_scale;
  const double count = static_cast<double>(batch.size());
  if (targets.cols() != batch.size()) throw std::invalid_argument("one target per query required");

  return sharded(model, batch.size(), mask, threads,
                 [&](Eigen::Index start, Eigen::Index len, std::span<double> grad,
                     std::span<double> norms) {
    const detail::Trace tr = detail::run(model, slice(batch, start, len), true);
    const MatrixXd r = tr.disp_dot / scale - targets.middleCols(start, len);
    const MatrixXd dir = residual_directions(r, count, norms);

    const auto w_out = model.matrix(lay.out);
    add_matrix(grad, tensors[lay.out], dir * tr.zdot[blocks].transpose() / scale);
    // Only the tangent reaches the loss, so the primal adjoint starts at zero.
    ArrayXXd zdot_bar = (w_out.transpose() * dir / scale).array();
    ArrayXXd z_bar = ArrayXXd::Zero(zdot_bar.rows(), zdot_bar.cols());
    const ArrayXXd s = tr.span.replicate(zdot_bar.rows(), 1).array();

    auto gate_grad = [&](int l, const ArrayXXd& g_bar, const ArrayXXd& gdot_bar) {
      const ArrayXXd& g = tr.gate[l];
      const VectorXd m = model.vector(lay.gate[l]);
      const ArrayXXd sech2 = 1.0 - g.square();
      const ArrayXXd mg = g.colwise() * m.array();
      const ArrayXXd dm = g_bar * s * sech2 + gdot_bar * sech2 * (1.0 - 2.0 * mg * s);
      add_vector(grad, tensors[lay.gate[l]], dm.rowwise().sum().matrix());
    };

    MatrixXd tau_out_grad;
    for (int l = blocks; l >= 1; --l) {
      const ArrayXXd p = tr.pre[l].array();
      const ArrayXXd pdot = tr.pdot[l].array();
      const ArrayXXd h = detail::swish(p);
      const ArrayXXd h1 = detail::swish_d1(p);
      const ArrayXXd h2 = detail::swish_d2(p);
      const ArrayXXd& g = tr.gate[l];
      const ArrayXXd& gdot = tr.gate_dot[l];

      const ArrayXXd g_bar = zdot_bar * h1 * pdot + z_bar * h;
      const ArrayXXd gdot_bar = zdot_bar * h;
      const ArrayXXd h_bar = zdot_bar * gdot + z_bar * g;
      const ArrayXXd h1_bar = zdot_bar * g * pdot;
      const ArrayXXd pdot_bar = zdot_bar * g * h1;
      const ArrayXXd p_bar = h_bar * h1 + h1_bar * h2;
      gate_grad(l, g_bar, gdot_bar);

      if (l >= 2) {
        const int w = lay.mixer[l - 1];
        if (mask.contains(w)) {
          add_matrix(grad, tensors[w],
                     p_bar.matrix() * tr.z[l - 1].transpose() +
                         pdot_bar.matrix() * tr.zdot[l - 1].transpose());
        }
        const auto W = model.matrix(w);
        z_bar += (W.transpose() * p_bar.matrix()).array();
        zdot_bar += (W.transpose() * pdot_bar.matrix()).array();
      } else {
        const ArrayXXd u = tr.mixed.array();
        const ArrayXXd u_bar = p_bar * tr.z[0].array() + pdot_bar * tr.zdot[0].array();
        const int w = lay.mixer[0];
        if (mask.contains(w)) add_matrix(grad, tensors[w], u_bar.matrix() * tr.tau.out.transpose());
        tau_out_grad = model.matrix(w).transpose() * u_bar.matrix();
        z_bar += p_bar * u;
        zdot_bar += pdot_bar * u;
      }
    }

    const ArrayXXd a = tr.nu.out.array();
    gate_grad(0, z_bar * a, zdot_bar * a);
    const MatrixXd a_grad = (z_bar * tr.gate[0] + zdot_bar * tr.gate_dot[0]).matrix();
    encoder_backward(model, Encoder::Nu, tr.coords, tr.nu, a_grad, mask, grad);
    encoder_backward(model, Encoder::Tau, tr.coords, tr.tau, tau_out_grad, mask, grad);
  });
}

LossGrad backward_stage2(const NifmModel& model, const QueryBatch& batch, StepPolicy policy,
                         const StageMask& mask, int threads) {
  return backward_derivative(model, batch, stage2_targets(model, batch, policy), mask, threads);
}

// ---------------------------------------------------- finite-difference check

NifmModel toy_model(int n, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.n = n;
  cfg.d = 8;
  cfg.resolutions = {Resolution(static_cast<std::size_t>(n + 1), 3)};
  Vec lo = Vec::Zero(n);
  Vec hi = Vec::Ones(n);
  hi[0] = 2.0;
  cfg.domain = Domain::box(lo, hi, 0.0, 1.0);
  cfg.tau_scale = 0.5;
  cfg.time_voxel = 0.5;
  NifmModel model = init_params(cfg, seed);
  CounterRng rng(seed, 0x746f79);
  const auto& lay = model.layout();
  auto spread = [&](const std::vector<int>& ids, double lo_v, double hi_v) {
    for (int i : ids) {
      for (double& v : model.data(model.tensors()[i])) v = rng.uniform(lo_v, hi_v);
    }
  };
  spread(lay.nu_grid, -1.0, 1.0);
  spread(lay.tau_grid, -1.0, 1.0);
  spread(lay.gate, 0.3, 1.5);
  model.round_to_f32();
  return model;
}

std::vector<GradCheckRow> check_gradients(const NifmModel& model, GradCheckLoss loss,
                                          std::uint64_t seed, int batch_size) {
  const Domain& dom = model.config().domain;
  const int n = dom.n;
  CounterRng rng(seed, 0x636b);
  QueryBatch q;
  q.x.resize(n, batch_size);
  q.t.resize(batch_size);
  q.tau.resize(batch_size);
  VelocityBatch vb;
  vb.v.resize(n, batch_size);
  for (int b = 0; b < batch_size; ++b) {
    for (int a = 0; a < n; ++a) {
      // Stay clear of the domain walls where clamping makes the loss kinked.
      q.x(a, b) = dom.lo[a] + (0.1 + 0.8 * rng.uniform()) * (dom.hi[a] - dom.lo[a]);
      vb.v(a, b) = rng.uniform(-1.0, 1.0);
    }
    q.t[b] = dom.t_lo + (0.1 + 0.8 * rng.uniform()) * (dom.t_hi - dom.t_lo);
    q.tau[b] = rng.uniform(0.1, 1.0) * model.config().tau_scale;
  }
  vb.x = q.x;
  vb.t = q.t;

  const bool stage1 = loss == GradCheckLoss::Stage1;
  const StageMask mask = stage1 ? StageMask::stage1(model) : StageMask::stage2(model);
  const MatrixXd targets = stage1 ? MatrixXd() : stage2_targets(model, q, StepPolicy::Sqrt);
  auto eval = [&](const NifmModel& m) {
    return stage1 ? loss_stage1(m, vb) : derivative_loss(m, q, targets);
  };
  const LossGrad an = stage1 ? backward_stage1(model, vb, mask) : backward_derivative(model, q, targets, mask);

  std::vector<GradCheckRow> rows;
  NifmModel probe = model;
  auto params = probe.params();
  for (std::size_t i = 0; i < model.tensors().size(); ++i) {
    if (!mask.contains(static_cast<int>(i))) continue;
    const TensorInfo& t = model.tensors()[i];
    double diff = 0.0;
    double an_max = 0.0;
    double fd_max = 0.0;
    for (std::size_t j = t.offset; j < t.offset + t.size; ++j) {
      const double p = params[j];
      const double delta = 1e-3 * std::max(std::abs(p), 1.0);
      params[j] = p + delta;
      const double up = eval(probe);
      params[j] = p - delta;
      const double down = eval(probe);
      params[j] = p;
      const double fd = (up - down) / (2.0 * delta);
      const double g = an.grad.flat[j];
      diff = std::max(diff, std::abs(fd - g));
      an_max = std::max(an_max, std::abs(g));
      fd_max = std::max(fd_max, std::abs(fd));
    }
    const double denom = std::max(an_max, fd_max);
    rows.push_back({t.name, t.size, denom < 1e-14 ? 0.0 : diff / denom});
  }
  return rows;
}

}  // namespace nifm
