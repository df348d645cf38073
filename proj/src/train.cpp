#include "nifm/train.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>

#include "nifm/error.hpp"
#include "nifm/io.hpp"
#include "nifm/rng.hpp"

namespace nifm {

using Eigen::MatrixXd;

// ------------------------------------------------------------- model setup

ModelConfig configure_model(const Domain& domain, double time_voxel, const Resolution& field_dims,
                            const ModelOptions& options) {
  if (!(options.tau_max > 0)) throw ConfigError("tau_max must be > 0");
  if (options.levels < 1) throw ConfigError("levels must be >= 1");
  ModelConfig cfg;
  cfg.n = domain.n;
  cfg.d = options.d;
  cfg.feat_dim = options.feat_dim;
  cfg.domain = domain;
  cfg.time_voxel = time_voxel;
  cfg.tau_scale = options.tau_max * time_voxel;
  Resolution base;
  if (options.base_resolution) {
    base = *options.base_resolution;
  } else {
    ModelConfig skeleton = cfg;
    skeleton.resolutions = {Resolution(static_cast<std::size_t>(cfg.n + 1), 2)};
    base = solve_base_resolution(skeleton, field_dims, options.compression_ratio, options.scale,
                                 options.levels);
  }
  cfg.resolutions = grid_resolutions(base, options.scale, options.levels);
  cfg.validate();
  return cfg;
}

// --------------------------------------------------------------- optimizer

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, long step, double lr, const AdamConfig& cfg) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
  }
}

void adam_step(NifmModel& model, const ParamGradients& grads, AdamState& state,
               const std::vector<double>& tensor_lr, const AdamConfig& cfg) {
  const std::size_t size = model.params().size();
  if (state.m.size() != size) {
    state.m.assign(size, 0.0);
    state.v.assign(size, 0.0);
    state.step = 0;
  }
  ++state.step;
  const auto& tensors = model.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensor_lr[i] == 0.0) continue;
    const TensorInfo& t = tensors[i];
    auto p = model.data(t);
    adam_update(p, grads.of(t), {state.m.data() + t.offset, t.size},
                {state.v.data() + t.offset, t.size}, state.step, tensor_lr[i], cfg);
    for (double& x : p) {
      x = static_cast<double>(static_cast<float>(x));
      if (!std::isfinite(x)) throw NumericalError("non-finite update in tensor '" + t.name + "'");
    }
  }
}

// ---------------------------------------------------------------- training

double StageSchedule::lr_at(int step) const {
  return lr * std::pow(decay_factor, step / decay_every);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  for (const StageSchedule* s : {&stage1, &stage2}) {
    if (s->steps < 0) throw ConfigError("stage steps must be >= 0");
    if (!(s->lr > 0)) throw ConfigError("learning rates must be > 0");
    if (s->decay_every < 1) throw ConfigError("decay_every must be >= 1");
    if (!(s->decay_factor > 0 && s->decay_factor < 1)) {
      throw ConfigError("decay_factor must lie in (0, 1)");
    }
  }
  if (!(finetune_lr >= 0 && finetune_lr < stage2.lr)) {
    throw ConfigError("finetune_lr must be >= 0 and below the stage-2 learning rate");
  }
  if (!(tau_min > 0)) throw ConfigError("tau_min must be > 0");
  if (trace_every < 1 || smooth_window < 1 || divergence_window < 1) {
    throw ConfigError("trace_every, smooth_window and divergence_window must be >= 1");
  }
}

double tau_max_grid(const NifmModel& model) {
  return model.config().tau_scale / model.config().time_voxel;
}

namespace {

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

Vec uniform_position(const Domain& dom, CounterRng& rng) {
  Vec x(dom.n);
  for (int a = 0; a < dom.n; ++a) x[a] = rng.uniform(dom.lo[a], dom.hi[a]);
  return x;
}

// Spans in grid units plus start times leaving room for the span when the
// time range allows it.
QueryBatch sample_spans(const NifmModel& model, const TrainConfig& cfg, CounterRng& rng,
                        std::vector<double>& tau_g) {
  const Domain& dom = model.config().domain;
  const double hi_g = tau_max_grid(model);
  const Eigen::Index B = cfg.batch_size;
  QueryBatch b;
  b.x.resize(dom.n, B);
  b.t.resize(B);
  b.tau.resize(B);
  tau_g.resize(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    b.x.col(i) = uniform_position(dom, rng);
    const double g = rng.uniform(cfg.tau_min, hi_g);
    tau_g[static_cast<std::size_t>(i)] = g;
    b.tau[i] = g * model.config().time_voxel;
    b.t[i] = rng.uniform(dom.t_lo, std::max(dom.t_lo, dom.t_hi - b.tau[i]));
  }
  return b;
}

std::array<double, 4> bucket_means(const std::vector<double>& losses,
                                   const std::vector<double>& tau_g, double lo, double hi) {
  std::array<double, 4> sum{};
  std::array<int, 4> count{};
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const int q = std::clamp(static_cast<int>(4.0 * (tau_g[i] - lo) / (hi - lo)), 0, 3);
    sum[q] += losses[i];
    ++count[q];
  }
  std::array<double, 4> out{};
  for (int q = 0; q < 4; ++q) {
    out[q] = count[q] ? sum[q] / count[q] : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// Shared loop bookkeeping: trace, smoothing, divergence guard, progress.
template <typename StepFn>
StageReport run_stage(const std::string& name, int steps, const TrainConfig& cfg,
                      bool buckets, StepFn&& step_fn) {
  StageReport rep;
  rep.name = name;
  rep.steps = steps;
  rep.has_tau_buckets = buckets;
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  int above = 0;
  for (int s = 0; s < steps; ++s) {
    LossPoint point;
    point.step = s;
    point.loss = step_fn(s, point.by_tau);
    losses.push_back(point.loss);
    if (!std::isfinite(point.loss)) {
      throw NumericalError(name + ": non-finite loss at step " + std::to_string(s));
    }
    if (point.loss > cfg.divergence_factor * losses.front()) {
      if (++above >= cfg.divergence_window) {
        throw DivergenceError(name + " diverged: loss above " + std::to_string(cfg.divergence_factor) +
                              "x its initial value for " + std::to_string(above) +
                              " consecutive steps (step " + std::to_string(s) + ")");
      }
    } else {
      above = 0;
    }
    if (s % cfg.trace_every == 0 || s == steps - 1) rep.trace.push_back(point);
    if (cfg.log_every > 0 && (s % cfg.log_every == 0 || s == steps - 1)) {
      std::cerr << name << " step " << s << "/" << steps << " loss " << point.loss << "\n";
    }
  }
  if (!losses.empty()) {
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(cfg.smooth_window), losses.size());
    double head = 0.0;
    double tail = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      head += losses[i];
      tail += losses[losses.size() - w + i];
    }
    rep.initial_loss = losses.front();
    rep.final_loss = losses.back();
    rep.initial_smoothed = head / static_cast<double>(w);
    rep.final_smoothed = tail / static_cast<double>(w);
  }
  rep.wall_seconds = elapsed(start);
  return rep;
}

std::vector<double> stage2_rates(const NifmModel& model, const StageMask& mask,
                                 const TrainConfig& cfg, int step) {
  const double decay = std::pow(cfg.stage2.decay_factor, step / cfg.stage2.decay_every);
  std::vector<double> lr(model.tensors().size());
  for (std::size_t i = 0; i < lr.size(); ++i) {
    lr[i] = (mask.finetune[i] ? cfg.finetune_lr : cfg.stage2.lr) * decay;
  }
  return lr;
}

}  // namespace

StageReport train_stage1(NifmModel& model, const VectorFieldSource& src, const TrainConfig& cfg) {
  cfg.validate();
  if (src.dim() != model.config().n) throw ConfigError("field and model dimensions differ");
  const Domain& dom = model.config().domain;
  const StageMask mask = StageMask::stage1(model);
  const CounterRng base(cfg.seed, 1);
  AdamState adam;
  return run_stage("stage1", cfg.stage1.steps, cfg, false, [&](int s, std::array<double, 4>&) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(s));
    VelocityBatch batch;
    batch.x.resize(dom.n, cfg.batch_size);
    batch.t.resize(cfg.batch_size);
    batch.v.resize(dom.n, cfg.batch_size);
    for (int i = 0; i < cfg.batch_size; ++i) {
      batch.x.col(i) = uniform_position(dom, rng);
      batch.t[i] = rng.uniform(dom.t_lo, dom.t_hi);
      batch.v.col(i) = src.sample(batch.x.col(i), batch.t[i]);
    }
    const LossGrad lg = backward_stage1(model, batch, mask, cfg.threads);
    std::vector<double> lr(model.tensors().size(), 0.0);
    for (std::size_t i = 0; i < lr.size(); ++i) {
      if (mask.active[i]) lr[i] = cfg.stage1.lr_at(s);
    }
    adam_step(model, lg.grad, adam, lr, cfg.adam);
    return lg.loss;
  });
}

StageReport train_stage2(NifmModel& model, const TrainConfig& cfg) {
  cfg.validate();
  const double hi_g = tau_max_grid(model);
  if (!(cfg.tau_min < hi_g)) throw ConfigError("tau_min must be below tau_max");
  const StageMask mask = StageMask::stage2(model);
  const CounterRng base(cfg.seed, 2);
  AdamState adam;
  return run_stage("stage2", cfg.stage2.steps, cfg, true, [&](int s, std::array<double, 4>& by_tau) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(s));
    std::vector<double> tau_g;
    const QueryBatch batch = sample_spans(model, cfg, rng, tau_g);
    const LossGrad lg = backward_stage2(model, batch, cfg.policy, mask, cfg.threads);
    by_tau = bucket_means(lg.sample_loss, tau_g, cfg.tau_min, hi_g);
    adam_step(model, lg.grad, adam, stage2_rates(model, mask, cfg, s), cfg.adam);
    return lg.loss;
  });
}

StageReport train_flowmap_supervised(NifmModel& model, const FlowMapSampleSet& data,
                                     const TrainConfig& cfg) {
  cfg.validate();
  if (data.records.empty()) throw ConfigError("supervised training needs a nonempty sample set");
  if (data.n != model.config().n) throw ConfigError("sample set and model dimensions differ");
  const double voxel = model.config().time_voxel;
  const double hi_g = tau_max_grid(model);
  const StageMask mask = StageMask::stage2(model);
  const CounterRng base(cfg.seed, 3);
  AdamState adam;
  std::vector<FlowMapSample> picked(static_cast<std::size_t>(cfg.batch_size));
  return run_stage("supervised", cfg.stage2.steps, cfg, true, [&](int s, std::array<double, 4>& by_tau) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(s));
    std::vector<double> tau_g(picked.size());
    for (std::size_t i = 0; i < picked.size(); ++i) {
      const auto idx = static_cast<std::size_t>(rng.next_u64() % data.records.size());
      picked[i] = data.records[idx];
      tau_g[i] = std::abs(picked[i].query.tau) / voxel;
    }
    MatrixXd targets;
    const QueryBatch batch = supervised_batch(picked, targets);
    const LossGrad lg = backward_derivative(model, batch, targets, mask, cfg.threads);
    by_tau = bucket_means(lg.sample_loss, tau_g, cfg.tau_min, hi_g);
    adam_step(model, lg.grad, adam, stage2_rates(model, mask, cfg, s), cfg.adam);
    return lg.loss;
  });
}

// ------------------------------------------------------------------ report

nlohmann::ordered_json TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["config"] = config;
  j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : stages) {
    nlohmann::ordered_json st;
    st["name"] = s.name;
    st["steps"] = s.steps;
    st["initial_loss"] = s.initial_loss;
    st["final_loss"] = s.final_loss;
    st["initial_smoothed"] = s.initial_smoothed;
    st["final_smoothed"] = s.final_smoothed;
    st["wall_seconds"] = s.wall_seconds;
    auto& trace = st["trace"] = nlohmann::ordered_json::array();
    for (const auto& p : s.trace) trace.push_back({p.step, p.loss});
    j["stages"].push_back(std::move(st));
  }
  return j;
}

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

}  // namespace

std::string loss_csv(const StageReport& stage) {
  std::string out = "step,loss\n";
  for (const auto& p : stage.trace) out += std::to_string(p.step) + "," + fmt(p.loss) + "\n";
  return out;
}

std::string loss_by_tau_csv(const StageReport& stage) {
  std::string out = "step,loss,tau_bucket\n";
  for (const auto& p : stage.trace) {
    for (int q = 0; q < 4; ++q) {
      if (std::isnan(p.by_tau[q])) continue;
      out += std::to_string(p.step) + "," + fmt(p.by_tau[q]) + "," + std::to_string(q) + "\n";
    }
  }
  return out;
}

// ------------------------------------------------------------- checkpoints

void save_checkpoint(const NifmModel& model, const std::filesystem::path& path) {
  const ModelConfig& cfg = model.config();
  io::ordered_json h;
  h["magic"] = "nifm-ckpt";
  h["version"] = 1;
  h["n"] = cfg.n;
  h["d"] = cfg.d;
  h["feat_dim"] = cfg.feat_dim;
  h["levels"] = cfg.levels();
  h["resolutions"] = cfg.resolutions;
  h["L"] = cfg.blocks + 1;
  h["nu_layers"] = cfg.nu_layers;
  h["tau_layers"] = cfg.tau_layers;
  h["sigma_nu"] = "tanh";
  h["sigma_tau"] = "swish";
  h["tau_max"] = cfg.tau_scale;
  h["time_voxel"] = cfg.time_voxel;
  h["normalization"] = {
      {"space_lo", std::vector<double>(cfg.domain.lo.data(), cfg.domain.lo.data() + cfg.n)},
      {"space_hi", std::vector<double>(cfg.domain.hi.data(), cfg.domain.hi.data() + cfg.n)},
      {"t_lo", cfg.domain.t_lo},
      {"t_hi", cfg.domain.t_hi},
      {"target", {0.0, 1.0}}};
  auto& layout = h["layout"] = io::ordered_json::array();
  for (const auto& t : model.tensors()) {
    layout.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }
  h["count"] = model.params().size();
  std::vector<float> payload(model.params().begin(), model.params().end());
  io::write_header_payload(path, h, payload);
}

NifmModel load_checkpoint(const std::filesystem::path& path) {
  std::optional<NifmModel> model;
  auto hp = io::read_header_payload(path, "nifm-ckpt", 1, [&](const nlohmann::json& h) {
    ModelConfig cfg;
    cfg.n = io::header_get<int>(h, "n");
    cfg.d = io::header_get<int>(h, "d");
    cfg.feat_dim = io::header_get<int>(h, "feat_dim");
    cfg.resolutions = io::header_get<std::vector<Resolution>>(h, "resolutions");
    cfg.blocks = io::header_get<int>(h, "L") - 1;
    cfg.nu_layers = io::header_get<int>(h, "nu_layers");
    cfg.tau_layers = io::header_get<int>(h, "tau_layers");
    cfg.tau_scale = io::header_get<double>(h, "tau_max");
    cfg.time_voxel = io::header_get<double>(h, "time_voxel");
    if (io::header_get<std::string>(h, "sigma_nu") != "tanh" ||
        io::header_get<std::string>(h, "sigma_tau") != "swish") {
      throw FormatError("'" + path.string() + "': unsupported activation functions");
    }
    const auto norm = io::header_get<nlohmann::json>(h, "normalization");
    const auto lo = io::header_get<std::vector<double>>(norm, "space_lo");
    const auto hi = io::header_get<std::vector<double>>(norm, "space_hi");
    if (static_cast<int>(lo.size()) != cfg.n || static_cast<int>(hi.size()) != cfg.n) {
      throw FormatError("'" + path.string() + "': normalization bounds do not match n");
    }
    cfg.domain = Domain::box(Eigen::Map<const Eigen::VectorXd>(lo.data(), cfg.n),
                             Eigen::Map<const Eigen::VectorXd>(hi.data(), cfg.n),
                             io::header_get<double>(norm, "t_lo"), io::header_get<double>(norm, "t_hi"));
    try {
      model.emplace(cfg);
    } catch (const std::exception& e) {
      throw FormatError("'" + path.string() + "': invalid model description: " + e.what());
    }
    const auto layout = io::header_get<nlohmann::json>(h, "layout");
    const auto& tensors = model->tensors();
    if (!layout.is_array() || layout.size() != tensors.size()) {
      throw FormatError("'" + path.string() + "': layout lists " + std::to_string(layout.size()) +
                        " tensors, expected " + std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto name = io::header_get<std::string>(layout[i], "name");
      const auto shape = io::header_get<std::vector<int>>(layout[i], "shape");
      const auto offset = io::header_get<std::size_t>(layout[i], "offset");
      if (name != tensors[i].name || shape != tensors[i].shape || offset != tensors[i].offset) {
        throw FormatError("'" + path.string() + "': shape mismatch for tensor '" + name + "'");
      }
    }
    const auto count = io::header_get<std::size_t>(h, "count");
    if (count != model->params().size()) {
      throw FormatError("'" + path.string() + "': shape mismatch: header declares " +
                        std::to_string(count) + " parameters, layout needs " +
                        std::to_string(model->params().size()));
    }
    return count;
  });
  auto params = model->params();
  std::copy(hp.payload.begin(), hp.payload.end(), params.begin());
  return std::move(*model);
}

}  // namespace nifm
