#include <CLI11.hpp>

#include <unistd.h>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nifm/cli.hpp"
#include "nifm/error.hpp"
#include "nifm/io.hpp"
#include "nifm/parallel.hpp"

#ifndef NIFM_VERSION
#define NIFM_VERSION "unknown"
#endif

namespace nifm::cli {

namespace fs = std::filesystem;

std::string version() { return NIFM_VERSION; }

namespace {

// Artifacts are written into a hidden staging directory and moved into the
// output directory only once the whole command has succeeded.
class Staging {
 public:
  explicit Staging(fs::path out_dir) : out_(std::move(out_dir)) {
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw std::runtime_error("cannot create output directory '" + out_.string() + "': " + ec.message());
    dir_ = out_ / (".staging-" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;
  ~Staging() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }

  fs::path path(const std::string& name) {
    names_.push_back(name);
    return dir_ / name;
  }
  void text(const std::string& name, const std::string& content) { io::write_atomic(path(name), content); }

  std::vector<std::string> commit() {
    std::vector<std::string> done;
    for (const auto& n : names_) {
      fs::rename(dir_ / n, out_ / n);
      done.push_back((out_ / n).string());
    }
    return done;
  }
  const fs::path& out_dir() const { return out_; }

 private:
  fs::path out_;
  fs::path dir_;
  std::vector<std::string> names_;
};

std::string hostname() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof(buf) - 1) != 0) return "unknown";
  return buf;
}

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

struct Context {
  const Options& opts;
  json cfg;
  int threads = 1;
  bool strict = true;
  std::ostream& out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started = utc_now();

  std::uint64_t seed() const { return cfg.at("seed").get<std::uint64_t>(); }
  const json& analysis() const { return cfg.at("analysis"); }

  void finish(Staging& stage) {
    const auto artifacts = stage.commit();
    json m;
    m["command"] = opts.command;
    m["version"] = version();
    m["preset"] = opts.preset;
    m["config"] = cfg;
    m["artifacts"] = artifacts;
    m["threads"] = threads;
    m["strict"] = strict;
    m["started"] = started;
    m["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m["host"] = hostname();
    io::write_atomic(stage.out_dir() / "manifest.json", m.dump(2) + "\n");
    for (const auto& a : artifacts) out << "wrote " << a << "\n";
  }
};

NifmModel checkpoint_for(const Context& ctx, const VectorFieldSource& src) {
  const auto& p = ctx.opts.checkpoint ? ctx.opts.checkpoint : ctx.opts.resume;
  if (!p) throw ConfigError("this command needs --checkpoint PATH (or --oracle)");
  NifmModel model = load_checkpoint(*p);
  if (model.config().n != src.dim()) {
    throw FormatError("checkpoint '" + p->string() + "' is " + std::to_string(model.config().n) +
                      "-D but the field is " + std::to_string(src.dim()) + "-D");
  }
  return model;
}

Vec json_vec(const json& v) {
  const auto d = v.get<std::vector<double>>();
  Vec out(static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) out[static_cast<Eigen::Index>(i)] = d[i];
  return out;
}

std::string num(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

// ---------------------------------------------------------------- commands

void cmd_rasterize(Context& ctx) {
  const auto analytic = make_analytic_source(ctx.cfg);
  if (!analytic) throw ConfigError("rasterize needs an analytic field.kind");
  const auto dims = ctx.cfg.at("field").at("dims").get<std::vector<int>>();
  const GriddedField grid = rasterize(*analytic, dims);
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  const fs::path p = stage.path("field.grid");
  save_grid(grid, p);
  ctx.out << "field.grid: " << fs::file_size(p) << " bytes\n";
  ctx.finish(stage);
}

void cmd_train(Context& ctx) {
  const VectorFieldSource src = make_source(ctx.cfg);
  const TrainConfig tc = make_train_config(ctx.cfg, ctx.threads);
  std::optional<NifmModel> model;
  if (ctx.opts.resume) {
    model.emplace(load_checkpoint(*ctx.opts.resume));
    if (!(model->config().domain == src.domain())) {
      throw ConfigError("checkpoint '" + ctx.opts.resume->string() + "' was trained on a different domain");
    }
  } else {
    model.emplace(init_params(make_model_config(ctx.cfg, src), tc.seed));
  }
  const auto objective = ctx.cfg.at("train").at("objective").get<std::string>();
  if (objective != "self-consistency" && objective != "supervised") {
    throw ConfigError("train.objective must be 'self-consistency' or 'supervised'");
  }

  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  TrainReport report;
  report.config = ctx.cfg;
  if (!ctx.opts.resume) {
    report.stages.push_back(train_stage1(*model, src, tc));
    stage.text("loss_stage1.csv", loss_csv(report.stages.back()));
  }
  if (!ctx.opts.stage1_only) {
    if (objective == "supervised") {
      const double voxel = model->config().time_voxel;
      const auto count = ctx.cfg.at("train").at("supervised_samples").get<std::size_t>();
      const FlowMapSampleSet data = sample_flow_map_dataset(
          src, count, {tc.tau_min * voxel, model->config().tau_scale}, IntegratorSpec::standard(src),
          tc.seed, ctx.threads);
      report.stages.push_back(train_flowmap_supervised(*model, data, tc));
    } else {
      report.stages.push_back(train_stage2(*model, tc));
    }
    stage.text("loss_stage2.csv", loss_csv(report.stages.back()));
    stage.text("loss_stage2_by_tau.csv", loss_by_tau_csv(report.stages.back()));
  }
  save_checkpoint(*model, stage.path("model.ckpt"));
  report.checkpoint = (stage.out_dir() / "model.ckpt").string();
  json rep = report.to_json();
  if (ctx.strict) {
    for (auto& s : rep["stages"]) s["wall_seconds"] = 0.0;
  }
  stage.text("train_report.json", rep.dump(2) + "\n");
  for (const auto& s : report.stages) {
    ctx.out << s.name << ": loss " << s.initial_loss << " -> " << s.final_loss << " (smoothed "
            << s.initial_smoothed << " -> " << s.final_smoothed << ")\n";
  }
  ctx.finish(stage);
}

void cmd_eval(Context& ctx) {
  const VectorFieldSource src = make_source(ctx.cfg);
  const auto reference = FlowMapProvider::oracle(src, IntegratorSpec::standard(src), ctx.threads);
  std::optional<NifmModel> model;
  if (!ctx.opts.oracle) model.emplace(checkpoint_for(ctx, src));
  const FlowMapProvider provider =
      model ? FlowMapProvider::neural(*model, analysis_policy(ctx.cfg), ctx.threads) : reference;

  const double voxel = src.grid_units().time_voxel;
  std::vector<double> spans;
  if (ctx.opts.tau) {
    spans = {*ctx.opts.tau};
  } else {
    for (double g : ctx.analysis().at("spans").get<std::vector<double>>()) spans.push_back(g * voxel);
  }
  std::vector<double> starts = ctx.analysis().at("start_times").get<std::vector<double>>();
  if (ctx.opts.t0) starts = {*ctx.opts.t0};
  SweepOptions so;
  so.samples_per_cell = ctx.analysis().at("samples_per_cell").get<int>();
  so.seed = ctx.seed();
  so.record_time = !ctx.strict;
  const auto records = evaluation_sweep(provider, reference, starts, spans, so);
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  stage.text("sweep.csv", sweep_csv(records));
  for (const auto& r : records) {
    ctx.out << "t0=" << r.t0 << " tau=" << r.tau << " mean_err=" << r.mean_err << " max_err=" << r.max_err << "\n";
  }
  ctx.finish(stage);
}

void cmd_ftle(Context& ctx) {
  const VectorFieldSource src = make_source(ctx.cfg);
  const json& f = ctx.analysis().at("ftle");
  const double t0 = ctx.opts.t0.value_or(f.at("t0").get<double>());
  const double tau = ctx.opts.tau.value_or(f.at("tau").get<double>());
  if (tau == 0.0) throw ConfigError("FTLE needs a nonzero span (--tau)");
  const auto res = ctx.opts.res.value_or(f.at("res").get<std::vector<int>>());
  if (static_cast<int>(res.size()) != src.dim()) throw ConfigError("FTLE resolution needs one entry per axis");
  Domain region = src.domain();
  const auto lo = f.at("lo").get<std::vector<double>>();
  const auto hi = f.at("hi").get<std::vector<double>>();
  if (!lo.empty() || !hi.empty()) {
    if (static_cast<int>(lo.size()) != src.dim() || static_cast<int>(hi.size()) != src.dim()) {
      throw ConfigError("analysis.ftle.lo/hi need one entry per axis");
    }
    region.lo = json_vec(f.at("lo"));
    region.hi = json_vec(f.at("hi"));
  }
  const double h_fd = f.at("h_fd").get<double>();
  const auto oracle = FlowMapProvider::oracle(src, IntegratorSpec::standard(src), ctx.threads);

  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  auto emit = [&](const FlowMapProvider& p, const std::string& name) {
    const ScalarGrid grid = ftle(p, region, t0, tau, res, h_fd);
    if (grid.dims.size() == 2) emit_scalar_image(grid, stage.path(name + ".pgm"));
    stage.text(name + ".csv", scalar_grid_csv(grid));
  };
  if (ctx.opts.oracle) {
    emit(oracle, "ftle");
  } else {
    const NifmModel model = checkpoint_for(ctx, src);
    emit(FlowMapProvider::neural(model, analysis_policy(ctx.cfg), ctx.threads), "ftle");
    emit(oracle, "ftle_oracle");
  }
  ctx.finish(stage);
}

void cmd_streak(Context& ctx) {
  const VectorFieldSource src = make_source(ctx.cfg);
  const json& s = ctx.analysis().at("streak");
  const Vec seed = json_vec(s.at("seed"));
  if (seed.size() != src.dim()) throw ConfigError("analysis.streak.seed needs one entry per axis");
  const double t_obs = ctx.opts.t0.value_or(s.at("t_obs").get<double>());
  const double lo = s.at("release_lo").get<double>();
  const double hi = std::min(s.at("release_hi").get<double>(), t_obs);
  const int count = s.at("releases").get<int>();
  if (count < 1) throw ConfigError("analysis.streak.releases must be >= 1");
  std::vector<double> releases;
  for (int i = 0; i < count; ++i) releases.push_back(count == 1 ? hi : lo + (hi - lo) * i / (count - 1));

  std::optional<NifmModel> model;
  if (!ctx.opts.oracle) model.emplace(checkpoint_for(ctx, src));
  const FlowMapProvider provider =
      model ? FlowMapProvider::neural(*model, analysis_policy(ctx.cfg), ctx.threads)
            : FlowMapProvider::oracle(src, IntegratorSpec::standard(src), ctx.threads);
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  stage.text("streak.csv", streakline_csv(streaklines(provider, seed, releases, t_obs)));
  ctx.finish(stage);
}

void cmd_oracle(Context& ctx) {
  const VectorFieldSource src = make_source(ctx.cfg);
  const auto analytic = make_analytic_source(ctx.cfg);
  const IntegratorSpec spec = IntegratorSpec::standard(src);
  const json& o = ctx.analysis().at("oracle");
  const double diag = src.domain().diagonal();
  std::string csv = src.dim() == 2 ? "t,tau,x0,y0,x,y,err\n" : "t,tau,x0,y0,z0,x,y,z,err\n";
  for (const auto& qj : o.at("queries")) {
    FlowQuery q{json_vec(qj.at("x")), qj.at("t").get<double>(), qj.at("tau").get<double>()};
    if (ctx.opts.t0) q.t = *ctx.opts.t0;
    if (ctx.opts.tau) q.tau = *ctx.opts.tau;
    if (q.x.size() != src.dim()) throw ConfigError("analysis.oracle.queries: x needs one entry per axis");
    const Vec end = integrate(src, q, spec);
    double err = std::numeric_limits<double>::quiet_NaN();
    if (analytic) {
      if (const auto exact = analytic->exact_flow_map(q.x, q.t, q.tau)) err = (end - *exact).norm() / diag;
    }
    csv += num(q.t) + "," + num(q.tau);
    for (Eigen::Index a = 0; a < q.x.size(); ++a) csv += "," + num(q.x[a]);
    for (Eigen::Index a = 0; a < end.size(); ++a) csv += "," + num(end[a]);
    csv += "," + num(err) + "\n";
  }
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  stage.text("oracle.csv", csv);
  const auto samples = o.at("samples").get<std::size_t>();
  if (samples > 0) {
    const double voxel = src.grid_units().time_voxel;
    const double tau_min = ctx.cfg.at("train").at("stage2").at("tau_min").get<double>() * voxel;
    const double tau_max = ctx.cfg.at("model").at("tau_max").get<double>() * voxel;
    save_sample_set(sample_flow_map_dataset(src, samples, {tau_min, tau_max}, spec, ctx.seed(), ctx.threads),
                    stage.path("samples.fms"));
  }
  ctx.finish(stage);
}

void cmd_check_grad(Context& ctx) {
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  std::string csv = "loss,tensor,size,rel_error\n";
  bool ok = true;
  ctx.out << std::left << std::setw(8) << "loss" << std::setw(14) << "tensor" << std::setw(8)
          << "size" << "max rel error\n";
  for (auto [kind, name] : {std::pair{GradCheckLoss::Stage1, "stage1"}, std::pair{GradCheckLoss::Stage2, "stage2"}}) {
    const NifmModel model = toy_model(2, ctx.seed());
    for (const auto& row : check_gradients(model, kind, ctx.seed())) {
      ctx.out << std::setw(8) << name << std::setw(14) << row.tensor << std::setw(8) << row.size
              << row.rel_error << "\n";
      csv += std::string(name) + "," + row.tensor + "," + std::to_string(row.size) + "," + num(row.rel_error) + "\n";
      ok = ok && row.rel_error <= 1e-3;
    }
  }
  stage.text("check_grad.csv", csv);
  ctx.finish(stage);
  if (!ok) throw std::runtime_error("gradient check failed: relative error above 1e-3");
}

void cmd_compare(Context& ctx) {
  const auto analytic = make_analytic_source(ctx.cfg);
  if (!analytic || !analytic->exact_flow_map(analytic->domain().center(), 0.0, 0.0)) {
    throw ConfigError("compare needs a field with a closed-form flow map (constant, rotation, saddle)");
  }
  const json& c = ctx.analysis().at("compare");
  ComparisonOptions co;
  co.step_sizes = c.at("step_sizes").get<std::vector<double>>();
  co.spans = c.at("spans").get<std::vector<double>>();
  if (ctx.opts.tau) co.spans = {*ctx.opts.tau};
  co.model_steps = c.at("model_steps").get<std::vector<int>>();
  co.samples = c.at("samples").get<int>();
  co.seed = ctx.seed();
  co.threads = ctx.threads;
  std::optional<NifmModel> model;
  if (ctx.opts.checkpoint) {
    model.emplace(checkpoint_for(ctx, *analytic));
    co.model = &*model;
  }
  const auto rows = euler_rk4_model_comparison(*analytic, co);
  const auto slopes = comparison_slopes(rows);
  Staging stage(ctx.cfg.at("output_dir").get<std::string>());
  stage.text("comparison.csv", comparison_csv(rows));
  stage.text("slopes.csv", slopes_csv(slopes));
  for (const auto& s : slopes) ctx.out << s.method << " tau=" << s.tau << " slope=" << s.slope << "\n";
  ctx.finish(stage);
}

}  // namespace

json resolve_config(const Options& opts) {
  json cfg = preset_defaults(opts.preset);
  if (opts.config) cfg = merge_config(cfg, load_json_file(*opts.config));
  if (opts.seed) cfg["seed"] = *opts.seed;
  if (opts.out) cfg["output_dir"] = opts.out->string();
  return cfg;
}

int run(const Options& opts, std::ostream& out, std::ostream& err) {
  try {
    Context ctx{opts, resolve_config(opts), 1, true, out};
    ctx.threads = resolve_threads(opts.threads);
    ctx.strict = ctx.threads == 1;
    const std::string& c = opts.command;
    if (c == "rasterize") cmd_rasterize(ctx);
    else if (c == "train") cmd_train(ctx);
    else if (c == "eval") cmd_eval(ctx);
    else if (c == "ftle") cmd_ftle(ctx);
    else if (c == "streak") cmd_streak(ctx);
    else if (c == "oracle") cmd_oracle(ctx);
    else if (c == "check-grad") cmd_check_grad(ctx);
    else if (c == "compare") cmd_compare(ctx);
    else throw ConfigError("unknown command '" + c + "'");
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neural flow-map training and flow-visualization analyses"};
  app.require_subcommand(1);
  std::string keys = "Config keys (double-gyre-desk defaults; other presets override some):\n";
  for (const auto& line : describe_keys(preset_defaults("double-gyre-desk"))) keys += "  " + line + "\n";
  app.footer(keys);

  Options opts;
  std::string res;
  std::string config, outdir, resume, checkpoint;
  std::uint64_t seed = 0;
  double tau = 0.0, t0 = 0.0;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"rasterize", "Sample the analytic field on its lattice and save a grid file"},
      {"train", "Two-stage training; writes checkpoint, report, loss CSVs"},
      {"eval", "Error sweep against the RK4 oracle"},
      {"ftle", "FTLE field as PGM image and CSV"},
      {"streak", "Streakline as CSV"},
      {"oracle", "RK4 reference flow map for configured queries"},
      {"check-grad", "Finite-difference gradient check on a toy model"},
      {"compare", "Euler / RK4 / model step-size comparison on a closed-form field"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "JSON config overlay");
    sub->add_option("--out", outdir, "Output directory");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_option("--threads", opts.threads, "Worker threads (1 = strict deterministic mode)");
    sub->add_option("--preset", opts.preset, "Default preset")
        ->check(CLI::IsMember(preset_names()));
    sub->add_option("--tau", tau, "Span override (physical time units)");
    sub->add_option("--t0", t0, "Start/observation time override");
    sub->add_option("--res", res, "Output resolution WxH[xD]");
    sub->add_flag("--stage1-only", opts.stage1_only, "Stop training after stage 1");
    sub->add_option("--resume", resume, "Continue with stage 2 from this checkpoint");
    sub->add_flag("--oracle", opts.oracle, "Use the RK4 oracle instead of a model");
    sub->add_option("--checkpoint", checkpoint, "Model checkpoint");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  for (CLI::App* sub : subs) {
    if (!sub->parsed()) continue;
    opts.command = sub->get_name();
    if (sub->count("--config")) opts.config = config;
    if (sub->count("--out")) opts.out = outdir;
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->count("--tau")) opts.tau = tau;
    if (sub->count("--t0")) opts.t0 = t0;
    if (sub->count("--resume")) opts.resume = resume;
    if (sub->count("--checkpoint")) opts.checkpoint = checkpoint;
    if (sub->count("--res")) {
      std::vector<int> dims;
      std::stringstream ss(res);
      std::string part;
      while (std::getline(ss, part, 'x')) {
        try {
          dims.push_back(std::stoi(part));
        } catch (const std::exception&) {
          err << "config error: --res expects WxH, got '" << res << "'\n";
          return 2;
        }
      }
      opts.res = dims;
    }
  }
  return run(opts, out, err);
}

}  // namespace nifm::cli
