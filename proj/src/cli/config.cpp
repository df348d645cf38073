#include <fstream>
#include <sstream>

#include "nifm/cli.hpp"
#include "nifm/error.hpp"

namespace nifm::cli {

namespace {

json base_defaults() {
  json cfg;
  cfg["field"] = {
      {"kind", "double-gyre"},
      {"grid_file", ""},
      {"lo", {0.0, 0.0}},
      {"hi", {2.0, 1.0}},
      {"t_lo", 0.0},
      {"t_hi", 10.0},
      {"dims", {32, 64, 64}},
      {"rasterize", true},
      {"gyre_A", 0.1},
      {"gyre_epsilon", 0.25},
      {"gyre_omega", 2.0 * 3.14159265358979323846 / 10.0},
      {"rotation_omega", 1.0},
      {"saddle_lambda", 0.5},
      {"constant_velocity", {0.2, 0.1}},
  };
  cfg["model"] = {
      {"d", 64},
      {"feat_dim", 8},
      {"levels", 4},
      {"scale", 1.65},
      {"compression_ratio", 1.0},
      {"base_resolution", json::array()},
      {"tau_max", 12.0},
  };
  cfg["train"] = {
      {"objective", "self-consistency"},
      {"batch_size", 1024},
      {"stage1", {{"steps", 4000}, {"lr", 0.02}, {"decay_every", 800}, {"decay_factor", 0.5}}},
      {"stage2",
       {{"steps", 4000},
        {"lr", 0.01},
        {"decay_every", 800},
        {"decay_factor", 0.5},
        {"finetune_lr", 0.0},
        {"tau_min", 0.5},
        {"policy", "sqrt"}}},
      {"adam", {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
      {"supervised_samples", 100000},
      {"trace_every", 10},
      {"smooth_window", 200},
      {"divergence_window", 500},
      {"divergence_factor", 1000.0},
      {"log_every", 0},
  };
  cfg["analysis"] = {
      {"policy", "sqrt"},
      {"start_times", {0.0, 1.0, 2.0}},
      {"spans", {6.0, 12.0, 24.0}},
      {"samples_per_cell", 256},
      {"ftle", {{"t0", 0.0}, {"tau", 10.0}, {"res", {128, 64}}, {"h_fd", 0.0},
                {"lo", json::array()}, {"hi", json::array()}}},
      {"streak", {{"seed", {0.5, 0.5}}, {"t_obs", 8.0}, {"release_lo", 0.0},
                  {"release_hi", 8.0}, {"releases", 81}}},
      {"oracle", {{"queries", json::array({json{{"x", {0.5, 0.5}}, {"t", 0.0}, {"tau", 0.0}}})},
                  {"samples", 0}}},
      {"compare", {{"step_sizes", {0.1, 0.05, 0.025, 0.0125}},
                   {"spans", {1.0}},
                   {"model_steps", {1, 2, 3, 4, 5, 6, 7, 8}},
                   {"samples", 128}}},
  };
  cfg["output_dir"] = "out";
  cfg["seed"] = 0;
  return cfg;
}

void describe(const json& node, const std::string& prefix, std::vector<std::string>& lines) {
  if (node.is_object() && !node.empty()) {
    for (auto it = node.begin(); it != node.end(); ++it) {
      describe(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), lines);
    }
    return;
  }
  lines.push_back(prefix + " = " + node.dump());
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not silently become fractional.
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

json merge_into(const json& defaults, const json& user, const std::string& prefix) {
  json out = defaults;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const json& def = defaults.at(it.key());
    if (def.is_object() && !def.empty()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
      out[it.key()] = merge_into(def, it.value(), key);
    } else {
      if (!same_kind(def, it.value())) {
        throw ConfigError("config key '" + key + "' expects a " + std::string(def.type_name()) +
                          ", got " + it.value().type_name());
      }
      out[it.key()] = it.value();
    }
  }
  return out;
}

template <typename T>
T get(const json& node, const char* key, const char* where) {
  try {
    return node.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + where + "." + key + "': " + e.what());
  }
}

Vec to_vec(const std::vector<double>& v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

Domain config_domain(const json& f) {
  const auto lo = get<std::vector<double>>(f, "lo", "field");
  const auto hi = get<std::vector<double>>(f, "hi", "field");
  if (lo.size() != hi.size() || (lo.size() != 2 && lo.size() != 3)) {
    throw ConfigError("field.lo and field.hi must both have 2 or 3 entries");
  }
  Domain d = Domain::box(to_vec(lo), to_vec(hi), get<double>(f, "t_lo", "field"),
                         get<double>(f, "t_hi", "field"));
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("field domain: ") + e.what());
  }
  return d;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"double-gyre-desk", "constant", "rotation", "saddle"};
}

json preset_defaults(std::string_view preset) {
  json cfg = base_defaults();
  auto& f = cfg["field"];
  auto& a = cfg["analysis"];
  if (preset == "double-gyre-desk") {
    // Long FTLE spans compose three segments; fewer steps leave the map too noisy.
    cfg["train"]["stage2"]["steps"] = 20000;
    cfg["train"]["stage2"]["decay_every"] = 4000;
    return cfg;
  }
  if (preset != "double-gyre-desk") {
    // Closed-form fields have no stored grid to compress against.
    cfg["model"]["base_resolution"] = {4, 4, 4};
    cfg["model"]["tau_max"] = 24.0;
  }
  if (preset == "constant") {
    f["kind"] = "constant";
    f["t_hi"] = 1.0;
    f["dims"] = {33, 33, 17};
    f["rasterize"] = false;
    cfg["train"]["stage1"]["steps"] = 2000;
    cfg["train"]["stage1"]["decay_every"] = 400;
    a["start_times"] = {0.0, 0.1, 0.2};
    a["ftle"]["t0"] = 0.0;
    a["ftle"]["tau"] = 0.5;
    a["streak"] = {{"seed", {0.5, 0.5}}, {"t_obs", 0.8}, {"release_lo", 0.0},
                   {"release_hi", 0.8}, {"releases", 17}};
    a["compare"]["spans"] = {0.5};
    return cfg;
  }
  if (preset == "rotation" || preset == "saddle") {
    f["kind"] = preset;
    f["lo"] = {-1.0, -1.0};
    f["hi"] = {1.0, 1.0};
    f["t_hi"] = 2.0;
    f["dims"] = {33, 33, 33};
    f["rasterize"] = false;
    cfg["train"]["stage1"]["steps"] = 2000;
    cfg["train"]["stage1"]["decay_every"] = 400;
    a["start_times"] = {0.0, 0.25, 0.5};
    a["ftle"]["t0"] = 0.0;
    a["ftle"]["tau"] = preset == "saddle" ? 2.0 : 1.0;
    a["ftle"]["res"] = {64, 64};
    if (preset == "saddle") {
      // Seeds whose stretched trajectories stay inside the box.
      a["ftle"]["lo"] = {-0.3, -0.3};
      a["ftle"]["hi"] = {0.3, 0.3};
    }
    a["streak"] = {{"seed", {0.5, 0.0}}, {"t_obs", 1.5}, {"release_lo", 0.0},
                   {"release_hi", 1.5}, {"releases", 31}};
    return cfg;
  }
  throw ConfigError("unknown preset '" + std::string(preset) + "'");
}

json merge_config(const json& defaults, const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  return merge_into(defaults, user, "");
}

std::vector<std::string> describe_keys(const json& defaults) {
  std::vector<std::string> lines;
  describe(defaults, "", lines);
  return lines;
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::optional<VectorFieldSource> make_analytic_source(const json& cfg) {
  const json& f = cfg.at("field");
  const auto kind = get<std::string>(f, "kind", "field");
  if (kind == "grid") return std::nullopt;
  const Domain dom = config_domain(f);
  const auto dims = get<std::vector<int>>(f, "dims", "field");
  if (static_cast<int>(dims.size()) != dom.n + 1) {
    throw ConfigError("field.dims must list n+1 node counts [t, x, y(, z)]");
  }
  if (dims[0] < 2) throw ConfigError("field.dims needs at least 2 time nodes");
  AnalyticKind k;
  if (kind == "double-gyre") {
    if (dom.n != 2) throw ConfigError("the double gyre is two-dimensional");
    k = DoubleGyre{get<double>(f, "gyre_A", "field"), get<double>(f, "gyre_epsilon", "field"),
                   get<double>(f, "gyre_omega", "field")};
  } else if (kind == "constant") {
    const auto c = get<std::vector<double>>(f, "constant_velocity", "field");
    if (static_cast<int>(c.size()) != dom.n) {
      throw ConfigError("field.constant_velocity must have n entries");
    }
    k = Constant{to_vec(c)};
  } else if (kind == "rotation") {
    k = RigidRotation{get<double>(f, "rotation_omega", "field")};
  } else if (kind == "saddle") {
    k = Saddle{get<double>(f, "saddle_lambda", "field")};
  } else {
    throw ConfigError("field.kind must be double-gyre, constant, rotation, saddle or grid (got '" +
                      kind + "')");
  }
  return VectorFieldSource::analytic(k, dom, dims[0]);
}

VectorFieldSource make_source(const json& cfg) {
  const json& f = cfg.at("field");
  if (get<std::string>(f, "kind", "field") == "grid") {
    const auto file = get<std::string>(f, "grid_file", "field");
    if (file.empty()) throw ConfigError("field.kind 'grid' needs field.grid_file");
    return VectorFieldSource::gridded(load_grid(file));
  }
  VectorFieldSource src = *make_analytic_source(cfg);
  if (!get<bool>(f, "rasterize", "field")) return src;
  const auto dims = get<std::vector<int>>(f, "dims", "field");
  return VectorFieldSource::gridded(rasterize(src, dims));
}

Resolution field_dims(const json& cfg, const VectorFieldSource& src) {
  if (src.is_gridded()) return src.grid()->dims;
  return get<std::vector<int>>(cfg.at("field"), "dims", "field");
}

ModelConfig make_model_config(const json& cfg, const VectorFieldSource& src) {
  const json& m = cfg.at("model");
  ModelOptions o;
  o.d = get<int>(m, "d", "model");
  o.feat_dim = get<int>(m, "feat_dim", "model");
  o.levels = get<int>(m, "levels", "model");
  o.scale = get<double>(m, "scale", "model");
  o.compression_ratio = get<double>(m, "compression_ratio", "model");
  o.tau_max = get<double>(m, "tau_max", "model");
  const auto base = get<std::vector<int>>(m, "base_resolution", "model");
  if (!base.empty()) o.base_resolution = base;
  try {
    return configure_model(src.domain(), src.grid_units().time_voxel, field_dims(cfg, src), o);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

TrainConfig make_train_config(const json& cfg, int threads) {
  const json& t = cfg.at("train");
  TrainConfig tc;
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  tc.threads = threads;
  tc.batch_size = get<int>(t, "batch_size", "train");
  auto schedule = [&](const char* name) {
    const json& s = t.at(name);
    const std::string where = std::string("train.") + name;
    return StageSchedule{get<int>(s, "steps", where.c_str()), get<double>(s, "lr", where.c_str()),
                         get<int>(s, "decay_every", where.c_str()),
                         get<double>(s, "decay_factor", where.c_str())};
  };
  tc.stage1 = schedule("stage1");
  tc.stage2 = schedule("stage2");
  const json& s2 = t.at("stage2");
  tc.finetune_lr = get<double>(s2, "finetune_lr", "train.stage2");
  tc.tau_min = get<double>(s2, "tau_min", "train.stage2");
  tc.policy = parse_step_policy(get<std::string>(s2, "policy", "train.stage2"));
  const json& a = t.at("adam");
  tc.adam = {get<double>(a, "beta1", "train.adam"), get<double>(a, "beta2", "train.adam"),
             get<double>(a, "eps", "train.adam")};
  tc.trace_every = get<int>(t, "trace_every", "train");
  tc.smooth_window = get<int>(t, "smooth_window", "train");
  tc.divergence_window = get<int>(t, "divergence_window", "train");
  tc.divergence_factor = get<double>(t, "divergence_factor", "train");
  tc.log_every = get<int>(t, "log_every", "train");
  tc.validate();
  return tc;
}

StepPolicy analysis_policy(const json& cfg) {
  return parse_step_policy(get<std::string>(cfg.at("analysis"), "policy", "analysis"));
}

}  // namespace nifm::cli
