#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nifm/analysis.hpp"
#include "nifm/field.hpp"
#include "nifm/model.hpp"
#include "nifm/train.hpp"

namespace nifm::cli {

using json = nlohmann::ordered_json;

// ------------------------------------------------------------------ config

std::vector<std::string> preset_names();
/// Full default tree {field, model, train, analysis, output_dir, seed} for a
/// preset. Throws ConfigError for unknown presets.
json preset_defaults(std::string_view preset);

/// Overlays `user` on `defaults`. Keys absent from the defaults and values of
/// a different JSON type are rejected with ConfigError naming the dotted key.
/// Arrays are replaced as a whole.
json merge_config(const json& defaults, const json& user);

/// "dotted.key = value" lines for every leaf of the default tree.
std::vector<std::string> describe_keys(const json& defaults);

json load_json_file(const std::filesystem::path& path);

// Builders from a resolved config.

/// The training field: the analytic preset field, its rasterization when
/// field.rasterize is set, or a grid file when field.kind is "grid".
VectorFieldSource make_source(const json& cfg);
/// The analytic field of the preset (no rasterization); nullopt for grid files.
std::optional<VectorFieldSource> make_analytic_source(const json& cfg);
/// [t, x, y(, z)] node counts used for model sizing.
Resolution field_dims(const json& cfg, const VectorFieldSource& src);
ModelConfig make_model_config(const json& cfg, const VectorFieldSource& src);
TrainConfig make_train_config(const json& cfg, int threads);
StepPolicy analysis_policy(const json& cfg);

// ----------------------------------------------------------------- commands

struct Options {
  std::string command;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  int threads = 0;  // 0: NIFM_THREADS, then hardware concurrency
  std::string preset = "double-gyre-desk";
  std::optional<double> tau;
  std::optional<double> t0;
  std::optional<std::vector<int>> res;
  bool stage1_only = false;
  std::optional<std::filesystem::path> resume;
  bool oracle = false;
  std::optional<std::filesystem::path> checkpoint;
};

/// Merged configuration for `opts` (preset, config file, --seed, --out).
json resolve_config(const Options& opts);

/// Runs one command. Returns the process exit code: 0 ok, 1 runtime failure,
/// 2 configuration error, 3 divergence abort. Diagnostics go to `err`.
int run(const Options& opts, std::ostream& out, std::ostream& err);

/// Parses argv (subcommand first) and runs it.
int main(int argc, char** argv, std::ostream& out, std::ostream& err);

/// Version string baked in at build time.
std::string version();

}  // namespace nifm::cli
