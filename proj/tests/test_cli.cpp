#include <doctest.h>

#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "nifm/cli.hpp"
#include "nifm/error.hpp"
#include "nifm/io.hpp"

using namespace nifm;
using nifm::cli::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result nifm_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nifm");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  Result r;
  r.code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

// Tiny model and short schedules so a full train command takes well under a second.
json tiny_training() {
  return json::parse(R"({
    "model": {"d": 8, "levels": 2, "base_resolution": [3, 3, 3], "tau_max": 8.0},
    "train": {"batch_size": 64,
              "stage1": {"steps": 12, "decay_every": 5},
              "stage2": {"steps": 10, "decay_every": 5},
              "smooth_window": 4, "trace_every": 2},
    "analysis": {"samples_per_cell": 8, "spans": [2.0, 4.0], "start_times": [0.0, 0.5]}
  })");
}

}  // namespace

TEST_CASE("config merging") {
  const json defaults = cli::preset_defaults("double-gyre-desk");
  SUBCASE("overrides replace leaves") {
    const json user = json::parse(R"({"train": {"stage1": {"steps": 7}}, "seed": 3})");
    const json merged = cli::merge_config(defaults, user);
    CHECK(merged["train"]["stage1"]["steps"] == 7);
    CHECK(merged["train"]["stage1"]["lr"] == defaults["train"]["stage1"]["lr"]);
    CHECK(merged["seed"] == 3);
  }
  SUBCASE("unknown keys name the dotted path") {
    const json user = json::parse(R"({"train": {"stage1": {"stepz": 7}}})");
    CHECK_THROWS_WITH_AS(cli::merge_config(defaults, user), doctest::Contains("train.stage1.stepz"), ConfigError);
  }
  SUBCASE("type mismatches are rejected") {
    CHECK_THROWS_AS(cli::merge_config(defaults, json::parse(R"({"train": {"batch_size": "big"}})")), ConfigError);
    CHECK_THROWS_AS(cli::merge_config(defaults, json::parse(R"({"train": {"batch_size": 10.5}})")), ConfigError);
    CHECK_THROWS_AS(cli::merge_config(defaults, json::parse(R"({"model": 3})")), ConfigError);
    // Integers are accepted where floats are expected.
    CHECK(cli::merge_config(defaults, json::parse(R"({"model": {"tau_max": 12}})"))["model"]["tau_max"] == 12);
  }
  SUBCASE("unknown preset") { CHECK_THROWS_AS(cli::preset_defaults("tornado"), ConfigError); }
}

TEST_CASE("committed defaults file matches the built-in defaults") {
  const fs::path p = fs::path(NIFM_SOURCE_DIR) / "config" / "defaults.json";
  REQUIRE(fs::exists(p));
  CHECK(cli::load_json_file(p) == cli::preset_defaults("double-gyre-desk"));
}

TEST_CASE("presets build consistent objects") {
  for (const auto& name : cli::preset_names()) {
    const json cfg = cli::preset_defaults(name);
    CAPTURE(name);
    const auto src = cli::make_source(cfg);
    const ModelConfig mc = cli::make_model_config(cfg, src);
    CHECK(mc.n == 2);
    CHECK(mc.levels() == 4);
    const TrainConfig tc = cli::make_train_config(cfg, 1);
    CHECK(tc.batch_size == 1024);
    CHECK(cli::analysis_policy(cfg) == StepPolicy::Sqrt);
  }
  const json dg = cli::preset_defaults("double-gyre-desk");
  const auto src = cli::make_source(dg);
  CHECK(src.is_gridded());
  CHECK(cli::field_dims(dg, src) == Resolution{32, 64, 64});
  CHECK(cli::make_model_config(dg, src).tau_scale == doctest::Approx(12 * 10.0 / 31));
  CHECK(cli::make_train_config(dg, 1).finetune_lr == 0.0);
  const json rot = cli::preset_defaults("rotation");
  CHECK(cli::make_model_config(rot, cli::make_source(rot)).tau_scale == doctest::Approx(24 * 2.0 / 32));
}

TEST_CASE("help lists every config key") {
  const Result r = nifm_cli({"--help"});
  CHECK(r.code == 0);
  for (const auto& line : cli::describe_keys(cli::preset_defaults("double-gyre-desk"))) {
    const std::string key = line.substr(0, line.find(" = "));
    INFO(key);
    CHECK(r.out.find(key) != std::string::npos);
  }
  CHECK(r.out.find("check-grad") != std::string::npos);
}

TEST_CASE("argument and config errors exit with code 2") {
  const auto dir = nifm::test::temp_dir("cli_errors");
  const auto cfg = write_config(dir, "bad.json", json::parse(R"({"train": {"nope": 1}})"));
  Result r = nifm_cli({"train", "--config", cfg.string(), "--out", (dir / "o").string(), "--threads", "1"});
  CHECK(r.code == 2);
  CHECK(r.err.find("train.nope") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "o" / "model.ckpt"));

  r = nifm_cli({"train", "--preset", "nowhere"});
  CHECK(r.code == 2);
  r = nifm_cli({});
  CHECK(r.code == 2);
  r = nifm_cli({"ftle", "--oracle", "--res", "axb", "--out", (dir / "f").string()});
  CHECK(r.code == 2);
  r = nifm_cli({"eval", "--out", (dir / "e").string(), "--threads", "1"});
  CHECK(r.code == 2);  // no checkpoint given
  const auto missing = write_config(dir, "x.json", json::parse(R"({"field": {"kind": "grid"}})"));
  r = nifm_cli({"eval", "--oracle", "--config", missing.string(), "--out", (dir / "g").string()});
  CHECK(r.code == 2);
}

TEST_CASE("rasterize writes the exact payload size") {
  const auto dir = nifm::test::temp_dir("cli_raster");
  const Result r = nifm_cli({"rasterize", "--out", dir.string(), "--threads", "1"});
  REQUIRE(r.code == 0);
  const fs::path grid = dir / "field.grid";
  REQUIRE(fs::exists(grid));
  std::ifstream in(grid, std::ios::binary);
  std::string header;
  std::getline(in, header);
  CHECK(fs::file_size(grid) == header.size() + 1 + 64u * 64 * 32 * 2 * 4);
  CHECK(r.out.find("bytes") != std::string::npos);
  const std::string first = slurp(grid);
  REQUIRE(nifm_cli({"rasterize", "--out", dir.string(), "--threads", "1"}).code == 0);
  CHECK(slurp(grid) == first);
  const json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["command"] == "rasterize");
  CHECK(manifest["artifacts"].size() == 1);
  CHECK(manifest.contains("version"));
  CHECK(manifest.contains("host"));
  // No staging leftovers.
  for (const auto& e : fs::directory_iterator(dir)) CHECK(e.path().filename().string().find(".staging") == std::string::npos);

  // The grid file is usable as a field source.
  const auto cfg = write_config(dir, "grid.json", json{{"field", {{"kind", "grid"}, {"grid_file", grid.string()}}}});
  CHECK(nifm_cli({"oracle", "--config", cfg.string(), "--out", (dir / "o").string(), "--threads", "1"}).code == 0);
}

TEST_CASE("oracle zero-span query returns the input") {
  const auto dir = nifm::test::temp_dir("cli_oracle");
  const auto cfg = write_config(dir, "c.json", json::parse(R"({"analysis": {"oracle": {"queries": [
      {"x": [0.3, 0.7], "t": 1.0, "tau": 0.0},
      {"x": [0.1, 0.2], "t": 0.0, "tau": 0.5}], "samples": 5}}})"));
  const Result r = nifm_cli({"oracle", "--preset", "rotation", "--config", cfg.string(), "--out", dir.string(), "--threads", "1"});
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(dir / "oracle.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "t,tau,x0,y0,x,y,err");
  std::getline(csv, line);
  CHECK(line == "1,0,0.3,0.7,0.3,0.7,0");
  std::getline(csv, line);
  const double err = std::stod(line.substr(line.rfind(',') + 1));
  CHECK(err < 1e-8);
  CHECK(load_sample_set(dir / "samples.fms").records.size() == 5);
}

TEST_CASE("check-grad passes on the toy model") {
  const auto dir = nifm::test::temp_dir("cli_grad");
  const Result r = nifm_cli({"check-grad", "--out", dir.string(), "--threads", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("W.out") != std::string::npos);
  std::istringstream csv(slurp(dir / "check_grad.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "loss,tensor,size,rel_error");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(std::stod(line.substr(line.rfind(',') + 1)) <= 1e-3);
  }
  CHECK(rows > 10);
}

TEST_CASE("eval with the oracle as provider is exact") {
  const auto dir = nifm::test::temp_dir("cli_eval_oracle");
  const auto cfg = write_config(dir, "c.json", tiny_training());
  const Result r = nifm_cli({"eval", "--oracle", "--preset", "constant", "--config", cfg.string(), "--out", dir.string(), "--threads", "1"});
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(dir / "sweep.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "t0,tau,mean_err,max_err,n,wall_ms");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(line.find(",0,0,8,0") != std::string::npos);
  }
  CHECK(rows == 4);
}

TEST_CASE("train, resume and evaluate deterministically") {
  const auto dir = nifm::test::temp_dir("cli_train");
  const auto cfg = write_config(dir, "c.json", tiny_training());
  auto train = [&](const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--preset", "constant", "--config", cfg.string(), "--out", (dir / out).string(), "--threads", "1", "--seed", "4"};
    args.insert(args.end(), extra.begin(), extra.end());
    return nifm_cli(args);
  };
  REQUIRE(train("a").code == 0);
  REQUIRE(train("b").code == 0);
  for (const char* f : {"model.ckpt", "loss_stage1.csv", "loss_stage2.csv", "loss_stage2_by_tau.csv", "train_report.json"}) {
    INFO(f);
    REQUIRE(fs::exists(dir / "a" / f));
    if (std::string(f) != "train_report.json") CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  // Reports differ only in the echoed output directory.
  json ra = json::parse(slurp(dir / "a" / "train_report.json"));
  json rb = json::parse(slurp(dir / "b" / "train_report.json"));
  CHECK(ra["stages"] == rb["stages"]);
  CHECK(ra["stages"][0]["wall_seconds"] == 0.0);

  REQUIRE(train("s1", {"--stage1-only"}).code == 0);
  CHECK_FALSE(fs::exists(dir / "s1" / "loss_stage2.csv"));
  REQUIRE(train("r", {"--resume", (dir / "s1" / "model.ckpt").string()}).code == 0);
  CHECK(slurp(dir / "r" / "model.ckpt") == slurp(dir / "a" / "model.ckpt"));
  CHECK(slurp(dir / "r" / "loss_stage2.csv") == slurp(dir / "a" / "loss_stage2.csv"));

  auto eval = [&](const std::string& out) {
    return nifm_cli({"eval", "--preset", "constant", "--config", cfg.string(), "--checkpoint", (dir / "a" / "model.ckpt").string(),
                     "--out", (dir / out).string(), "--threads", "1"});
  };
  REQUIRE(eval("e1").code == 0);
  REQUIRE(eval("e2").code == 0);
  CHECK(slurp(dir / "e1" / "sweep.csv") == slurp(dir / "e2" / "sweep.csv"));

  // Other commands on the trained checkpoint.
  const std::string ckpt = (dir / "a" / "model.ckpt").string();
  CHECK(nifm_cli({"ftle", "--preset", "constant", "--config", cfg.string(), "--checkpoint", ckpt, "--res", "8x6",
                  "--out", (dir / "f").string(), "--threads", "1"}).code == 0);
  CHECK(fs::exists(dir / "f" / "ftle.pgm"));
  CHECK(fs::exists(dir / "f" / "ftle_oracle.csv"));
  CHECK(read_pgm(dir / "f" / "ftle.pgm").width == 8);
  CHECK(nifm_cli({"streak", "--preset", "constant", "--config", cfg.string(), "--checkpoint", ckpt,
                  "--out", (dir / "s").string(), "--threads", "1"}).code == 0);
  CHECK(slurp(dir / "s" / "streak.csv").starts_with("release_t,x,y\n"));

  // Mismatched domain on resume is a configuration error.
  const auto other = write_config(dir, "o.json", json::parse(R"({"field": {"t_hi": 3.0}})"));
  CHECK(nifm_cli({"train", "--preset", "constant", "--config", other.string(), "--resume", ckpt,
                  "--out", (dir / "x").string(), "--threads", "1"}).code == 2);
}

TEST_CASE("ftle with the oracle on closed-form fields") {
  const auto dir = nifm::test::temp_dir("cli_ftle");
  REQUIRE(nifm_cli({"ftle", "--oracle", "--preset", "constant", "--res", "8x8", "--out", (dir / "c").string(), "--threads", "1"}).code == 0);
  for (auto p : read_pgm(dir / "c" / "ftle.pgm").pixels) CHECK(p == 0);

  REQUIRE(nifm_cli({"ftle", "--oracle", "--preset", "saddle", "--res", "6x6", "--out", (dir / "s").string(), "--threads", "1"}).code == 0);
  std::istringstream csv(slurp(dir / "s" / "ftle.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "x,y,value");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(std::abs(std::stod(line.substr(line.rfind(',') + 1)) - 0.5) <= 1e-3);
  }
  CHECK(rows == 36);

  CHECK(nifm_cli({"ftle", "--oracle", "--preset", "saddle", "--tau", "0", "--out", (dir / "z").string()}).code == 2);
}

TEST_CASE("compare on rigid rotation") {
  const auto dir = nifm::test::temp_dir("cli_compare");
  REQUIRE(nifm_cli({"compare", "--preset", "rotation", "--out", dir.string(), "--threads", "1"}).code == 0);
  std::istringstream csv(slurp(dir / "slopes.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "method,tau,slope");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    const double slope = std::stod(line.substr(line.rfind(',') + 1));
    if (line.starts_with("euler")) CHECK(std::abs(slope - 1) <= 0.3);
    if (line.starts_with("rk4")) CHECK(std::abs(slope - 4) <= 0.3);
  }
  CHECK(rows == 2);
  CHECK(nifm_cli({"compare", "--out", (dir / "dg").string()}).code == 2);
}
