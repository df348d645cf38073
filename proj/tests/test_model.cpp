#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "nifm/error.hpp"
#include "nifm/model.hpp"

using namespace nifm;
using nifm::test::random_model;
using nifm::test::random_query;
using nifm::test::vec2;
using nifm::test::vec3;

namespace {

// Plain-loop reference of the network, written against the tensor names only.
struct Reference {
  const NifmModel& m;

  std::vector<double> tensor(const std::string& name) const {
    const auto s = m.data(m.tensor(name));
    return {s.begin(), s.end()};
  }

  // y = A x for a row-major [rows, cols] tensor.
  std::vector<double> matvec(const std::string& name, const std::vector<double>& x) const {
    const TensorInfo& t = m.tensor(name);
    const auto a = m.data(t);
    std::vector<double> y(t.shape[0], 0.0);
    for (int r = 0; r < t.shape[0]; ++r) {
      for (int c = 0; c < t.shape[1]; ++c) y[r] += a[r * t.shape[1] + c] * x[c];
    }
    return y;
  }

  static double swish(double p) { return p / (1.0 + std::exp(-p)); }

  std::vector<double> features(const std::string& enc, const Vec& x, double t) const {
    const ModelConfig& cfg = m.config();
    const Domain& dom = cfg.domain;
    const int axes = cfg.n + 1;
    std::vector<double> u(axes);
    u[0] = std::clamp((t - dom.t_lo) / (dom.t_hi - dom.t_lo), 0.0, 1.0);
    for (int a = 0; a < cfg.n; ++a) u[a + 1] = std::clamp((x[a] - dom.lo[a]) / (dom.hi[a] - dom.lo[a]), 0.0, 1.0);
    std::vector<double> out;
    for (int l = 0; l < cfg.levels(); ++l) {
      const auto& res = cfg.resolutions[l];
      const auto g = tensor(enc + ".grid." + std::to_string(l));
      std::vector<int> i0(axes);
      std::vector<double> fr(axes);
      for (int a = 0; a < axes; ++a) {
        const double p = u[a] * (res[a] - 1);
        i0[a] = std::min(static_cast<int>(std::floor(p)), res[a] - 2);
        fr[a] = p - i0[a];
      }
      std::vector<double> acc(cfg.feat_dim, 0.0);
      for (int corner = 0; corner < (1 << axes); ++corner) {
        double w = 1.0;
        std::size_t node = 0;
        for (int a = 0; a < axes; ++a) {
          const int bit = (corner >> a) & 1;
          w *= bit ? fr[a] : 1.0 - fr[a];
          node = node * res[a] + i0[a] + bit;
        }
        for (int f = 0; f < cfg.feat_dim; ++f) acc[f] += w * g[node * cfg.feat_dim + f];
      }
      out.insert(out.end(), acc.begin(), acc.end());
    }
    return out;
  }

  std::vector<double> encoder(const std::string& enc, const Vec& x, double t) const {
    const int layers = enc == "nu" ? m.config().nu_layers : m.config().tau_layers;
    std::vector<double> h = features(enc, x, t);
    for (int i = 0; i < layers; ++i) {
      h = matvec(enc + ".mlp." + std::to_string(i), h);
      if (i + 1 < layers) {
        for (double& v : h) v = swish(v);
      }
    }
    return h;
  }

  Vec forward(const FlowQuery& q) const {
    const ModelConfig& cfg = m.config();
    const double s = q.tau / cfg.tau_scale;
    auto gate = [&](int l) {
      auto g = tensor("m." + std::to_string(l));
      for (double& v : g) v = std::tanh(s * v);
      return g;
    };
    const auto fnu = encoder("nu", q.x, q.t);
    const auto mixed = matvec("W.1", encoder("tau", q.x, q.t));
    std::vector<double> z(cfg.d);
    const auto g0 = gate(0);
    for (int i = 0; i < cfg.d; ++i) z[i] = g0[i] * fnu[i];
    for (int l = 1; l <= cfg.blocks; ++l) {
      std::vector<double> p(cfg.d);
      if (l == 1) {
        for (int i = 0; i < cfg.d; ++i) p[i] = z[i] * mixed[i];
      } else {
        p = matvec("W." + std::to_string(l), z);
      }
      const auto g = gate(l);
      for (int i = 0; i < cfg.d; ++i) z[i] += g[i] * swish(p[i]);
    }
    const auto disp = matvec("W.out", z);
    Vec out = q.x;
    for (int a = 0; a < cfg.n; ++a) out[a] += disp[a];
    return out;
  }

  Vec velocity(const Vec& x, double t) const {
    const auto fnu = encoder("nu", x, t);
    const auto m0 = tensor("m.0");
    std::vector<double> h(fnu.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = m0[i] * fnu[i];
    const auto v = matvec("W.out", h);
    Vec out(m.config().n);
    for (int a = 0; a < m.config().n; ++a) out[a] = v[a] / m.config().tau_scale;
    return out;
  }
};

void fill(NifmModel& m, const std::string& name, std::initializer_list<double> values) {
  auto d = m.data(m.tensor(name));
  REQUIRE(d.size() == values.size());
  std::copy(values.begin(), values.end(), d.begin());
}

double rel_err(const Vec& got, const Vec& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

ModelConfig skeleton(int n) {
  ModelConfig cfg;
  cfg.n = n;
  cfg.domain = Domain::box(Vec::Zero(n), Vec::Ones(n), 0, 1);
  cfg.resolutions = {Resolution(n + 1, 2)};
  return cfg;
}

}  // namespace

TEST_CASE("activation preconditions") {
  Eigen::ArrayXXd zero = Eigen::ArrayXXd::Zero(1, 1);
  CHECK(detail::swish(zero)(0, 0) == 0.0);
  CHECK(detail::swish_d1(zero)(0, 0) == doctest::Approx(0.5));
  CHECK(std::tanh(0.0) == 0.0);
  const double h = 1e-6;
  CHECK((std::tanh(h) - std::tanh(-h)) / (2 * h) == doctest::Approx(1.0).epsilon(1e-10));
  // Derivatives against finite differences.
  Eigen::ArrayXXd p(1, 5);
  p << -3.0, -0.7, 0.1, 1.2, 4.0;
  const Eigen::ArrayXXd e = Eigen::ArrayXXd::Constant(1, 5, 1e-5);
  const Eigen::ArrayXXd d1 = (detail::swish(p + e) - detail::swish(p - e)) / 2e-5;
  const Eigen::ArrayXXd d2 = (detail::swish_d1(p + e) - detail::swish_d1(p - e)) / 2e-5;
  CHECK((d1 - detail::swish_d1(p)).abs().maxCoeff() <= 1e-8);
  CHECK((d2 - detail::swish_d2(p)).abs().maxCoeff() <= 1e-8);
}

TEST_CASE("k_for_tau") {
  CHECK(k_for_tau(StepPolicy::Sqrt, 48) == 7);
  CHECK(k_for_tau(StepPolicy::Sqrt, 1) == 1);
  CHECK(k_for_tau(StepPolicy::Sqrt, 49) == 7);
  CHECK(k_for_tau(StepPolicy::Sqrt, 24) == 5);
  CHECK(k_for_tau(StepPolicy::Full, 2.5) == 3);
  CHECK(k_for_tau(StepPolicy::Full, 24) == 24);
  CHECK(k_for_tau(StepPolicy::Single, 1000) == 1);
  CHECK(k_for_tau(StepPolicy::Log, 0.1) == 1);
  CHECK(k_for_tau(StepPolicy::Log, 24) == 4);
  for (StepPolicy p : {StepPolicy::Sqrt, StepPolicy::Full, StepPolicy::Log, StepPolicy::Single}) {
    CHECK(k_for_tau(p, 0.0) == 1);
    CHECK(k_for_tau(p, 1e-6) >= 1);
    CHECK(parse_step_policy(to_string(p)) == p);
  }
  CHECK_THROWS_AS(parse_step_policy("cubic"), ConfigError);
}

TEST_CASE("grid ladder") {
  const auto ladder = grid_resolutions({8, 8, 8}, 1.65, 4);
  REQUIRE(ladder.size() == 4);
  const int want[4] = {8, 14, 22, 36};
  for (int l = 0; l < 4; ++l) CHECK(ladder[l] == Resolution{want[l], want[l], want[l]});
  const auto one = grid_resolutions({3, 5, 7}, 1.65, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == Resolution{3, 5, 7});
}

TEST_CASE("parameter count is monotone in the base resolution") {
  ModelConfig cfg = skeleton(2);
  std::size_t prev = 0;
  for (int r = 2; r <= 20; ++r) {
    cfg.resolutions = grid_resolutions({r, r, r}, 1.65, 4);
    const std::size_t c = parameter_count(cfg);
    CHECK(c > prev);
    prev = c;
  }
  // Dense part: f_nu 32x64 + 64x64, f_tau 32x64, 4 gates, 3 mixers, 2x64 output.
  cfg.resolutions = grid_resolutions({2, 2, 2}, 1.0, 4);
  const std::size_t grids = 2 * 4 * 8 * 8;
  CHECK(parameter_count(cfg) == grids + 32 * 64 + 64 * 64 + 32 * 64 + 4 * 64 + 3 * 64 * 64 + 2 * 64);
  CHECK(NifmModel(cfg).params().size() == parameter_count(cfg));
}

TEST_CASE("compression target for the full-size double gyre") {
  ModelConfig cfg = skeleton(2);
  cfg.domain = Domain::box(vec2(0, 0), vec2(2, 1), 0, 10);
  const Resolution field{200, 500, 400};
  cfg.resolutions = grid_resolutions(solve_base_resolution(cfg, field, 10.0, 1.65, 4), 1.65, 4);
  const double target = 200.0 * 500 * 400 * 2 / 10;
  const double got = static_cast<double>(parameter_count(cfg));
  MESSAGE("parameters " << got << " target " << target);
  CHECK(std::abs(got - target) <= 0.05 * target);

  CHECK_THROWS_AS(solve_base_resolution(cfg, {8, 8, 8}, 10.0, 1.65, 4), ConfigError);
}

TEST_CASE("configuration validation") {
  ModelConfig cfg = skeleton(2);
  cfg.resolutions = {{2, 1, 2}};
  CHECK_THROWS_AS(NifmModel{cfg}, ConfigError);
  cfg = skeleton(2);
  cfg.resolutions = {{2, 2}};
  CHECK_THROWS_AS(NifmModel{cfg}, ConfigError);
  cfg = skeleton(2);
  cfg.tau_scale = 0;
  CHECK_THROWS_AS(NifmModel{cfg}, ConfigError);
}

TEST_CASE("tensor layout and order") {
  const NifmModel m(skeleton(3));
  std::vector<std::string> names;
  for (const auto& t : m.tensors()) names.push_back(t.name);
  const std::vector<std::string> want{"nu.grid.0", "nu.mlp.0", "nu.mlp.1", "tau.grid.0", "tau.mlp.0",
                                      "m.0", "m.1", "m.2", "m.3", "W.1", "W.2", "W.3", "W.out"};
  CHECK(names == want);
  CHECK(m.tensor("nu.grid.0").shape == std::vector<int>{2, 2, 2, 2, 8});
  CHECK(m.tensor("W.out").shape == std::vector<int>{3, 64});
  std::size_t offset = 0;
  for (const auto& t : m.tensors()) {
    CHECK(t.offset == offset);
    offset += t.size;
  }
  CHECK_THROWS(m.tensor("W.4"));
}

TEST_CASE("init_params is deterministic and in range") {
  ModelConfig cfg = skeleton(2);
  cfg.resolutions = grid_resolutions({3, 4, 4}, 1.65, 4);
  const NifmModel a = init_params(cfg, 42);
  const NifmModel b = init_params(cfg, 42);
  const NifmModel c = init_params(cfg, 43);
  CHECK(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
  CHECK_FALSE(std::equal(a.params().begin(), a.params().end(), c.params().begin()));
  for (const auto& t : a.tensors()) {
    const auto v = a.data(t);
    double bound = 1e-4;
    if (t.name.starts_with("m.")) bound = 1.0;
    if (t.shape.size() == 2) bound = std::sqrt(3.0 / t.shape[1]);
    for (double p : v) {
      CHECK(static_cast<double>(static_cast<float>(p)) == p);
      REQUIRE(std::abs(p) <= bound * (1 + 1e-6));
    }
    if (t.name.starts_with("m.")) {
      for (double p : v) CHECK(p == 1.0);
    }
  }
  CounterRng rng(1);
  for (int i = 0; i < 20; ++i) {
    const FlowQuery q{vec2(rng.uniform(0, 1), rng.uniform(0, 1)), rng.uniform(0, 1), 0.0};
    CHECK(forward(a, q) == q.x);
  }
}

TEST_CASE("encoder") {
  ModelConfig cfg = skeleton(2);
  cfg.resolutions = {{2, 2, 2}, {3, 4, 4}};
  cfg.d = 4;
  NifmModel m(cfg);
  CounterRng rng(5);
  for (double& p : m.params()) p = rng.uniform(-1, 1);

  SUBCASE("zero grids give a zero encoding") {
    for (int g : m.grid_tensors(Encoder::Nu)) {
      for (double& v : m.data(m.tensors()[g])) v = 0.0;
    }
    for (int i = 0; i < 10; ++i) {
      const Vec x = vec2(rng.uniform(0, 1), rng.uniform(0, 1));
      CHECK(encode(m, Encoder::Nu, x, rng.uniform(0, 1)).isZero(0.0));
    }
  }

  SUBCASE("node exactness on the coarsest level") {
    auto g = m.data(m.tensor("nu.grid.0"));
    std::fill(g.begin(), g.end(), 0.0);
    // Node [t=1, x=0, y=1]: flat index (1*2 + 0)*2 + 1 = 5.
    g[5 * 8 + 3] = 0.625;
    const Eigen::VectorXd f = interpolate_features(m, Encoder::Nu, vec2(0, 1), 1.0);
    REQUIRE(f.size() == 16);
    for (int k = 0; k < 8; ++k) CHECK(f[k] == (k == 3 ? 0.625 : 0.0));
  }

  SUBCASE("cell center is the mean of the corners") {
    const auto g = m.data(m.tensor("tau.grid.0"));
    const Eigen::VectorXd f = interpolate_features(m, Encoder::Tau, vec2(0.5, 0.5), 0.5);
    for (int k = 0; k < 8; ++k) {
      double mean = 0.0;
      for (int node = 0; node < 8; ++node) mean += g[node * 8 + k];
      CHECK(f[k] == doctest::Approx(mean / 8).epsilon(1e-14));
    }
  }

  SUBCASE("matches the reference encoder") {
    const Reference ref{m};
    for (int i = 0; i < 20; ++i) {
      const Vec x = vec2(rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2));
      const double t = rng.uniform(-0.2, 1.2);
      for (auto [e, name] : {std::pair{Encoder::Nu, "nu"}, std::pair{Encoder::Tau, "tau"}}) {
        const Eigen::VectorXd got = encode(m, e, x, t);
        const auto want = ref.encoder(name, x, t);
        for (int k = 0; k < cfg.d; ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("hand-evaluated tiny model") {
  ModelConfig cfg = skeleton(2);
  cfg.d = 2;
  cfg.feat_dim = 1;
  cfg.nu_layers = 1;
  NifmModel m(cfg);
  std::fill(m.params().begin(), m.params().end(), 0.0);
  // Single feature, nonzero only at the node (t=0, x=0, y=0).
  fill(m, "nu.grid.0", {0.5, 0, 0, 0, 0, 0, 0, 0});
  fill(m, "tau.grid.0", {2.0, 0, 0, 0, 0, 0, 0, 0});
  fill(m, "nu.mlp.0", {1.0, -1.0});
  fill(m, "tau.mlp.0", {1.0, 0.5});
  fill(m, "m.0", {1.0, 1.0});
  fill(m, "m.1", {0.5, 0.5});
  fill(m, "W.1", {1, 0, 0, 1});
  fill(m, "W.out", {1, 0, 0, 1});

  // f_nu = (0.5, -0.5), f_tau = (2, 1), tau = 0.3.
  const double g0 = std::tanh(0.3), g1 = std::tanh(0.15);
  const double z0a = g0 * 0.5, z0b = -g0 * 0.5;
  const double p1a = z0a * 2.0, p1b = z0b * 1.0;
  auto sw = [](double p) { return p / (1 + std::exp(-p)); };
  const double z1a = z0a + g1 * sw(p1a), z1b = z0b + g1 * sw(p1b);

  const FlowQuery q{vec2(0, 0), 0.0, 0.3};
  const Vec got = forward(m, q);
  CHECK(std::abs(got[0] - z1a) <= 1e-12);
  CHECK(std::abs(got[1] - z1b) <= 1e-12);
  // Blocks 2 and 3 have zero gates, so the velocity is m0 * f_nu.
  const Vec v = instantaneous_velocity(m, q.x, 0.0);
  CHECK(v[0] == 0.5);
  CHECK(v[1] == -0.5);
}

TEST_CASE("forward agrees with the reference implementation") {
  for (int n : {2, 3}) {
    const NifmModel m = random_model(n, 10 + n);
    const Reference ref{m};
    CounterRng rng(n);
    for (int i = 0; i < 30; ++i) {
      const FlowQuery q = random_query(m.config().domain, rng, -3, 3);
      CHECK(rel_err(forward(m, q) - q.x, ref.forward(q) - q.x) <= 1e-12);
      CHECK(rel_err(instantaneous_velocity(m, q.x, q.t), ref.velocity(q.x, q.t)) <= 1e-12);
    }
  }
}

TEST_CASE("identity at zero span is exact") {
  for (int n : {2, 3}) {
    CounterRng rng(77 + n);
    for (int trial = 0; trial < 20; ++trial) {
      const NifmModel m = random_model(n, 100 + trial, 8, 2.0);
      for (int i = 0; i < 10; ++i) {
        FlowQuery q = random_query(m.config().domain, rng, 0, 0);
        q.tau = 0.0;
        REQUIRE(forward(m, q) == q.x);
        for (int k : {2, 5}) REQUIRE(forward_multi_step(m, q, k) == q.x);
      }
    }
  }
}

TEST_CASE("first-order expansion around zero span") {
  const NifmModel m = random_model(2, 3);
  CounterRng rng(9);
  for (int i = 0; i < 10; ++i) {
    const FlowQuery q0 = random_query(m.config().domain, rng, 0, 0);
    const Vec v = instantaneous_velocity(m, q0.x, q0.t);
    std::vector<double> c;
    for (double eps : {1e-2, 1e-3, 1e-4}) {
      const double tau = eps * m.config().tau_scale;
      const Vec r = forward(m, {q0.x, q0.t, tau}) - (q0.x + tau * v);
      c.push_back(r.norm() / (eps * eps));
    }
    // The second-order coefficient is stable across decades.
    CHECK(c[1] <= 1.5 * c[0] + 1e-6);
    CHECK(c[2] <= 1.5 * c[0] + 1e-4);
  }
}

TEST_CASE("tau derivative") {
  for (int n : {2, 3}) {
    const NifmModel m = random_model(n, 20 + n);
    const double scale = m.config().tau_scale;
    CounterRng rng(30 + n);
    for (int i = 0; i < 50; ++i) {
      FlowQuery q = random_query(m.config().domain, rng, -4, 4);
      const Vec d = tau_derivative(m, q);
      const double e = 1e-4 * scale;
      const Vec fd = (forward(m, {q.x, q.t, q.tau + e}) - forward(m, {q.x, q.t, q.tau - e})) / (2 * e);
      CHECK(rel_err(fd, d) <= 1e-4);

      q.tau = 0.0;
      const Vec d0 = tau_derivative(m, q);
      CHECK((d0 - instantaneous_velocity(m, q.x, q.t)).norm() <= 1e-12);
    }
  }
}

TEST_CASE("zero gates remove every span pathway") {
  NifmModel m = random_model(2, 4);
  for (int g : m.layout().gate) {
    for (double& v : m.data(m.tensors()[g])) v = 0.0;
  }
  CounterRng rng(4);
  for (int i = 0; i < 10; ++i) {
    const FlowQuery q = random_query(m.config().domain, rng, -3, 3);
    CHECK(tau_derivative(m, q).isZero(0.0));
    CHECK(forward(m, q) == q.x);
  }
}

TEST_CASE("velocity is decoupled from the span pathway") {
  const NifmModel base = random_model(2, 6);
  CounterRng rng(6);
  std::vector<FlowQuery> qs;
  for (int i = 0; i < 10; ++i) qs.push_back(random_query(base.config().domain, rng, 0, 0));
  for (int trial = 0; trial < 20; ++trial) {
    NifmModel m = base;
    for (const auto& t : m.tensors()) {
      const bool coupled = t.name.starts_with("tau.") || t.name == "W.1" || t.name == "W.2" ||
                           t.name == "W.3" || t.name == "m.1" || t.name == "m.2" || t.name == "m.3";
      if (!coupled) continue;
      for (double& v : m.data(t)) v += rng.uniform(-1, 1);
    }
    for (const auto& q : qs) {
      REQUIRE(instantaneous_velocity(m, q.x, q.t) == instantaneous_velocity(base, q.x, q.t));
    }
  }
}

TEST_CASE("multi-step composition") {
  const NifmModel m = random_model(2, 8, 8, 0.5);
  const Domain& dom = m.config().domain;
  const Reference ref{m};
  CounterRng rng(8);
  for (int i = 0; i < 20; ++i) {
    const FlowQuery q = random_query(dom, rng, -3, 3);
    CHECK(forward_multi_step(m, q, 1) == forward(m, q));
    for (int k : {2, 3, 7}) {
      Vec x = q.x;
      double t = q.t;
      for (int j = 0; j < k; ++j) {
        x = ref.forward({x, t, q.tau / k});
        t += q.tau / k;
        if (j + 1 < k) x = dom.clamp(x);
      }
      CHECK(rel_err(forward_multi_step(m, q, k) - q.x, x - q.x) <= 1e-10);
    }
  }
}

TEST_CASE("batched evaluation matches single queries") {
  const NifmModel m = random_model(3, 12);
  CounterRng rng(12);
  std::vector<FlowQuery> qs;
  for (int i = 0; i < 17; ++i) qs.push_back(random_query(m.config().domain, rng, -3, 3));
  const QueryBatch b = QueryBatch::from(qs);
  const Eigen::MatrixXd fwd = forward_batch(m, b);
  const Eigen::MatrixXd der = tau_derivative_batch(m, b);
  const Eigen::MatrixXd vel = velocity_batch(m, b.x, b.t);
  std::vector<int> steps;
  for (int i = 0; i < 17; ++i) steps.push_back(1 + i % 4);
  const Eigen::MatrixXd ms = multi_step_batch(m, b, steps);
  for (int i = 0; i < 17; ++i) {
    CHECK(rel_err(fwd.col(i), forward(m, qs[i])) <= 1e-13);
    CHECK(rel_err(der.col(i), tau_derivative(m, qs[i])) <= 1e-13);
    CHECK(rel_err(vel.col(i), instantaneous_velocity(m, qs[i].x, qs[i].t)) <= 1e-13);
    CHECK(rel_err(ms.col(i), forward_multi_step(m, qs[i], steps[i])) <= 1e-13);
  }
}

TEST_CASE("round_to_f32") {
  NifmModel m = random_model(2, 1);
  m.params()[0] = 0.1;
  m.round_to_f32();
  CHECK(m.params()[0] == static_cast<double>(0.1f));
}
