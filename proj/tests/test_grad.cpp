#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "nifm/error.hpp"
#include "nifm/grad.hpp"

using namespace nifm;
using nifm::test::random_model;
using nifm::test::random_query;
using nifm::test::vec2;

namespace {

VelocityBatch velocity_batch_for(const Domain& dom, int count, CounterRng& rng) {
  VelocityBatch b;
  b.x.resize(dom.n, count);
  b.t.resize(count);
  b.v.resize(dom.n, count);
  for (int i = 0; i < count; ++i) {
    for (int a = 0; a < dom.n; ++a) {
      b.x(a, i) = rng.uniform(dom.lo[a], dom.hi[a]);
      b.v(a, i) = rng.uniform(-1, 1);
    }
    b.t[i] = rng.uniform(dom.t_lo, dom.t_hi);
  }
  return b;
}

QueryBatch query_batch_for(const Domain& dom, int count, CounterRng& rng, double tau_lo, double tau_hi) {
  std::vector<FlowQuery> qs;
  for (int i = 0; i < count; ++i) qs.push_back(random_query(dom, rng, tau_lo, tau_hi));
  return QueryBatch::from(qs);
}

bool stage1_tensor(const std::string& name) {
  return name.starts_with("nu.") || name == "m.0" || name == "W.out";
}

// Central differences of `loss` on a few entries of every tensor.
template <typename Loss>
void check_against_fd(NifmModel m, const ParamGradients& g, Loss&& loss, const StageMask& mask) {
  CounterRng rng(404);
  for (std::size_t ti = 0; ti < m.tensors().size(); ++ti) {
    const TensorInfo t = m.tensors()[ti];
    if (!mask.contains(static_cast<int>(ti))) continue;
    double worst = 0.0, scale = 0.0;
    for (int probe = 0; probe < 6; ++probe) {
      const std::size_t j = t.offset + static_cast<std::size_t>(rng.uniform() * t.size);
      const double p = m.params()[j];
      const double h = 1e-5 * std::max(std::abs(p), 1.0);
      m.params()[j] = p + h;
      const double up = loss(m);
      m.params()[j] = p - h;
      const double down = loss(m);
      m.params()[j] = p;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.flat[j]));
      scale = std::max({scale, std::abs(fd), std::abs(g.flat[j])});
    }
    INFO(t.name);
    CHECK(worst <= 1e-5 * std::max(scale, 1e-3));
  }
}

}  // namespace

TEST_CASE("stage masks") {
  const NifmModel m = random_model(2, 1);
  const StageMask s1 = StageMask::stage1(m);
  const StageMask s2 = StageMask::stage2(m);
  for (std::size_t i = 0; i < m.tensors().size(); ++i) {
    const std::string& name = m.tensors()[i].name;
    CHECK(s1.contains(static_cast<int>(i)) == stage1_tensor(name));
    CHECK(s2.contains(static_cast<int>(i)));
    CHECK(s2.finetune[i] == stage1_tensor(name));
  }
}

TEST_CASE("stage-1 loss by hand") {
  NifmModel m = random_model(2, 2);
  SUBCASE("zero model on a constant field gives |c|") {
    std::fill(m.params().begin(), m.params().end(), 0.0);
    VelocityBatch b;
    b.x = Eigen::MatrixXd::Constant(2, 3, 0.5);
    b.t = Eigen::VectorXd::Constant(3, 1.0);
    b.v = Eigen::MatrixXd(2, 3);
    b.v.colwise() = Eigen::Vector2d(0.3, 0.4);
    CHECK(loss_stage1(m, b) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("two samples") {
    VelocityBatch b;
    b.x.resize(2, 2);
    b.x << 0.3, 1.7, 0.9, 0.2;
    b.t = Eigen::Vector2d(0.5, 3.1);
    b.v.resize(2, 2);
    b.v << 1.0, -0.5, 2.0, 0.25;
    const Vec v0 = instantaneous_velocity(m, vec2(0.3, 0.9), 0.5);
    const Vec v1 = instantaneous_velocity(m, vec2(1.7, 0.2), 3.1);
    const double want = 0.5 * ((v0 - vec2(1.0, 2.0)).norm() + (v1 - vec2(-0.5, 0.25)).norm());
    CHECK(loss_stage1(m, b) == doctest::Approx(want).epsilon(1e-13));
  }
  SUBCASE("perfect fit is zero and has zero gradient") {
    CounterRng rng(2);
    VelocityBatch b = velocity_batch_for(m.config().domain, 5, rng);
    b.v = velocity_batch(m, b.x, b.t);
    CHECK(loss_stage1(m, b) == 0.0);
    const LossGrad lg = backward_stage1(m, b, StageMask::stage1(m));
    CHECK(lg.loss == 0.0);
    for (double g : lg.grad.flat) REQUIRE(g == 0.0);
  }
}

TEST_CASE("stage-2 loss equals the hand-chained operations") {
  const NifmModel m = random_model(2, 3);
  CounterRng rng(3);
  for (int i = 0; i < 5; ++i) {
    const FlowQuery q = random_query(m.config().domain, rng, 0.2, 2.5);
    const int k = k_for_tau(StepPolicy::Sqrt, q.tau / m.config().time_voxel);
    const Vec end = forward_multi_step(m, q, k);
    const Vec target = instantaneous_velocity(m, end, q.t + q.tau);
    const double want = (tau_derivative(m, q) - target).norm();
    const QueryBatch b = QueryBatch::single(q);
    CHECK(loss_stage2(m, b, StepPolicy::Sqrt) == doctest::Approx(want).epsilon(1e-12));
    CHECK((stage2_targets(m, b, StepPolicy::Sqrt).col(0) - target).norm() <= 1e-12 * std::max(1.0, target.norm()));
  }
}

TEST_CASE("stage-2 loss vanishes as the span goes to zero") {
  const NifmModel m = random_model(2, 4);
  CounterRng rng(4);
  const QueryBatch b0 = query_batch_for(m.config().domain, 20, rng, 0, 0);
  double prev = 1e300;
  for (double tau : {1e-1, 1e-3, 1e-5}) {
    QueryBatch b = b0;
    b.tau.setConstant(tau);
    const double l = loss_stage2(m, b, StepPolicy::Sqrt);
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev <= 1e-3);
}

TEST_CASE("supervised loss") {
  const NifmModel m = random_model(2, 5);
  FlowMapSample s;
  s.query = {vec2(0.4, 1.1), 1.2, 0.8};
  s.end = vec2(0.9, 1.3);
  s.velocity = vec2(0.25, -0.75);
  const std::vector<FlowMapSample> samples{s};
  const double want = (tau_derivative(m, s.query) - s.velocity).norm();
  CHECK(loss_flowmap_supervised(m, samples) == doctest::Approx(want).epsilon(1e-13));

  // Equals the self-consistency loss when the targets coincide.
  const QueryBatch b = QueryBatch::single(s.query);
  std::vector<FlowMapSample> own{s};
  own[0].velocity = stage2_targets(m, b, StepPolicy::Sqrt).col(0);
  CHECK(loss_flowmap_supervised(m, own) == doctest::Approx(loss_stage2(m, b, StepPolicy::Sqrt)).epsilon(1e-13));

  Eigen::MatrixXd targets;
  const QueryBatch sb = supervised_batch(samples, targets);
  CHECK(sb.size() == 1);
  CHECK(targets.col(0) == s.velocity);
}

TEST_CASE("zero-velocity model fits a zero field exactly") {
  NifmModel m = random_model(2, 6);
  for (double& v : m.data(m.tensor("W.out"))) v = 0.0;
  CounterRng rng(6);
  VelocityBatch vb = velocity_batch_for(m.config().domain, 8, rng);
  vb.v.setZero();
  CHECK(loss_stage1(m, vb) == 0.0);
  const QueryBatch qb = query_batch_for(m.config().domain, 8, rng, 0.5, 3);
  CHECK(loss_stage2(m, qb, StepPolicy::Sqrt) == 0.0);
}

TEST_CASE("stage-1 gradients match finite differences") {
  for (int n : {2, 3}) {
    const NifmModel m = random_model(n, 10 + n, 6);
    CounterRng rng(n);
    const VelocityBatch b = velocity_batch_for(m.config().domain, 9, rng);
    const StageMask mask = StageMask::stage1(m);
    const LossGrad lg = backward_stage1(m, b, mask);
    CHECK(lg.loss == doctest::Approx(loss_stage1(m, b)).epsilon(1e-13));
    REQUIRE(lg.sample_loss.size() == 9);
    check_against_fd(m, lg.grad, [&](const NifmModel& p) { return loss_stage1(p, b); }, mask);
    for (std::size_t i = 0; i < m.tensors().size(); ++i) {
      if (mask.contains(static_cast<int>(i))) continue;
      for (double g : lg.grad.of(m.tensors()[i])) REQUIRE(g == 0.0);
    }
  }
}

TEST_CASE("derivative-loss gradients match finite differences with frozen targets") {
  for (int n : {2, 3}) {
    const NifmModel m = random_model(n, 20 + n, 6);
    CounterRng rng(20 + n);
    const QueryBatch b = query_batch_for(m.config().domain, 7, rng, -2.5, 2.5);
    const Eigen::MatrixXd targets = stage2_targets(m, b, StepPolicy::Sqrt);
    const StageMask mask = StageMask::stage2(m);
    const LossGrad lg = backward_derivative(m, b, targets, mask);
    check_against_fd(m, lg.grad, [&](const NifmModel& p) { return derivative_loss(p, b, targets); }, mask);

    // The target branch carries no gradient.
    const LossGrad frozen = backward_stage2(m, b, StepPolicy::Sqrt, mask);
    CHECK(frozen.grad.flat == lg.grad.flat);
    CHECK(frozen.loss == lg.loss);
  }
}

TEST_CASE("stage-1 mask on the derivative loss zeroes the span pathway") {
  const NifmModel m = random_model(2, 30);
  CounterRng rng(30);
  const QueryBatch b = query_batch_for(m.config().domain, 5, rng, 0.5, 2);
  const StageMask mask = StageMask::stage1(m);
  const LossGrad lg = backward_stage2(m, b, StepPolicy::Sqrt, mask);
  bool any_active = false;
  for (std::size_t i = 0; i < m.tensors().size(); ++i) {
    for (double g : lg.grad.of(m.tensors()[i])) {
      if (!mask.contains(static_cast<int>(i))) REQUIRE(g == 0.0);
      any_active = any_active || g != 0.0;
    }
  }
  CHECK(any_active);
}

TEST_CASE("sharded reduction is reproducible") {
  const NifmModel m = random_model(2, 40);
  CounterRng rng(40);
  const QueryBatch b = query_batch_for(m.config().domain, 700, rng, 0.5, 3);
  const StageMask mask = StageMask::stage2(m);
  const LossGrad a = backward_stage2(m, b, StepPolicy::Sqrt, mask, 1);
  const LossGrad again = backward_stage2(m, b, StepPolicy::Sqrt, mask, 1);
  CHECK(a.grad.flat == again.grad.flat);
  const LossGrad par = backward_stage2(m, b, StepPolicy::Sqrt, mask, 3);
  CHECK(par.sample_loss == a.sample_loss);
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.grad.flat.size(); ++i) {
    diff = std::max(diff, std::abs(a.grad.flat[i] - par.grad.flat[i]));
    scale = std::max(scale, std::abs(a.grad.flat[i]));
  }
  CHECK(diff <= 1e-12 * scale);
  CHECK(par.grad.flat == backward_stage2(m, b, StepPolicy::Sqrt, mask, 3).grad.flat);
}

TEST_CASE("non-finite gradients name the tensor") {
  NifmModel m = random_model(2, 50);
  m.data(m.tensor("W.out"))[0] = std::numeric_limits<double>::infinity();
  CounterRng rng(50);
  const VelocityBatch b = velocity_batch_for(m.config().domain, 3, rng);
  CHECK_THROWS_AS(backward_stage1(m, b, StageMask::stage1(m)), NumericalError);
}

TEST_CASE("finite-difference harness on the toy model") {
  for (int n : {2, 3}) {
    const NifmModel toy = toy_model(n, 7);
    CHECK(toy.config().d == 8);
    CHECK(toy.config().levels() == 1);
    for (GradCheckLoss loss : {GradCheckLoss::Stage1, GradCheckLoss::Stage2}) {
      const auto rows = check_gradients(toy, loss, 11);
      const StageMask mask = loss == GradCheckLoss::Stage1 ? StageMask::stage1(toy) : StageMask::stage2(toy);
      std::size_t active = 0;
      for (std::size_t i = 0; i < toy.tensors().size(); ++i) active += mask.contains(static_cast<int>(i));
      CHECK(rows.size() == active);
      for (const auto& r : rows) {
        INFO(r.tensor);
        CHECK(r.rel_error <= 1e-3);
      }
    }
  }
}
