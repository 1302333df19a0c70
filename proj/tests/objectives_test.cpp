#include <catch2/catch_amalgamated.hpp>

#include "omg/model.hpp"
#include "omg/objectives.hpp"
#include "omg/train.hpp"
#include "omg/verify.hpp"

using namespace omg;

namespace {
Config tiny() {
  Config cfg;
  cfg.data.latent_dim = 4;
  cfg.data.modality_dims = {6, 4, 4};
  cfg.data.n_train = 40;
  cfg.data.n_val = 16;
  cfg.data.n_test = 8;
  cfg.protocol.mr = 0.5;
  cfg.diffusion.steps = 12;
  cfg.train.vae_epochs = 4;
  cfg.train.align_epochs = 3;
  cfg.train.projector_epochs = 2;
  cfg.train.diffusion_epochs = 3;
  return cfg;
}

std::vector<RecDraw> make_batch(const ModelBundle& m, int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<RecDraw> batch;
  for (int i = 0; i < n; ++i) {
    RecDraw d;
    d.z0 = gaussian_vec(m.cfg.dims.d_z, rng);
    d.t = 1 + rng.uniform_int(m.sched.steps);
    d.eps = gaussian_vec(m.cfg.dims.d_z, rng);
    d.u_x = gaussian_vec(m.cfg.dims.d, rng);
    d.c_s = gaussian_vec(m.cfg.dims.d_s, rng);
    d.evidence = gaussian_vec(m.cfg.dims.d_z, rng);
    d.label = rng.uniform_int(kNumClasses);
    batch.push_back(std::move(d));
  }
  return batch;
}
}  // namespace

TEST_CASE("loss_plan is the cosine cost in plan space") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  const ModalityStack& stack = m->stacks.front();
  Rng rng(3);
  Vec y = gaussian_vec(stack.vae.target_dim(), rng);
  Vec gy = stack.g_y.forward(y);
  REQUIRE(loss_plan(y, gy, stack.g_y) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(loss_plan(y, Vec(-gy), stack.g_y) == Catch::Approx(2.0).margin(1e-12));
  // cos = 0.6 -> 0.4, built from a rotation in the plane spanned by gy
  Vec other = gaussian_vec(int(gy.size()), rng);
  Vec orth = (other - other.dot(gy) / gy.squaredNorm() * gy).normalized();
  Vec target = 0.6 * gy.normalized() + 0.8 * orth;
  REQUIRE(loss_plan(y, target, stack.g_y) == Catch::Approx(0.4).margin(1e-9));
}

TEST_CASE("loss_evi is an elementwise L1 distance") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  const ModalityStack& stack = m->stacks.front();
  Rng rng(7);
  Vec y = gaussian_vec(stack.vae.target_dim(), rng);
  Vec e = gaussian_vec(cfg.dims.d_z, rng);
  double got = loss_evi(y, e, stack.phi, stack.align_head);
  // scalar-loop oracle
  Vec a = stack.phi.forward(y);
  Vec b = stack.align_head.forward(e);
  double expect = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) expect += std::abs(a[i] - b[i]);
  REQUIRE(got == Catch::Approx(expect).margin(1e-12));
  // L1 hand case: |(1,2) - (0,0)|_1 = 3
  Vec p(2), q(2);
  p << 1, 2;
  q << 0, 0;
  REQUIRE((p - q).cwiseAbs().sum() == 3.0);
  ad::Tape t;
  REQUIRE(t.val(t.l1dist(t.constant(p), t.constant(q)))[0] == 3.0);
}

TEST_CASE("loss_rec: oracle predictor, decomposition, defaults") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  ModalityStack& stack = m->stacks.front();
  auto batch = make_batch(*m, 6, 11);

  // a perfect oracle that returns the true injected noise
  int cursor = 0;
  auto oracle = [&](const Vec&, int, const Vec&, const Vec&, const Vec&) {
    return batch[size_t(cursor++ % batch.size())].eps;
  };
  RecLossParts oracle_parts =
      loss_rec(batch, oracle, m->sched, stack.vae, stack.g_y, stack.phi, stack.align_head);
  REQUIRE(oracle_parts.mse == Catch::Approx(0.0).margin(1e-18));
  REQUIRE(oracle_parts.total(0.0, 0.0) == Catch::Approx(0.0).margin(1e-18));

  auto predictor = [&](const Vec& z_t, int t, const Vec& u, const Vec& c, const Vec& e) {
    return stack.denoiser.predict(z_t, t, u, c, e, m->sched);
  };
  RecLossParts parts =
      loss_rec(batch, predictor, m->sched, stack.vae, stack.g_y, stack.phi, stack.align_head);
  REQUIRE(parts.mse >= 0.0);
  REQUIRE(parts.plan >= 0.0);
  REQUIRE(parts.evi >= 0.0);
  // recombination of separately logged terms
  REQUIRE(parts.total(0.1, 0.1) ==
          Catch::Approx(parts.mse + 0.1 * parts.plan + 0.1 * parts.evi).margin(1e-9));
  REQUIRE(cfg.loss.lambda_p == 0.1);
  REQUIRE(cfg.loss.lambda_e == 0.1);
}

TEST_CASE("loss_task: analytic values and the tweedie gradient path") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  ModalityStack& stack = m->stacks.front();
  auto batch = make_batch(*m, 4, 13);
  auto predictor = [&](const Vec& z_t, int t, const Vec& u, const Vec& c, const Vec& e) {
    return stack.denoiser.predict(z_t, t, u, c, e, m->sched);
  };

  // uniform logits give exactly ln 7
  m->classifier.w2->value.setZero();
  m->classifier.b2->value.setZero();
  REQUIRE(loss_task(batch, predictor, m->sched, m->classifier) ==
          Catch::Approx(std::log(7.0)).margin(1e-12));

  // a classifier that puts ~all mass on the right class scores ~0
  auto one_hot_batch = batch;
  for (auto& d : one_hot_batch) d.label = 2;
  m->classifier.w2->value.setZero();
  m->classifier.b2->value.setZero();
  m->classifier.b2->value(2, 0) = 1000.0;
  REQUIRE(loss_task(one_hot_batch, predictor, m->sched, m->classifier) ==
          Catch::Approx(0.0).margin(1e-9));

  PropertyResult r = check_tweedie_gradient_path();
  INFO(r.detail);
  REQUIRE(r.pass);
}

TEST_CASE("loss_total is linear in lambda_task") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  ModalityStack& stack = m->stacks.front();
  auto batch = make_batch(*m, 5, 17);
  auto predictor = [&](const Vec& z_t, int t, const Vec& u, const Vec& c, const Vec& e) {
    return stack.denoiser.predict(z_t, t, u, c, e, m->sched);
  };
  RecLossParts parts =
      loss_rec(batch, predictor, m->sched, stack.vae, stack.g_y, stack.phi, stack.align_head);
  double task = loss_task(batch, predictor, m->sched, m->classifier);
  double rec = parts.total(cfg.loss.lambda_p, cfg.loss.lambda_e);
  auto total = [&](double lt) { return rec + lt * task; };
  REQUIRE(total(0.0) == rec);
  REQUIRE(total(0.4) - total(0.0) == Catch::Approx(0.4 * task).margin(1e-9));
  REQUIRE(cfg.loss.lambda_task == 0.1);
}

TEST_CASE("path cost") {
  std::vector<Vec> constant(5, Vec::Constant(3, 1.5));
  REQUIRE(path_cost(constant) == 0.0);
  std::vector<Vec> path = {Vec::Constant(1, 0.0), Vec::Constant(1, 1.0),
                           Vec::Constant(1, 1.0)};
  REQUIRE(path_cost(path) == Catch::Approx(0.5));
  Rng rng(9);
  std::vector<Vec> random;
  for (int i = 0; i < 7; ++i) random.push_back(gaussian_vec(4, rng));
  double oracle = 0.0;
  for (int i = 0; i + 1 < 7; ++i) {
    double step = 0.0;
    for (int j = 0; j < 4; ++j) step += std::pow(random[size_t(i + 1)][j] - random[size_t(i)][j], 2);
    oracle += step;
  }
  oracle /= 6.0;
  REQUIRE(path_cost(random) == Catch::Approx(oracle).margin(1e-12));
  REQUIRE_THROWS_AS(path_cost({Vec::Ones(2)}), TooShort);
}

TEST_CASE("trajectory utility") {
  LossWeights w;  // lambda_s = 0.3, lambda_e = 0.1, lambda_path = 0.1
  TrajectoryRecord rec;
  rec.l_rec = 0.0;
  rec.c_sem = 0.0;
  rec.c_evi = 0.0;
  rec.c_path = 0.0;
  REQUIRE(trajectory_utility(rec, w) == 0.0);
  rec.l_rec = 1.0;
  rec.c_sem = 1.0;
  rec.c_evi = 1.0;
  rec.c_path = 1.0;
  REQUIRE(trajectory_utility(rec, w) == Catch::Approx(-1.5));
  LossWeights doubled = w;
  doubled.lambda_s = 2.0 * w.lambda_s;
  REQUIRE(trajectory_utility(rec, doubled) - trajectory_utility(rec, w) ==
          Catch::Approx(-w.lambda_s * 1.0));
  TrajectoryRecord incomplete;
  incomplete.l_rec = 1.0;
  REQUIRE_THROWS_AS(trajectory_utility(incomplete, w), IncompleteRecord);
}

TEST_CASE("test-mode trajectory re-ranking returns the utility argmax") {
  LossWeights w;
  Rng rng(23);
  std::vector<TrajectoryRecord> records;
  for (int i = 0; i < 8; ++i) {
    TrajectoryRecord r;
    r.l_rec = rng.uniform();
    r.c_sem = 2.0 * rng.uniform();
    r.c_evi = 2.0 * rng.uniform();
    r.c_path = rng.uniform();
    records.push_back(std::move(r));
  }
  int best = select_best_trajectory(records, w);
  for (const auto& r : records)
    REQUIRE(trajectory_utility(records[size_t(best)], w) >= trajectory_utility(r, w));
}

TEST_CASE("chain-rule enumeration oracle") {
  SECTION("independent uniform variables factorize exactly") {
    JointTable t = JointTable::uniform(4, 4, 4, 4);
    ChainRuleReport rep = verify_chain_rule(t);
    REQUIRE(rep.max_abs_error < 1e-12);
    REQUIRE(rep.excluded_cells == 0);
    REQUIRE(rep.checked_cells == 256);
  }
  SECTION("100 Dirichlet-random tables") {
    PropertyResult r = check_chain_rule(100, 11);
    INFO(r.detail);
    REQUIRE(r.pass);
  }
  SECTION("structural zeros are excluded and counted") {
    JointTable t = JointTable::uniform(2, 2, 2, 2);
    t.at(0, 0, 0, 0) = 0.0;
    ChainRuleReport rep = verify_chain_rule(t);
    REQUIRE(rep.excluded_cells == 1);
    REQUIRE(rep.checked_cells == 15);
    REQUIRE(rep.max_abs_error < 1e-12);
  }
}

TEST_CASE("plateau scheduler reproduces the configured decay") {
  PlateauScheduler sched(2e-3, 0.5, 10);
  REQUIRE(sched.lr() == 2e-3);
  sched.observe(1.0);  // sets the best
  for (int i = 0; i < 9; ++i) {
    REQUIRE_FALSE(sched.observe(1.0));
    REQUIRE(sched.lr() == 2e-3);
  }
  REQUIRE(sched.observe(1.0));  // 10th plateau epoch triggers
  REQUIRE(sched.lr() == 1e-3);
  // improvement resets the counter
  sched.observe(0.5);
  for (int i = 0; i < 9; ++i) sched.observe(0.5);
  REQUIRE(sched.lr() == 1e-3);
  sched.observe(0.5);
  REQUIRE(sched.lr() == 5e-4);
}

TEST_CASE("non-finite losses abort") {
  REQUIRE_THROWS_AS(check_finite_loss(std::numeric_limits<double>::quiet_NaN(), "x"),
                    NonFiniteLoss);
  REQUIRE_THROWS_AS(check_finite_loss(std::numeric_limits<double>::infinity(), "x"),
                    NonFiniteLoss);
  check_finite_loss(3.0, "x");
}

TEST_CASE("disabling the task loss leaves the reconstruction gradient unchanged") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  ModalityStack& stack = m->stacks.front();
  auto batch = make_batch(*m, 3, 29);

  auto grads_with = [&](double lambda_task) {
    m->store.zero_grads();
    ad::Tape tape;
    ad::Var total = -1;
    for (const auto& d : batch) {
      Vec z_t = forward_diffuse(d.z0, d.t, d.eps, m->sched);
      ad::Var ztv = tape.constant(z_t);
      ad::Var eps_hat = stack.denoiser.predict(
          tape, ztv, d.t, tape.constant(d.u_x), tape.constant(d.c_s),
          tape.constant(d.evidence), m->sched);
      ad::Var term = tape.sqdist(tape.constant(d.eps), eps_hat);
      if (lambda_task > 0) {
        ad::Var zhat = tweedie(tape, ztv, d.t, eps_hat, m->sched);
        ad::Var logits = m->classifier.forward(
            tape, tape.concat(tape.constant(d.u_x), zhat));
        term = tape.add(term, tape.scale(tape.ce_with_logits(logits, d.label), 0.0));
      }
      total = total < 0 ? term : tape.add(total, term);
    }
    tape.backward(total);
    std::vector<double> flat;
    for (ad::Param* p : stack.denoiser.params())
      for (int i = 0; i < p->rows(); ++i)
        for (int j = 0; j < p->cols(); ++j) flat.push_back(p->grad(i, j));
    return flat;
  };
  auto a = grads_with(0.0);
  auto b = grads_with(0.1);  // structure present, weight zeroed
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]).margin(1e-12));
}

TEST_CASE("training loop drives the loss down and logs the schedule", "[training]") {
  Config cfg = tiny();
  Trainer trainer(cfg);
  TrainOutput out = trainer.run();
  REQUIRE_FALSE(out.log.empty());
  // lr starts at the configured 2e-3 everywhere
  for (const auto& e : out.log) REQUIRE(e.at("lr").get<double>() <= 2e-3);
  REQUIRE(out.log.front().at("lr").get<double>() == 2e-3);
  // diffusion loss decreases from the first epoch to the last
  double first = -1, last = -1;
  for (const auto& e : out.log) {
    if (e.at("stage") == "diffusion.m0") {
      if (first < 0) first = e.at("train_loss").get<double>();
      last = e.at("train_loss").get<double>();
    }
  }
  REQUIRE(first > 0);
  REQUIRE(last < first);
}
