#include <catch2/catch_amalgamated.hpp>

#include <map>

#include "omg/executor.hpp"
#include "omg/model.hpp"
#include "omg/verify.hpp"

using namespace omg;

namespace {
DimsConfig toy_dims() {
  DimsConfig d;
  d.d = 4;
  d.d_s = 4;
  d.d_z = 2;
  d.denoiser_hidden = 16;
  d.attn = 4;
  d.time_emb = 4;
  return d;
}
}  // namespace

TEST_CASE("linear schedule invariants") {
  NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.065);
  REQUIRE(s.alpha_bar[0] == 1.0);
  for (int t = 1; t <= s.steps; ++t) {
    REQUIRE(s.beta[size_t(t)] > 0.0);
    REQUIRE(s.beta[size_t(t)] < 1.0);
    REQUIRE(s.alpha_bar[size_t(t)] < s.alpha_bar[size_t(t) - 1]);
    REQUIRE(s.sigma[size_t(t)] >= 0.0);
  }
  REQUIRE(s.alpha_bar[size_t(s.steps)] < 0.05);
  REQUIRE(s.sigma[1] == 0.0);  // final reverse step is deterministic
}

TEST_CASE("forward diffusion formula") {
  NoiseSchedule s = NoiseSchedule::linear(50, 1e-4, 0.05);
  Rng rng(3);
  Vec z0 = gaussian_vec(4, rng);
  Vec eps = gaussian_vec(4, rng);
  // boundary convention alpha_bar = 1 reproduces z0
  REQUIRE(forward_diffuse_at<double>(z0, eps, 1.0) == z0);
  // direct substitution: z0 = 0, eps = e1, abar = 0.75 -> 0.5 e1
  Vec e1 = Vec::Zero(3);
  e1[0] = 1.0;
  Vec z = forward_diffuse_at<double>(Vec(Vec::Zero(3)), e1, 0.75);
  REQUIRE(z[0] == Catch::Approx(0.5));
  REQUIRE(z[1] == 0.0);
  REQUIRE_THROWS_AS(forward_diffuse(z0, 0, eps, s), BadStep);
  REQUIRE_THROWS_AS(forward_diffuse(z0, 51, eps, s), BadStep);
  REQUIRE_THROWS_AS(forward_diffuse(z0, 3, Vec::Zero(5), s), ShapeMismatch);

  // Monte Carlo moment check: var(z_t) ~ abar var(z0) + (1 - abar)
  int t = 30;
  double abar = s.alpha_bar[size_t(t)];
  double z0_var = 4.0;
  Rng mc(9);
  double mean = 0.0, m2 = 0.0;
  int n = 10000;
  for (int i = 0; i < n; ++i) {
    Vec z0i = Vec::Constant(1, 2.0 * mc.normal());
    Vec ei = Vec::Constant(1, mc.normal());
    double v = forward_diffuse(z0i, t, ei, s)[0];
    mean += v;
    m2 += v * v;
  }
  mean /= n;
  double var = m2 / n - mean * mean;
  double expected = abar * z0_var + (1.0 - abar);
  REQUIRE(var == Catch::Approx(expected).epsilon(0.05));
}

TEST_CASE("reverse step formula") {
  // degenerate beta = 0 step leaves the state unchanged
  NoiseSchedule degenerate;
  degenerate.steps = 1;
  degenerate.beta = {0.0, 0.0};
  degenerate.alpha = {1.0, 1.0};
  degenerate.alpha_bar = {1.0, 1.0};
  degenerate.sigma = {0.0, 0.0};
  Vec z = Vec::Constant(2, 1.7);
  Vec eps = Vec::Constant(2, 0.4);
  REQUIRE(reverse_step(z, 1, eps, degenerate, Vec::Zero(2)) == z);

  // hand values: alpha = 0.99, abar = 0.5, z = 1, eps = 0.2
  NoiseSchedule hand;
  hand.steps = 1;
  hand.beta = {0.0, 0.01};
  hand.alpha = {1.0, 0.99};
  hand.alpha_bar = {1.0, 0.5};
  hand.sigma = {0.0, 0.0};
  Vec z1 = Vec::Constant(1, 1.0);
  Vec e1 = Vec::Constant(1, 0.2);
  double expected = (1.0 - (0.01 / std::sqrt(0.5)) * 0.2) / std::sqrt(0.99);
  REQUIRE(reverse_step(z1, 1, e1, hand, Vec::Zero(1))[0] == Catch::Approx(expected));
  REQUIRE(expected == Catch::Approx(1.00218).margin(5e-5));
}

TEST_CASE("tweedie estimate") {
  NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.065);
  Rng rng(5);
  SECTION("inversion identity in float32") {
    PropertyResult r = check_tweedie_identity(1000, 7);
    INFO(r.detail);
    REQUIRE(r.pass);
  }
  SECTION("inversion identity in double, through the schedule API") {
    for (int rep = 0; rep < 200; ++rep) {
      Vec z0 = gaussian_vec(6, rng);
      Vec eps = gaussian_vec(6, rng);
      int t = 1 + rng.uniform_int(s.steps);
      Vec back = tweedie(forward_diffuse(z0, t, eps, s), t, eps, s);
      REQUIRE((back - z0).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SECTION("hand values and boundaries") {
    // abar = 0.64, z = 1, eps = 0.5 -> (1 - 0.6*0.5) / 0.8 = 0.875
    Vec z = Vec::Constant(1, 1.0);
    Vec eps = Vec::Constant(1, 0.5);
    REQUIRE(tweedie_at<double>(z, eps, 0.64)[0] == Catch::Approx(0.875));
    REQUIRE(tweedie_at<double>(z, eps, 1.0) == z);
    NoiseSchedule tiny;
    tiny.steps = 1;
    tiny.beta = {0.0, 0.5};
    tiny.alpha = {1.0, 0.5};
    tiny.alpha_bar = {1.0, 1e-9};
    tiny.sigma = {0.0, 0.0};
    REQUIRE_THROWS_AS(tweedie(z, 1, eps, tiny), DegenerateAlpha);
  }
}

TEST_CASE("denoiser: shapes, zero-adapter contract, conditioning separation") {
  DimsConfig dims = toy_dims();
  DiffusionConfig diff;
  diff.steps = 20;
  diff.blocks = 6;
  NoiseSchedule sched = NoiseSchedule::linear(diff.steps, 1e-4, 0.05);
  ad::ParamStore store;
  Rng rng(11);
  Denoiser den = Denoiser::create(store, "den", dims, diff, InjectionMode::dual, rng);

  Rng in(13);
  Vec z_t = gaussian_vec(dims.d_z, in);
  Vec u = gaussian_vec(dims.d, in);
  Vec c = gaussian_vec(dims.d_s, in);
  Vec e = gaussian_vec(dims.d_z, in);

  Vec out = den.predict(z_t, 5, u, c, e, sched);
  REQUIRE(out.size() == dims.d_z);

  SECTION("at init the output is exactly invariant to the evidence") {
    PropertyResult r = check_zero_adapter(100, 3);
    INFO(r.detail);
    REQUIRE(r.pass);
  }

  SECTION("taped and raw predictions agree") {
    ad::Tape t;
    ad::Var v = den.predict(t, t.constant(z_t), 5, t.constant(u), t.constant(c),
                            t.constant(e), sched);
    REQUIRE((t.val(v) - out).cwiseAbs().maxCoeff() < 1e-13);
  }

  SECTION("plan condition reaches the output once, evidence after a step") {
    // jitter the zero-initialized adapter output layers: a trained network
    Rng j(17);
    for (auto& blk : den.blocks)
      if (blk.adapter) {
        for (int i = 0; i < blk.adapter->w2->rows(); ++i)
          for (int k = 0; k < blk.adapter->w2->cols(); ++k)
            blk.adapter->w2->value(i, k) = 0.1 * j.normal();
      }
    Vec c2 = c + gaussian_vec(dims.d_s, j);
    Vec e2 = e + gaussian_vec(dims.d_z, j);

    std::vector<BlockActivations> base_tr, c_tr, e_tr;
    den.predict(z_t, 5, u, c, e, sched, &base_tr);
    den.predict(z_t, 5, u, c2, e, sched, &c_tr);
    den.predict(z_t, 5, u, c, e2, sched, &e_tr);

    bool attn_moved = false;
    for (size_t b = 0; b < base_tr.size(); ++b) {
      bool is_attn = den.blocks[b].injection == BlockInjection::cross_attn;
      double inj_diff =
          (c_tr[b].injection_out - base_tr[b].injection_out).cwiseAbs().maxCoeff();
      if (is_attn && inj_diff > 0) attn_moved = true;
      if (!is_attn) REQUIRE(inj_diff == 0.0);  // adapters never react to c_S
    }
    REQUIRE(attn_moved);

    bool adapter_moved = false;
    for (size_t b = 0; b < base_tr.size(); ++b) {
      bool is_attn = den.blocks[b].injection == BlockInjection::cross_attn;
      double inj_diff =
          (e_tr[b].injection_out - base_tr[b].injection_out).cwiseAbs().maxCoeff();
      if (!is_attn && inj_diff > 0) adapter_moved = true;
      if (is_attn) REQUIRE(inj_diff == 0.0);  // cross-attention never reacts to E
    }
    REQUIRE(adapter_moved);
  }
}

TEST_CASE("injection modes wire the expected block sets") {
  DimsConfig dims = toy_dims();
  DiffusionConfig diff;
  diff.blocks = 6;
  ad::ParamStore store;
  Rng rng(7);
  auto kinds = [&](InjectionMode mode) {
    Denoiser d = Denoiser::create(store, "d" + std::to_string(int(mode)), dims, diff,
                                  mode, rng);
    std::vector<BlockInjection> v;
    for (const auto& b : d.blocks) v.push_back(b.injection);
    return v;
  };
  using BI = BlockInjection;
  REQUIRE(kinds(InjectionMode::dual) ==
          std::vector<BI>{BI::adapter_e, BI::adapter_e, BI::adapter_e, BI::cross_attn,
                          BI::cross_attn, BI::cross_attn});
  REQUIRE(kinds(InjectionMode::reversed) ==
          std::vector<BI>{BI::cross_attn, BI::cross_attn, BI::cross_attn, BI::adapter_e,
                          BI::adapter_e, BI::adapter_e});
  REQUIRE(kinds(InjectionMode::single_stream) ==
          std::vector<BI>{BI::adapter_e, BI::adapter_e, BI::adapter_e, BI::none,
                          BI::none, BI::none});
  REQUIRE(kinds(InjectionMode::concat) ==
          std::vector<BI>(6, BI::adapter_concat));
}

TEST_CASE("sampling: determinism, trajectory length, two-mode recovery", "[training]") {
  DimsConfig dims = toy_dims();
  dims.d_z = 1;
  dims.denoiser_hidden = 24;
  DiffusionConfig diff;
  diff.steps = 50;
  diff.blocks = 4;
  NoiseSchedule sched = NoiseSchedule::linear(diff.steps, 1e-4, 0.15);
  ad::ParamStore store;
  Rng rng(21);
  Denoiser den = Denoiser::create(store, "den", dims, diff, InjectionMode::dual, rng);
  Vae vae = Vae::create(store, "vae", 1, 8, 1, rng);
  // monotone 1-d decoder; the histogram below reads z0 directly anyway
  vae.dec.w1->value.setZero();
  vae.dec.w2->value.setZero();
  vae.dec.w1->value(0, 0) = 1.0;
  vae.dec.w2->value(0, 0) = 1.0 / std::tanh(1.0);

  Vec u = Vec::Zero(dims.d);
  Vec c = Vec::Zero(dims.d_s);
  Vec e = Vec::Zero(dims.d_z);

  SECTION("same seed, same output; T+1 states") {
    SampleResult a = sample(den, sched, vae, u, c, e, 99);
    SampleResult b = sample(den, sched, vae, u, c, e, 99);
    REQUIRE(a.trajectory.states.size() == size_t(diff.steps + 1));
    REQUIRE(a.trajectory.eps_hats.size() == size_t(diff.steps));
    REQUIRE(a.trajectory.tweedies.size() == size_t(diff.steps));
    REQUIRE(a.y_hat == b.y_hat);
    REQUIRE(a.trajectory.z0() == b.trajectory.z0());
    SampleResult c2 = sample(den, sched, vae, u, c, e, 100);
    REQUIRE(a.y_hat != c2.y_hat);
  }

  SECTION("trained on a two-mode latent, samples match the data histogram") {
    ad::Adam opt(2e-3);
    opt.attach(den.params());
    Rng tr(31);
    auto draw_z0 = [&](Rng& r) {
      return Vec::Constant(1, (r.uniform() < 0.5 ? -2.0 : 2.0) + 0.1 * r.normal());
    };
    for (int step = 0; step < 2500; ++step) {
      ad::Tape tape;
      ad::Var total = -1;
      for (int b = 0; b < 32; ++b) {
        Vec z0 = draw_z0(tr);
        int t = 1 + tr.uniform_int(diff.steps);
        Vec eps = Vec::Constant(1, tr.normal());
        Vec z_t = forward_diffuse(z0, t, eps, sched);
        ad::Var eps_hat = den.predict(tape, tape.constant(z_t), t, tape.constant(u),
                                      tape.constant(c), tape.constant(e), sched);
        ad::Var term = tape.sqdist(tape.constant(eps), eps_hat);
        total = total < 0 ? term : tape.add(total, term);
      }
      total = tape.scale(total, 1.0 / 32.0);
      tape.backward(total);
      opt.step();
    }
    // histogram comparison over [-4, 4]
    const int bins = 12;
    auto bin_of = [&](double v) {
      int b = int((v + 4.0) / 8.0 * bins);
      return std::clamp(b, 0, bins - 1);
    };
    std::vector<double> data_hist(bins, 0.0), model_hist(bins, 0.0);
    Rng dr(41);
    const int n = 800;
    for (int i = 0; i < n; ++i) data_hist[size_t(bin_of(draw_z0(dr)[0]))] += 1.0 / n;
    for (int i = 0; i < n; ++i) {
      SampleResult sr = sample(den, sched, vae, u, c, e, 5000 + uint64_t(i));
      model_hist[size_t(bin_of(sr.trajectory.z0()[0]))] += 1.0 / n;
    }
    double tv = 0.0;
    for (int b = 0; b < bins; ++b) tv += std::abs(data_hist[size_t(b)] - model_hist[size_t(b)]);
    tv /= 2.0;
    INFO("total variation " << tv);
    REQUIRE(tv < 0.15);
  }
}

TEST_CASE("conditioning becomes live after a training step") {
  DimsConfig dims = toy_dims();
  DiffusionConfig diff;
  diff.steps = 10;
  diff.blocks = 4;
  NoiseSchedule sched = NoiseSchedule::linear(diff.steps, 1e-4, 0.05);
  ad::ParamStore store;
  Rng rng(3);
  Denoiser den = Denoiser::create(store, "den", dims, diff, InjectionMode::dual, rng);
  Rng in(5);
  Vec z_t = gaussian_vec(dims.d_z, in);
  Vec u = gaussian_vec(dims.d, in);
  Vec c = gaussian_vec(dims.d_s, in);
  Vec e = gaussian_vec(dims.d_z, in);

  // perturbing c_S already moves the output (cross-attention is live at init)
  Vec c2 = c + gaussian_vec(dims.d_s, in);
  REQUIRE((den.predict(z_t, 3, u, c2, e, sched) - den.predict(z_t, 3, u, c, e, sched))
              .cwiseAbs()
              .maxCoeff() > 0.0);

  // one optimizer step on an E-sensitive loss wakes the adapters up
  ad::Adam opt(0.05);
  opt.attach(den.params());
  ad::Tape tape;
  ad::Var eps_hat = den.predict(tape, tape.constant(z_t), 3, tape.constant(u),
                                tape.constant(c), tape.constant(e), sched);
  tape.backward(tape.sqdist(eps_hat, tape.constant(Vec::Ones(dims.d_z))));
  opt.step();
  Vec e2 = e + gaussian_vec(dims.d_z, in);
  REQUIRE((den.predict(z_t, 3, u, c, e2, sched) - den.predict(z_t, 3, u, c, e, sched))
              .cwiseAbs()
              .maxCoeff() > 0.0);
}
