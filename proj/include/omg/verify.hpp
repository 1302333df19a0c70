#pragma once

// Executable property checks behind the `verify` CLI subcommand and the
// acceptance suite: algebraic identities, enumeration oracles, and
// finite-difference gradient probes. Oracles here are independent of the
// implementation paths they check (full sorts, scalar loops, central
// differences).

#include <algorithm>
#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "omg/metrics.hpp"
#include "omg/model.hpp"
#include "omg/objectives.hpp"
#include "omg/pipeline.hpp"

namespace omg {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace verify_detail {

template <typename F>
PropertyResult timed(const std::string& name, F&& body) {
  PropertyResult r;
  r.name = name;
  auto start = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline double central_difference(const std::function<double()>& f, ad::Param& p, int i,
                                 int j, double h) {
  double keep = p.value(i, j);
  p.value(i, j) = keep + h;
  double up = f();
  p.value(i, j) = keep - h;
  double down = f();
  p.value(i, j) = keep;
  return (up - down) / (2.0 * h);
}

inline double grad_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

inline Config tiny_config() {
  Config cfg;
  cfg.data.latent_dim = 4;
  cfg.data.modality_dims = {6, 4, 4};
  cfg.data.n_train = 8;
  cfg.data.n_val = 4;
  cfg.data.n_test = 4;
  return cfg;
}

}  // namespace verify_detail

// Criterion: tweedie(forward_diffuse(z0, t, eps), t, eps) == z0 in 32-bit
// arithmetic, max abs error < 1e-5 over random triples.
inline PropertyResult check_tweedie_identity(int n_triples = 1000, uint64_t seed = 7) {
  return verify_detail::timed("tweedie_identity_f32", [&](PropertyResult& r) {
    using VecF = Eigen::Matrix<float, Eigen::Dynamic, 1>;
    NoiseSchedule sched = NoiseSchedule::linear(100, 1e-4, 0.065);
    Rng rng(seed);
    float worst = 0.0f;
    for (int i = 0; i < n_triples; ++i) {
      int dim = 1 + rng.uniform_int(16);
      int t = 1 + rng.uniform_int(sched.steps);
      VecF z0(dim), eps(dim);
      for (int k = 0; k < dim; ++k) {
        z0[k] = float(2.0 * rng.normal());
        eps[k] = float(rng.normal());
      }
      auto abar = float(sched.alpha_bar[size_t(t)]);
      VecF z_t = forward_diffuse_at<float>(z0, eps, abar);
      VecF back = tweedie_at<float>(z_t, eps, abar);
      worst = std::max(worst, (back - z0).cwiseAbs().maxCoeff());
    }
    r.pass = worst < 1e-5f;
    r.detail = "max abs err " + std::to_string(worst) + " over " +
               std::to_string(n_triples) + " triples";
  });
}

// Criterion: the chain-rule decomposition holds to 1e-12 on random joint
// tables over 4-valued variables.
inline PropertyResult check_chain_rule(int n_tables = 100, uint64_t seed = 11) {
  return verify_detail::timed("chain_rule_decomposition", [&](PropertyResult& r) {
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < n_tables; ++i) {
      JointTable t = JointTable::dirichlet(4, 4, 4, 4, rng);
      worst = std::max(worst, verify_chain_rule(t).max_abs_error);
    }
    r.pass = worst < 1e-12;
    r.detail = "max abs err " + std::to_string(worst) + " over " +
               std::to_string(n_tables) + " tables";
  });
}

// Criterion: at initialization the denoiser output is bitwise invariant to
// the evidence vector.
inline PropertyResult check_zero_adapter(int n_perturbations = 100, uint64_t seed = 13) {
  return verify_detail::timed("zero_adapter_identity", [&](PropertyResult& r) {
    Config cfg = verify_detail::tiny_config();
    auto m = make_model(cfg);
    const auto& stack = m->stacks.front();
    Rng rng(seed);
    Vec z_t = gaussian_vec(cfg.dims.d_z, rng);
    Vec u = gaussian_vec(cfg.dims.d, rng);
    Vec c = gaussian_vec(cfg.dims.d_s, rng);
    Vec e0 = gaussian_vec(cfg.dims.d_z, rng);
    int t = 1 + rng.uniform_int(m->sched.steps);
    Vec base = stack.denoiser.predict(z_t, t, u, c, e0, m->sched);
    double worst = 0.0;
    for (int i = 0; i < n_perturbations; ++i) {
      Vec e = gaussian_vec(cfg.dims.d_z, rng) * (1.0 + 10.0 * rng.uniform());
      Vec out = stack.denoiser.predict(z_t, t, u, c, e, m->sched);
      worst = std::max(worst, (out - base).cwiseAbs().maxCoeff());
    }
    r.pass = worst == 0.0;
    r.detail = "max abs diff " + std::to_string(worst) + " over " +
               std::to_string(n_perturbations) + " perturbations";
  });
}

// Criterion: d L_task / d(denoiser parameters) through the one-step MMSE
// estimate matches central finite differences. Parameters are jittered
// first so the adapter branches are live.
inline PropertyResult check_tweedie_gradient_path(uint64_t seed = 17) {
  return verify_detail::timed("tweedie_gradient_path", [&](PropertyResult& r) {
    Config cfg = verify_detail::tiny_config();
    auto m = make_model(cfg);
    ModalityStack& stack = m->stacks.front();
    Rng rng(seed);
    for (ad::Param* p : stack.denoiser.params())
      for (int i = 0; i < p->rows(); ++i)
        for (int j = 0; j < p->cols(); ++j) p->value(i, j) += 0.05 * rng.normal();

    Vec z0 = gaussian_vec(cfg.dims.d_z, rng);
    Vec eps = gaussian_vec(cfg.dims.d_z, rng);
    Vec u = gaussian_vec(cfg.dims.d, rng);
    Vec c = gaussian_vec(cfg.dims.d_s, rng);
    Vec e = gaussian_vec(cfg.dims.d_z, rng);
    int t = 1 + rng.uniform_int(m->sched.steps);
    int label = rng.uniform_int(kNumClasses);
    Vec z_t = forward_diffuse(z0, t, eps, m->sched);

    auto raw_loss = [&]() {
      Vec eps_hat = stack.denoiser.predict(z_t, t, u, c, e, m->sched);
      Vec zhat = tweedie(z_t, t, eps_hat, m->sched);
      Vec logits = m->classifier.forward(fuse(u, zhat));
      return log_sum_exp(logits) - logits[label];
    };

    m->store.zero_grads();
    ad::Tape tape;
    ad::Var ztv = tape.constant(z_t);
    ad::Var eps_hat = stack.denoiser.predict(tape, ztv, t, tape.constant(u),
                                             tape.constant(c), tape.constant(e), m->sched);
    ad::Var zhat = tweedie(tape, ztv, t, eps_hat, m->sched);
    ad::Var logits = m->classifier.forward(tape, tape.concat(tape.constant(u), zhat));
    ad::Var loss = tape.ce_with_logits(logits, label);
    tape.backward(loss);

    auto params = stack.denoiser.params();
    double worst = 0.0;
    for (int probe = 0; probe < 10; ++probe) {
      ad::Param* p = params[size_t(rng.uniform_int(int(params.size())))];
      int i = rng.uniform_int(p->rows());
      int j = rng.uniform_int(p->cols());
      double analytic = p->grad(i, j);
      double numeric = verify_detail::central_difference(raw_loss, *p, i, j, 1e-5);
      worst = std::max(worst, verify_detail::grad_rel_err(analytic, numeric));
    }
    r.pass = worst < 1e-3;
    r.detail = "max rel err " + std::to_string(worst) + " over 10 coordinates";
  });
}

// Criterion: top-K equals a full-sort oracle (ties included), selected
// softmax weights sum to 1, and shifting all scores leaves them unchanged.
inline PropertyResult check_topk_oracle(int n_cases = 10000, uint64_t seed = 19) {
  return verify_detail::timed("topk_and_sparse_weights", [&](PropertyResult& r) {
    Rng rng(seed);
    double worst_alpha = 0.0, worst_shift = 0.0;
    for (int i = 0; i < n_cases; ++i) {
      int n = 1 + rng.uniform_int(50);
      int k = 1 + rng.uniform_int(n);
      Vec scores(n);
      bool gridded = rng.uniform() < 0.5;  // heavy ties half the time
      for (int j = 0; j < n; ++j)
        scores[j] = gridded ? double(rng.uniform_int(4)) : rng.normal();
      auto got = topk(scores, k);
      // oracle: full stable argsort by (score desc, index asc)
      std::vector<int> idx(static_cast<size_t>(n));
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
      });
      idx.resize(size_t(k));
      if (got != idx) {
        r.pass = false;
        r.detail = "topk mismatch at case " + std::to_string(i);
        return;
      }
      Mat values = Mat::Zero(n, 2);
      EvidenceBundle eb = aggregate(scores, got, values);
      worst_alpha = std::max(worst_alpha, std::abs(eb.alpha.sum() - 1.0));
      if (eb.alpha.minCoeff() <= 0.0) {
        r.pass = false;
        r.detail = "non-positive sparse weight at case " + std::to_string(i);
        return;
      }
      EvidenceBundle shifted = aggregate(Vec(scores.array() + 37.5), got, values);
      worst_shift =
          std::max(worst_shift, (shifted.alpha - eb.alpha).cwiseAbs().maxCoeff());
    }
    r.pass = worst_alpha < 1e-6 && worst_shift < 1e-9;
    r.detail = "sum|alpha|-1 max " + std::to_string(worst_alpha) + ", shift drift max " +
               std::to_string(worst_shift);
  });
}

// Scalar-loop reimplementations of the metrics; used as the oracle side.
inline void metrics_oracle(const std::vector<double>& preds,
                           const std::vector<double>& truths, Acc2Mode mode,
                           double& o_acc2, double& o_f1, double& o_acc7) {
  long tp = 0, fp = 0, tn = 0, fn = 0, considered = 0, hits7 = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    double rounded_p = std::llround(preds[i]);
    double rounded_t = std::llround(truths[i]);
    rounded_p = rounded_p < -3 ? -3 : rounded_p > 3 ? 3 : rounded_p;
    rounded_t = rounded_t < -3 ? -3 : rounded_t > 3 ? 3 : rounded_t;
    if (rounded_p == rounded_t) ++hits7;
    bool skip = mode == Acc2Mode::pos_vs_neg_excl_zero && truths[i] == 0.0;
    if (!skip) {
      ++considered;
      bool tpos = mode == Acc2Mode::pos_vs_neg_excl_zero ? truths[i] > 0 : truths[i] >= 0;
      bool ppos = mode == Acc2Mode::pos_vs_neg_excl_zero ? preds[i] > 0 : preds[i] >= 0;
      if (tpos && ppos) ++tp;
      else if (!tpos && ppos) ++fp;
      else if (tpos && !ppos) ++fn;
      else ++tn;
    }
  }
  o_acc7 = double(hits7) / double(preds.size());
  o_acc2 = considered ? double(tp + tn) / double(considered) : -1.0;
  long denom = 2 * tp + fp + fn;
  o_f1 = considered ? (denom ? 2.0 * double(tp) / double(denom) : 0.0) : -1.0;
}

inline PropertyResult check_metrics_oracle(int n_cases = 10000, uint64_t seed = 23) {
  return verify_detail::timed("metrics_scalar_oracle", [&](PropertyResult& r) {
    Rng rng(seed);
    for (int i = 0; i < n_cases; ++i) {
      int n = 1 + rng.uniform_int(40);
      std::vector<double> preds(static_cast<size_t>(n)), truths(static_cast<size_t>(n));
      bool any_nonzero = false;
      for (int j = 0; j < n; ++j) {
        preds[size_t(j)] = rng.uniform() < 0.3 ? double(rng.uniform_int(7) - 3)
                                               : 6.0 * rng.uniform() - 3.0;
        truths[size_t(j)] = rng.uniform() < 0.3 ? double(rng.uniform_int(7) - 3)
                                                : 6.0 * rng.uniform() - 3.0;
        if (truths[size_t(j)] != 0.0) any_nonzero = true;
      }
      Acc2Mode mode = rng.uniform() < 0.5 ? Acc2Mode::pos_vs_neg_excl_zero
                                          : Acc2Mode::nonneg_vs_neg;
      double o2, of, o7;
      metrics_oracle(preds, truths, mode, o2, of, o7);
      if (acc7(preds, truths) != o7) {
        r.pass = false;
        r.detail = "acc7 mismatch at case " + std::to_string(i);
        return;
      }
      if (mode == Acc2Mode::pos_vs_neg_excl_zero && !any_nonzero) {
        bool threw = false;
        try {
          acc2(preds, truths, mode);
        } catch (const AllExcluded&) {
          threw = true;
        }
        if (!threw) {
          r.pass = false;
          r.detail = "missing AllExcluded at case " + std::to_string(i);
          return;
        }
        continue;
      }
      if (acc2(preds, truths, mode) != o2 || f1(preds, truths, mode) != of) {
        r.pass = false;
        r.detail = "acc2/f1 mismatch at case " + std::to_string(i);
        return;
      }
    }
    r.pass = true;
    r.detail = std::to_string(n_cases) + " fuzzed arrays, exact agreement";
  });
}

// Encoder-module gradient contract: analytic vs central differences
// (step 1e-4) for a scalar probe loss on each trainable map.
inline PropertyResult check_encoder_gradients(uint64_t seed = 29) {
  return verify_detail::timed("encoder_gradient_checks", [&](PropertyResult& r) {
    Config cfg = verify_detail::tiny_config();
    auto m = make_model(cfg);
    ModalityStack& stack = m->stacks.front();
    Rng rng(seed);
    Dataset ds = generate_dataset(SyntheticConfig::from(cfg.data));
    const MultimodalSample& s = ds.samples[0];
    SemanticPlan plan = ground_truth_plan(s.latent, s.score, m->schema);
    Vec target_d = gaussian_vec(cfg.dims.d, rng);
    Vec target_s = gaussian_vec(cfg.dims.d_s, rng);
    Vec eta = gaussian_vec(cfg.dims.d_z, rng);
    const Vec& y = s.features[size_t(stack.modality)];

    struct Probe {
      std::string name;
      std::function<double()> raw;
      std::function<void()> taped;  // builds tape, backward
      std::vector<ad::Param*> params;
    };
    std::vector<Probe> probes;
    probes.push_back({"psi",
                      [&] { return (m->psi.encode(s) - target_d).squaredNorm(); },
                      [&] {
                        ad::Tape t;
                        ad::Var l = t.sqdist(m->psi.encode(t, s), t.constant(target_d));
                        t.backward(l);
                      },
                      m->psi.params()});
    probes.push_back({"g",
                      [&] { return (m->g.encode(plan) - target_s).squaredNorm(); },
                      [&] {
                        ad::Tape t;
                        ad::Var l = t.sqdist(m->g.encode(t, plan), t.constant(target_s));
                        t.backward(l);
                      },
                      m->g.params()});
    probes.push_back({"g_y",
                      [&] { return cosine_cost(stack.g_y.forward(y), target_s); },
                      [&] {
                        ad::Tape t;
                        ad::Var gy = stack.g_y.forward(t, t.constant(y));
                        ad::Var l = t.sub(t.constant(Vec::Ones(1)),
                                          t.cosine(gy, t.constant(target_s)));
                        t.backward(l);
                      },
                      stack.g_y.params()});
    probes.push_back({"vae",
                      [&] {
                        auto [mu, lv] = stack.vae.encode(y);
                        Vec z = Vae::reparam(mu, lv, eta);
                        return (stack.vae.decode(z) - y).squaredNorm();
                      },
                      [&] {
                        ad::Tape t;
                        ad::Var yv = t.constant(y);
                        auto [mu, lv] = stack.vae.encode(t, yv);
                        ad::Var z = Vae::reparam(t, mu, lv, eta);
                        ad::Var l = t.sqdist(stack.vae.decode(t, z), yv);
                        t.backward(l);
                      },
                      stack.vae.params()});
    probes.push_back({"align_head",
                      [&] {
                        return (stack.phi.forward(y) - stack.align_head.forward(eta))
                            .cwiseAbs()
                            .sum();
                      },
                      [&] {
                        ad::Tape t;
                        ad::Var l = t.l1dist(stack.phi.forward(t, t.constant(y)),
                                             stack.align_head.forward(t, t.constant(eta)));
                        t.backward(l);
                      },
                      stack.align_head.params()});
    probes.push_back({"classifier",
                      [&] {
                        Vec logits = m->classifier.forward(fuse(target_d, eta));
                        return log_sum_exp(logits) - logits[3];
                      },
                      [&] {
                        ad::Tape t;
                        ad::Var logits = m->classifier.forward(
                            t, t.concat(t.constant(target_d), t.constant(eta)));
                        t.backward(t.ce_with_logits(logits, 3));
                      },
                      m->classifier.params()});

    double worst = 0.0;
    std::string worst_name;
    for (auto& probe : probes) {
      m->store.zero_grads();
      probe.taped();
      for (int rep = 0; rep < 10; ++rep) {
        ad::Param* p = probe.params[size_t(rng.uniform_int(int(probe.params.size())))];
        int i = rng.uniform_int(p->rows());
        int j = rng.uniform_int(p->cols());
        double analytic = p->grad(i, j);
        double numeric = verify_detail::central_difference(probe.raw, *p, i, j, 1e-4);
        double err = verify_detail::grad_rel_err(analytic, numeric);
        if (err > worst) {
          worst = err;
          worst_name = probe.name;
        }
      }
    }
    r.pass = worst < 1e-3;
    r.detail = "max rel err " + std::to_string(worst) +
               (worst_name.empty() ? "" : " (" + worst_name + ")");
  });
}

inline std::vector<PropertyResult> run_all_properties() {
  return {check_tweedie_identity(), check_chain_rule(),  check_zero_adapter(),
          check_tweedie_gradient_path(), check_topk_oracle(), check_metrics_oracle(),
          check_encoder_gradients()};
}

}  // namespace omg
