#pragma once

// Conditional latent diffusion: noise schedule, forward corruption, the
// dual-conditioned noise predictor (cross-attention for the plan condition
// in deep blocks, zero-adapters for the evidence in shallow blocks, with the
// observation embedding concatenated to every block input), reverse
// sampling, and the one-step MMSE estimate.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "omg/ad.hpp"
#include "omg/config.hpp"
#include "omg/encoders.hpp"

namespace omg {

struct NoiseSchedule {
  int steps = 0;                 // T
  std::vector<double> beta;      // index 1..T; [0] unused
  std::vector<double> alpha;     // 1 - beta
  std::vector<double> alpha_bar; // cumulative product; [0] = 1 by convention
  std::vector<double> sigma;     // posterior std; sigma[1] = 0

  static NoiseSchedule linear(int steps, double beta_min, double beta_max) {
    if (steps < 1 || beta_min <= 0 || beta_max >= 1 || beta_min > beta_max)
      throw ConfigError("bad schedule parameters");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.assign(static_cast<size_t>(steps) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(steps) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(steps) + 1, 1.0);
    s.sigma.assign(static_cast<size_t>(steps) + 1, 0.0);
    for (int t = 1; t <= steps; ++t) {
      double frac = steps == 1 ? 0.0 : double(t - 1) / double(steps - 1);
      s.beta[size_t(t)] = beta_min + frac * (beta_max - beta_min);
      s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
      s.alpha_bar[size_t(t)] = s.alpha_bar[size_t(t) - 1] * s.alpha[size_t(t)];
    }
    for (int t = 2; t <= steps; ++t) {
      double var = s.beta[size_t(t)] * (1.0 - s.alpha_bar[size_t(t) - 1]) /
                   (1.0 - s.alpha_bar[size_t(t)]);
      s.sigma[size_t(t)] = std::sqrt(var);
    }
    return s;
  }

  void check_step(int t) const {
    if (t < 1 || t > steps) throw BadStep("t=" + std::to_string(t));
  }
};

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps. Templated on the scalar so
// the identity checks can run in genuine 32-bit arithmetic.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> forward_diffuse_at(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& z0,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& eps, Scalar alpha_bar_t) {
  using std::sqrt;
  return sqrt(alpha_bar_t) * z0 + sqrt(Scalar(1) - alpha_bar_t) * eps;
}

inline Vec forward_diffuse(const Vec& z0, int t, const Vec& eps,
                           const NoiseSchedule& sched) {
  sched.check_step(t);
  if (z0.size() != eps.size()) throw ShapeMismatch("forward_diffuse");
  return forward_diffuse_at<double>(z0, eps, sched.alpha_bar[size_t(t)]);
}

// zhat_{0|t} = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tweedie_at(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& z_t,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& eps_hat, Scalar alpha_bar_t) {
  using std::sqrt;
  return (z_t - sqrt(Scalar(1) - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t);
}

inline Vec tweedie(const Vec& z_t, int t, const Vec& eps_hat, const NoiseSchedule& sched) {
  sched.check_step(t);
  double abar = sched.alpha_bar[size_t(t)];
  if (abar <= 1e-8) throw DegenerateAlpha("alpha_bar at t=" + std::to_string(t));
  return tweedie_at<double>(z_t, eps_hat, abar);
}

inline ad::Var tweedie(ad::Tape& tape, ad::Var z_t, int t, ad::Var eps_hat,
                       const NoiseSchedule& sched) {
  sched.check_step(t);
  double abar = sched.alpha_bar[size_t(t)];
  if (abar <= 1e-8) throw DegenerateAlpha("alpha_bar at t=" + std::to_string(t));
  return tape.scale(tape.sub(z_t, tape.scale(eps_hat, std::sqrt(1.0 - abar))),
                    1.0 / std::sqrt(abar));
}

// z_{t-1} = (z_t - ((1 - a_t)/sqrt(1 - abar_t)) eps_hat) / sqrt(a_t) + sigma_t xi
inline Vec reverse_step(const Vec& z_t, int t, const Vec& eps_hat,
                        const NoiseSchedule& sched, const Vec& xi) {
  sched.check_step(t);
  double a = sched.alpha[size_t(t)];
  double abar = sched.alpha_bar[size_t(t)];
  // beta = 0 degenerate step: no noise was added, the state passes through
  double coef = a == 1.0 ? 0.0 : (1.0 - a) / std::sqrt(1.0 - abar);
  Vec mean = (z_t - coef * eps_hat) / std::sqrt(a);
  return mean + sched.sigma[size_t(t)] * xi;
}

// Sinusoidal time embedding on t/T.
inline Vec time_embedding(int t, int steps, int dim) {
  Vec e(dim);
  double x = double(t) / double(steps);
  for (int i = 0; i < dim / 2; ++i) {
    double freq = std::pow(100.0, double(i) / std::max(1, dim / 2 - 1));
    e[2 * i] = std::sin(freq * x);
    e[2 * i + 1] = std::cos(freq * x);
  }
  if (dim % 2) e[dim - 1] = x;
  return e;
}

// Additive conditioning branch whose output layer starts at exactly zero,
// so the denoiser is independent of its input until training moves it.
struct ZeroAdapter {
  ad::Param* w1 = nullptr;
  ad::Param* b1 = nullptr;
  ad::Param* w2 = nullptr;  // zero-initialized
  ad::Param* b2 = nullptr;  // zero-initialized

  static ZeroAdapter create(ad::ParamStore& store, const std::string& prefix, int in,
                            int hidden, int out, Rng& rng) {
    ZeroAdapter a;
    a.w1 = &store.add(prefix + ".w1", hidden, in, 1.0 / std::sqrt(double(in)), rng);
    a.b1 = &store.zeros(prefix + ".b1", hidden, 1);
    a.w2 = &store.zeros(prefix + ".w2", out, hidden);
    a.b2 = &store.zeros(prefix + ".b2", out, 1);
    return a;
  }

  std::vector<ad::Param*> params() const { return {w1, b1, w2, b2}; }

  Vec forward(const Vec& in) const {
    Vec h = (w1->value * in + b1->value.col(0)).array().tanh().matrix();
    return w2->value * h + b2->value.col(0);
  }
  ad::Var forward(ad::Tape& t, ad::Var in) const {
    return t.affine(*w2, *b2, t.tanh_(t.affine(*w1, *b1, in)));
  }
};

// Single-head scaled dot-product attention with the block state as query and
// the condition as a one-token key/value sequence.
struct CrossAttention {
  ad::Param* wq = nullptr;
  ad::Param* wk = nullptr;
  ad::Param* wv = nullptr;
  ad::Param* wo = nullptr;

  static CrossAttention create(ad::ParamStore& store, const std::string& prefix,
                               int state_dim, int cond_dim, int attn_dim, Rng& rng) {
    CrossAttention c;
    c.wq = &store.add(prefix + ".wq", attn_dim, state_dim, 1.0 / std::sqrt(double(state_dim)), rng);
    c.wk = &store.add(prefix + ".wk", attn_dim, cond_dim, 1.0 / std::sqrt(double(cond_dim)), rng);
    c.wv = &store.add(prefix + ".wv", attn_dim, cond_dim, 1.0 / std::sqrt(double(cond_dim)), rng);
    c.wo = &store.add(prefix + ".wo", state_dim, attn_dim, 1.0 / std::sqrt(double(attn_dim)), rng);
    return c;
  }

  std::vector<ad::Param*> params() const { return {wq, wk, wv, wo}; }

  Vec forward(const Vec& h, const Vec& cond) const {
    Vec q = wq->value * h;
    Vec k = wk->value * cond;
    Vec v = wv->value * cond;
    Vec logit(1);
    logit[0] = q.dot(k) / std::sqrt(double(q.size()));
    Vec att = softmax_stable(logit);  // single token: att = [1]
    return wo->value * (att[0] * v);
  }

  ad::Var forward(ad::Tape& t, ad::Var h, ad::Var cond) const {
    ad::Var q = t.matvec(*wq, h);
    ad::Var k = t.matvec(*wk, cond);
    ad::Var v = t.matvec(*wv, cond);
    ad::Var logit = t.scale(t.dot(q, k), 1.0 / std::sqrt(double(wq->rows())));
    ad::Var att = t.softmax(t.pack({logit}));
    return t.matvec(*wo, t.smul(t.at(att, 0), v));
  }
};

enum class BlockInjection { none, adapter_e, adapter_concat, cross_attn };

struct DenoiserBlock {
  Mlp2 trunk;  // [h (+) u_X (+) temb] -> hidden -> d_z, residual
  BlockInjection injection = BlockInjection::none;
  std::optional<ZeroAdapter> adapter;
  std::optional<CrossAttention> attn;
};

struct BlockActivations {
  Vec trunk_out;
  Vec injection_out;
};

// Residual denoiser over the VAE latent. The first half of the blocks is the
// shallow set, the second half the deep set; which condition lands where is
// the injection mode (the App-style ablations rewire exactly this).
struct Denoiser {
  InjectionMode mode = InjectionMode::dual;
  int d_z = 0, time_dim = 0, steps_hint = 0;
  std::vector<DenoiserBlock> blocks;
  ad::Param* w_out = nullptr;
  ad::Param* b_out = nullptr;

  static Denoiser create(ad::ParamStore& store, const std::string& prefix,
                         const DimsConfig& dims, const DiffusionConfig& diff,
                         InjectionMode mode, Rng& rng) {
    Denoiser d;
    d.mode = mode;
    d.d_z = dims.d_z;
    d.time_dim = dims.time_emb;
    d.steps_hint = diff.steps;
    int in = dims.d_z + dims.d + dims.time_emb;
    for (int l = 0; l < diff.blocks; ++l) {
      DenoiserBlock blk;
      std::string bp = prefix + ".block" + std::to_string(l);
      blk.trunk = Mlp2::create(store, bp + ".trunk", in, dims.denoiser_hidden, dims.d_z,
                               /*tanh_out=*/false, rng);
      bool shallow = l < diff.blocks / 2;
      switch (mode) {
        case InjectionMode::dual:
          blk.injection = shallow ? BlockInjection::adapter_e : BlockInjection::cross_attn;
          break;
        case InjectionMode::reversed:
          blk.injection = shallow ? BlockInjection::cross_attn : BlockInjection::adapter_e;
          break;
        case InjectionMode::single_stream:
          blk.injection = shallow ? BlockInjection::adapter_e : BlockInjection::none;
          break;
        case InjectionMode::concat:
          blk.injection = BlockInjection::adapter_concat;
          break;
      }
      if (blk.injection == BlockInjection::adapter_e)
        blk.adapter = ZeroAdapter::create(store, bp + ".adapter", dims.d_z + dims.d_z,
                                          dims.denoiser_hidden, dims.d_z, rng);
      else if (blk.injection == BlockInjection::adapter_concat)
        blk.adapter = ZeroAdapter::create(store, bp + ".adapter",
                                          dims.d_z + dims.d_s + dims.d_z,
                                          dims.denoiser_hidden, dims.d_z, rng);
      else if (blk.injection == BlockInjection::cross_attn)
        blk.attn = CrossAttention::create(store, bp + ".attn", dims.d_z, dims.d_s,
                                          dims.attn, rng);
      d.blocks.push_back(std::move(blk));
    }
    d.w_out = &store.add(prefix + ".out.w", dims.d_z, dims.d_z,
                         1.0 / std::sqrt(double(dims.d_z)), rng);
    d.b_out = &store.zeros(prefix + ".out.b", dims.d_z, 1);
    return d;
  }

  std::vector<ad::Param*> params() const {
    std::vector<ad::Param*> out;
    for (const auto& blk : blocks) {
      for (ad::Param* p : blk.trunk.params()) out.push_back(p);
      if (blk.adapter)
        for (ad::Param* p : blk.adapter->params()) out.push_back(p);
      if (blk.attn)
        for (ad::Param* p : blk.attn->params()) out.push_back(p);
    }
    out.push_back(w_out);
    out.push_back(b_out);
    return out;
  }

  Vec predict(const Vec& z_t, int t, const Vec& u_x, const Vec& c_s, const Vec& e,
              const NoiseSchedule& sched,
              std::vector<BlockActivations>* trace = nullptr) const {
    if (z_t.size() != d_z) throw ShapeMismatch("predict_noise z_t");
    sched.check_step(t);
    Vec temb = time_embedding(t, sched.steps, time_dim);
    Vec h = z_t;
    for (const auto& blk : blocks) {
      Vec in(h.size() + u_x.size() + temb.size());
      in << h, u_x, temb;
      Vec trunk_out = blk.trunk.forward(in);
      h += trunk_out;
      Vec inj = Vec::Zero(d_z);
      switch (blk.injection) {
        case BlockInjection::adapter_e: {
          Vec ain(h.size() + e.size());
          ain << h, e;
          inj = blk.adapter->forward(ain);
          break;
        }
        case BlockInjection::adapter_concat: {
          Vec ain(h.size() + c_s.size() + e.size());
          ain << h, c_s, e;
          inj = blk.adapter->forward(ain);
          break;
        }
        case BlockInjection::cross_attn:
          inj = blk.attn->forward(h, c_s);
          break;
        case BlockInjection::none:
          break;
      }
      h += inj;
      if (trace) trace->push_back({trunk_out, inj});
    }
    return w_out->value * h + b_out->value.col(0);
  }

  ad::Var predict(ad::Tape& tape, ad::Var z_t, int t, ad::Var u_x, ad::Var c_s,
                  ad::Var e, const NoiseSchedule& sched) const {
    sched.check_step(t);
    ad::Var temb = tape.constant(time_embedding(t, sched.steps, time_dim));
    ad::Var h = z_t;
    for (const auto& blk : blocks) {
      ad::Var in = tape.concat(tape.concat(h, u_x), temb);
      h = tape.add(h, blk.trunk.forward(tape, in));
      switch (blk.injection) {
        case BlockInjection::adapter_e:
          h = tape.add(h, blk.adapter->forward(tape, tape.concat(h, e)));
          break;
        case BlockInjection::adapter_concat:
          h = tape.add(h, blk.adapter->forward(
                              tape, tape.concat(tape.concat(h, c_s), e)));
          break;
        case BlockInjection::cross_attn:
          h = tape.add(h, blk.attn->forward(tape, h, c_s));
          break;
        case BlockInjection::none:
          break;
      }
    }
    return tape.affine(*w_out, *b_out, h);
  }
};

struct DiffusionTrajectory {
  std::vector<Vec> states;     // z_T .. z_0, length T+1
  std::vector<Vec> eps_hats;   // per step, length T
  std::vector<Vec> tweedies;   // zhat_{0|t} per step, length T
  Vec z0() const { return states.back(); }
};

struct SampleResult {
  DiffusionTrajectory trajectory;
  Vec y_hat;
};

// Full reverse pass from seeded Gaussian z_T; decodes the final latent.
inline SampleResult sample(const Denoiser& den, const NoiseSchedule& sched,
                           const Vae& vae, const Vec& u_x, const Vec& c_s,
                           const Vec& e, uint64_t seed, bool deterministic = false) {
  Rng rng = Rng::stream(seed, 0x73616d70);
  DiffusionTrajectory traj;
  Vec z = gaussian_vec(den.d_z, rng);
  traj.states.push_back(z);
  for (int t = sched.steps; t >= 1; --t) {
    Vec eps_hat = den.predict(z, t, u_x, c_s, e, sched);
    traj.eps_hats.push_back(eps_hat);
    traj.tweedies.push_back(tweedie(z, t, eps_hat, sched));
    Vec xi = deterministic || t == 1 ? Vec::Zero(den.d_z) : gaussian_vec(den.d_z, rng);
    z = reverse_step(z, t, eps_hat, sched, xi);
    traj.states.push_back(z);
  }
  return {std::move(traj), vae.decode(z)};
}

}  // namespace omg
