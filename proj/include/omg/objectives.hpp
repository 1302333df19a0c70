#pragma once

// Loss terms, the trajectory utility and its record, the enumeration oracle
// for the chain-rule decomposition, and the plateau learning-rate schedule.

#include <cmath>
#include <optional>
#include <vector>

#include "omg/ad.hpp"
#include "omg/encoders.hpp"
#include "omg/executor.hpp"
#include "omg/mathutil.hpp"

namespace omg {

// L_plan = 1 - cos(g_y(Y_hat), c_S)
inline double loss_plan(const Vec& y_hat, const Vec& c_s, const Mlp2& g_y) {
  return cosine_cost(g_y.forward(y_hat), c_s);
}

// L_evi = |phi(Y_hat) - A(E)|_1
inline double loss_evi(const Vec& y_hat, const Vec& evidence, const Mlp2& phi,
                       const Mlp2& align_head) {
  if (phi.out_dim() != align_head.out_dim()) throw ShapeMismatch("phi/A output dims");
  return (phi.forward(y_hat) - align_head.forward(evidence)).cwiseAbs().sum();
}

struct LossWeights {
  double lambda_p = 0.1;
  double lambda_e = 0.1;
  double lambda_task = 0.1;
  double lambda_s = 0.3;
  double lambda_path = 0.1;
  double gamma = 0.1;
};

// One diffusion training draw: the caller samples t and eps so tests can
// pin them.
struct RecDraw {
  Vec z0;
  int t = 1;
  Vec eps;
  Vec u_x, c_s, evidence;
  int label = 0;
};

struct RecLossParts {
  double mse = 0.0;
  double plan = 0.0;
  double evi = 0.0;
  double total(double lambda_p, double lambda_e) const {
    return mse + lambda_p * plan + lambda_e * evi;
  }
};

// L_rec over a batch with an arbitrary noise predictor; the consistency
// terms are evaluated on the decode of the Tweedie estimate at the same
// sampled t as the noise MSE.
template <typename PredictFn>
RecLossParts loss_rec(const std::vector<RecDraw>& batch, const PredictFn& predict,
                      const NoiseSchedule& sched, const Vae& vae, const Mlp2& g_y,
                      const Mlp2& phi, const Mlp2& align_head) {
  if (batch.empty()) throw EmptyInput("loss_rec over empty batch");
  RecLossParts parts;
  for (const auto& d : batch) {
    Vec z_t = forward_diffuse(d.z0, d.t, d.eps, sched);
    Vec eps_hat = predict(z_t, d.t, d.u_x, d.c_s, d.evidence);
    parts.mse += (d.eps - eps_hat).squaredNorm();
    Vec y_hat = vae.decode(tweedie(z_t, d.t, eps_hat, sched));
    parts.plan += loss_plan(y_hat, d.c_s, g_y);
    parts.evi += loss_evi(y_hat, d.evidence, phi, align_head);
  }
  double n = double(batch.size());
  parts.mse /= n;
  parts.plan /= n;
  parts.evi /= n;
  return parts;
}

// L_task: cross-entropy of the classifier on Fusion(u_X, zhat_{0|t}).
template <typename PredictFn>
double loss_task(const std::vector<RecDraw>& batch, const PredictFn& predict,
                 const NoiseSchedule& sched, const Mlp2& classifier,
                 TaskInput task_input = TaskInput::tweedie) {
  if (batch.empty()) throw EmptyInput("loss_task over empty batch");
  double total = 0.0;
  for (const auto& d : batch) {
    Vec z_t = forward_diffuse(d.z0, d.t, d.eps, sched);
    Vec eps_hat = predict(z_t, d.t, d.u_x, d.c_s, d.evidence);
    Vec z_for_cls = task_input == TaskInput::tweedie
                        ? tweedie(z_t, d.t, eps_hat, sched)
                        : z_t;
    Vec logits = classifier.forward(fuse(d.u_x, z_for_cls));
    total += log_sum_exp(logits) - logits[d.label];
  }
  return total / double(batch.size());
}

// Mean squared norm of consecutive Tweedie-estimate differences.
inline double path_cost(const std::vector<Vec>& tweedies) {
  if (tweedies.size() < 2) throw TooShort("path_cost needs >= 2 checkpoints");
  double total = 0.0;
  for (size_t i = 0; i + 1 < tweedies.size(); ++i)
    total += (tweedies[i + 1] - tweedies[i]).squaredNorm();
  return total / double(tweedies.size() - 1);
}

// Everything needed to evaluate the utility of one full
// plan -> retrieve -> execute trajectory without recomputation.
struct TrajectoryRecord {
  SemanticPlan plan;
  std::optional<double> c_sem;
  std::vector<int> retrieved;  // N_K
  Vec alpha;
  Vec evidence;
  std::optional<double> c_evi;
  DiffusionTrajectory trajectory;
  Vec y_hat;
  std::optional<double> l_rec;   // fidelity term (needs ground truth)
  std::optional<double> c_path;
  int target_modality = 0;
};

// U = -L_rec - lambda_s C_sem - lambda_e C_evi - lambda_path C_path
inline double trajectory_utility(const TrajectoryRecord& rec, const LossWeights& w) {
  if (!rec.l_rec || !rec.c_sem || !rec.c_evi || !rec.c_path)
    throw IncompleteRecord("trajectory record is missing logged terms");
  return -*rec.l_rec - w.lambda_s * *rec.c_sem - w.lambda_e * *rec.c_evi -
         w.lambda_path * *rec.c_path;
}

// Test-mode re-ranking of whole trajectories by utility; ties toward the
// earlier index.
inline int select_best_trajectory(const std::vector<TrajectoryRecord>& records,
                                  const LossWeights& w) {
  if (records.empty()) throw EmptyInput("select_best_trajectory");
  int best = 0;
  double best_u = trajectory_utility(records[0], w);
  for (size_t i = 1; i < records.size(); ++i) {
    double u = trajectory_utility(records[i], w);
    if (u > best_u) {
      best_u = u;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// ---- enumeration oracle for the chain-rule decomposition ----
// log p(Y,S,E|X) = log p(Y|S,E,X) + log p(E|S,X) + log p(S|X), checked cell
// by cell on a fully enumerated joint table over (X, S, E, Y).

struct JointTable {
  int nx = 2, ns = 2, ne = 2, ny = 2;
  std::vector<double> p;  // x-major: ((x*ns + s)*ne + e)*ny + y

  double& at(int x, int s, int e, int y) {
    return p[size_t(((x * ns + s) * ne + e) * ny + y)];
  }
  double at(int x, int s, int e, int y) const {
    return p[size_t(((x * ns + s) * ne + e) * ny + y)];
  }

  static JointTable uniform(int nx, int ns, int ne, int ny) {
    JointTable t{nx, ns, ne, ny, {}};
    t.p.assign(size_t(nx * ns * ne * ny), 1.0 / double(nx * ns * ne * ny));
    return t;
  }
  static JointTable dirichlet(int nx, int ns, int ne, int ny, Rng& rng) {
    JointTable t{nx, ns, ne, ny, {}};
    t.p.resize(size_t(nx * ns * ne * ny));
    double total = 0.0;
    for (auto& v : t.p) {
      v = -std::log(1.0 - rng.uniform());  // Exp(1); normalized = Dirichlet(1..1)
      total += v;
    }
    for (auto& v : t.p) v /= total;
    return t;
  }
};

struct ChainRuleReport {
  double max_abs_error = 0.0;
  int excluded_cells = 0;
  int checked_cells = 0;
};

inline ChainRuleReport verify_chain_rule(const JointTable& t) {
  ChainRuleReport rep;
  for (int x = 0; x < t.nx; ++x) {
    double px = 0.0;
    for (int s = 0; s < t.ns; ++s)
      for (int e = 0; e < t.ne; ++e)
        for (int y = 0; y < t.ny; ++y) px += t.at(x, s, e, y);
    for (int s = 0; s < t.ns; ++s) {
      double psx = 0.0;
      for (int e = 0; e < t.ne; ++e)
        for (int y = 0; y < t.ny; ++y) psx += t.at(x, s, e, y);
      for (int e = 0; e < t.ne; ++e) {
        double psex = 0.0;
        for (int y = 0; y < t.ny; ++y) psex += t.at(x, s, e, y);
        for (int y = 0; y < t.ny; ++y) {
          double pall = t.at(x, s, e, y);
          if (pall <= 0.0 || px <= 0.0 || psx <= 0.0 || psex <= 0.0) {
            ++rep.excluded_cells;
            continue;
          }
          double lhs = std::log(pall / px);
          double rhs = std::log(pall / psex) + std::log(psex / psx) + std::log(psx / px);
          rep.max_abs_error = std::max(rep.max_abs_error, std::abs(lhs - rhs));
          ++rep.checked_cells;
        }
      }
    }
  }
  return rep;
}

// Adam LR schedule: halve after `patience` consecutive epochs without
// validation improvement.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience)
      : lr_(lr), factor_(factor), patience_(patience) {}

  // Returns true when this observation triggered a decay.
  bool observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      since_ = 0;
      return false;
    }
    if (++since_ >= patience_) {
      lr_ *= factor_;
      since_ = 0;
      return true;
    }
    return false;
  }

  double lr() const { return lr_; }

 private:
  double lr_, factor_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int since_ = 0;
};

inline void check_finite_loss(double v, const char* where) {
  if (!std::isfinite(v))
    throw NonFiniteLoss(std::string(where) + " produced " + std::to_string(v));
}

}  // namespace omg
