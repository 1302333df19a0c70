#pragma once

// Autoregressive plan policy, candidate generation, and regularized
// re-ranking. The policy is a small categorical model per slot type,
// conditioned on the observation embedding and a tagged context sum of the
// previously emitted tokens; it substitutes the foundation-model planner
// while keeping the re-ranking math intact.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "omg/ad.hpp"
#include "omg/encoders.hpp"
#include "omg/plan.hpp"

namespace omg {

struct PlannerPolicy {
  Schema schema;
  ad::Param* ctx_emb_entity = nullptr;
  ad::Param* ctx_emb_action = nullptr;
  ad::Param* ctx_emb_sentiment = nullptr;
  ad::Param* ctx_tags = nullptr;  // emb x 3L, fixed
  Mlp2 head_entity, head_action, head_sentiment;

  static PlannerPolicy create(ad::ParamStore& store, const DimsConfig& dims,
                              const Schema& schema, Rng& rng) {
    PlannerPolicy p;
    p.schema = schema;
    double std = 1.0 / std::sqrt(double(dims.emb));
    p.ctx_emb_entity = &store.add("planner.emb_entity", dims.emb, schema.entity_vocab, std, rng);
    p.ctx_emb_action = &store.add("planner.emb_action", dims.emb, schema.action_vocab, std, rng);
    p.ctx_emb_sentiment =
        &store.add("planner.emb_sentiment", dims.emb, schema.sentiment_vocab, std, rng);
    p.ctx_tags = &store.add("planner.ctx_tags", dims.emb, 3 * schema.triplets, 1.0, rng,
                            /*trainable=*/false);
    int in = dims.d + dims.emb + schema.triplets;  // u_X + context + position one-hot
    p.head_entity = Mlp2::create(store, "planner.head_entity", in, dims.hidden,
                                 schema.entity_vocab, false, rng);
    p.head_action = Mlp2::create(store, "planner.head_action", in, dims.hidden,
                                 schema.action_vocab, false, rng);
    p.head_sentiment = Mlp2::create(store, "planner.head_sentiment", in, dims.hidden,
                                    schema.sentiment_vocab, false, rng);
    return p;
  }

  const Mlp2& head(int slot) const {
    return slot == 0 ? head_entity : slot == 1 ? head_action : head_sentiment;
  }
  ad::Param& ctx_table(int slot) const {
    return slot == 0 ? *ctx_emb_entity : slot == 1 ? *ctx_emb_action : *ctx_emb_sentiment;
  }

  std::vector<ad::Param*> params() const {
    std::vector<ad::Param*> out = {ctx_emb_entity, ctx_emb_action, ctx_emb_sentiment};
    for (const Mlp2* h : {&head_entity, &head_action, &head_sentiment})
      for (ad::Param* q : h->params()) out.push_back(q);
    return out;
  }

  Vec context_sum(const SemanticPlan& prefix, int upto_flat) const {
    Vec ctx = Vec::Zero(ctx_emb_entity->rows());
    for (int f = 0; f < upto_flat; ++f) {
      int l = f / 3, slot = f % 3;
      ctx += ctx_tags->value.col(f).cwiseProduct(
          ctx_table(slot).value.col(prefix.token(l, slot)));
    }
    return ctx;
  }

  Vec logits(const Vec& u_x, const SemanticPlan& prefix, int flat_slot) const {
    int l = flat_slot / 3, slot = flat_slot % 3;
    Vec pos = Vec::Zero(schema.triplets);
    pos[l] = 1.0;
    Vec in(u_x.size() + ctx_emb_entity->rows() + schema.triplets);
    in << u_x, context_sum(prefix, flat_slot), pos;
    return head(slot).forward(in);
  }

  // n autoregressive samples; per-token log-probabilities of the policy
  // (temperature only shapes sampling, not the recorded scores).
  // temperature == 0 is the greedy/argmax limit.
  std::vector<SemanticPlan> generate(const Vec& u_x, int n, double temperature,
                                     uint64_t seed) const {
    std::vector<SemanticPlan> out;
    out.reserve(static_cast<size_t>(n));
    for (int c = 0; c < n; ++c) {
      Rng rng = Rng::stream(seed, 0x706c616e + static_cast<uint64_t>(c));
      SemanticPlan plan;
      plan.constraints.assign(static_cast<size_t>(schema.triplets), Triplet{});
      for (int f = 0; f < 3 * schema.triplets; ++f) {
        Vec z = logits(u_x, plan, f);
        Vec logp = z.array() - log_sum_exp(z);
        int tok;
        if (temperature <= 0.0) {
          Eigen::Index arg;
          z.maxCoeff(&arg);
          tok = static_cast<int>(arg);
        } else {
          Vec probs = softmax_stable(z / temperature);
          double u = rng.uniform(), acc = 0.0;
          tok = static_cast<int>(probs.size()) - 1;
          for (Eigen::Index i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) {
              tok = static_cast<int>(i);
              break;
            }
          }
        }
        int l = f / 3, slot = f % 3;
        auto& trip = plan.constraints[static_cast<size_t>(l)];
        (slot == 0 ? trip.entity : slot == 1 ? trip.action : trip.sentiment) = tok;
        plan.token_logprobs.push_back(logp[tok]);
      }
      out.push_back(std::move(plan));
    }
    return out;
  }

  // teacher-forced negative log-likelihood of a ground-truth plan
  ad::Var nll(ad::Tape& t, ad::Var u_x, const SemanticPlan& target) const {
    ad::Var total = -1;
    for (int f = 0; f < 3 * schema.triplets; ++f) {
      int l = f / 3, slot = f % 3;
      Vec pos = Vec::Zero(schema.triplets);
      pos[l] = 1.0;
      ad::Var ctx = -1;
      for (int g = 0; g < f; ++g) {
        int gl = g / 3, gslot = g % 3;
        ad::Var e = t.cmul(t.col(*ctx_tags, g),
                           t.col(ctx_table(gslot), target.token(gl, gslot)));
        ctx = ctx < 0 ? e : t.add(ctx, e);
      }
      if (ctx < 0) ctx = t.constant(Vec::Zero(ctx_emb_entity->rows()));
      ad::Var in = t.concat(t.concat(u_x, ctx), t.constant(pos));
      ad::Var z = head(slot).forward(t, in);
      ad::Var ce = t.ce_with_logits(z, target.token(l, slot));
      total = total < 0 ? ce : t.add(total, ce);
    }
    return total;
  }
};

// C_sem = 1 - cos(g(S), psi(X)); 0 when parallel, 2 when anti-parallel.
inline double semantic_cost(const SemanticPlan& plan, const Vec& u_x,
                            const PlanEncoder& g) {
  if (!schema_valid(plan, g.schema)) throw SchemaViolation("semantic_cost");
  return cosine_cost(g.encode(plan), u_x);
}

struct ScoredCandidate {
  double logprob_sum = 0.0;
  double c_sem = 0.0;
  bool valid = true;

  double score(double lambda_s) const { return logprob_sum - lambda_s * c_sem; }
};

// Argmax over schema-valid candidates; ties break toward the earlier index.
// Invalid candidates carry the infinite indicator penalty, realized as a
// hard filter, so they can never win.
inline int rerank_scored(const std::vector<ScoredCandidate>& cands, double lambda_s) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < cands.size(); ++i) {
    if (!cands[i].valid) continue;
    double s = cands[i].score(lambda_s);
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  if (best < 0) throw NoValidPlan("every candidate violates the schema");
  return best;
}

struct RerankResult {
  int index = -1;
  SemanticPlan plan;
  double c_sem = 0.0;
};

inline RerankResult rerank(const std::vector<SemanticPlan>& candidates, const Vec& u_x,
                           const PlanEncoder& g, double lambda_s) {
  if (candidates.empty()) throw NoValidPlan("empty candidate set");
  std::vector<ScoredCandidate> scored;
  scored.reserve(candidates.size());
  for (const auto& plan : candidates) {
    ScoredCandidate sc;
    sc.valid = schema_valid(plan, g.schema);
    sc.logprob_sum = plan.logprob_sum();
    if (sc.valid) sc.c_sem = semantic_cost(plan, u_x, g);
    scored.push_back(sc);
  }
  int idx = rerank_scored(scored, lambda_s);
  return {idx, candidates[static_cast<size_t>(idx)], scored[static_cast<size_t>(idx)].c_sem};
}

// Gaussian condition used by the no-planner ablation.
inline Vec noise_condition(int d_s, uint64_t seed) {
  Rng rng = Rng::stream(seed, 0x6e6f6973);
  return gaussian_vec(d_s, rng);
}

}  // namespace omg
