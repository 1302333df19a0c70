#pragma once

// The inference workflow for one masked sample: plan generation and
// re-ranking, plan-driven retrieval, retrieval-injected diffusion, and the
// fused downstream prediction. Variant knobs rewire exactly one step each.

#include <optional>
#include <vector>

#include "omg/model.hpp"
#include "omg/objectives.hpp"

namespace omg {

struct Conditioning {
  std::optional<SemanticPlan> plan;  // absent for the noise-condition ablation
  double c_sem = 0.0;
  Vec c_s;         // executor condition
  Vec query_cond;  // c_S slot of the retrieval query (variant-dependent)
  bool fallback_zero_plan = false;
};

// Plan the sample: candidates + re-ranking (or the variant's replacement).
inline Conditioning plan_sample(const ModelBundle& m, const Vec& u_x, uint64_t seed) {
  const auto& vc = m.cfg.variant;
  Conditioning out;
  int d_s = m.cfg.dims.d_s;
  if (vc.planner_mode == PlannerMode::wo_planner) {
    out.c_s = noise_condition(d_s, Rng::mix(seed ^ 0x77706c61));
  } else {
    auto cands = m.planner.generate(u_x, m.cfg.planner.n_candidates,
                                    m.cfg.planner.temperature, seed);
    if (vc.planner_mode == PlannerMode::wo_rerank) {
      out.plan = cands.front();
      out.c_sem = semantic_cost(*out.plan, u_x, m.g);
      out.c_s = m.g.encode(*out.plan);
    } else {
      try {
        RerankResult rr = rerank(cands, u_x, m.g, m.cfg.planner.lambda_s);
        out.plan = rr.plan;
        out.c_sem = rr.c_sem;
        out.c_s = m.g.encode(rr.plan);
      } catch (const NoValidPlan&) {
        // neutral fallback, distinct from the Gaussian-noise ablation
        out.c_s = Vec::Zero(d_s);
        out.fallback_zero_plan = true;
      }
    }
  }
  switch (vc.query_mode) {
    case QueryMode::plan_driven: out.query_cond = out.c_s; break;
    case QueryMode::content_only: out.query_cond = Vec::Zero(d_s); break;
    case QueryMode::random_plan:
      out.query_cond = noise_condition(d_s, Rng::mix(seed ^ 0x72706c61));
      break;
  }
  return out;
}

struct RetrievalOut {
  std::vector<int> indices;
  Vec alpha;
  Vec evidence;
  double c_evi = 0.0;
};

inline RetrievalOut retrieve(const ModelBundle& m, const ModalityStack& stack,
                             const Vec& u_x, const Conditioning& cond) {
  RetrievalOut out;
  if (m.cfg.variant.retrieval_mode == RetrievalMode::disabled) {
    out.evidence = Vec::Zero(m.cfg.dims.d_z);
    out.alpha = Vec::Zero(0);
    return out;
  }
  const KnowledgeBase& kb = stack.kb;
  if (kb.size() == 0) throw EmptyKB("stack has no knowledge base");
  int k = m.cfg.retriever.k;
  if (k > kb.size()) throw KTooLarge("retriever.k exceeds KB size");
  Vec q = stack.projector.project(u_x, cond.query_cond);
  Vec scores;
  try {
    scores = score_entries(q, kb, m.cfg.retriever.kappa, m.cfg.retriever.normalize_query);
  } catch (const ZeroQuery&) {
    scores = Vec::Zero(kb.size());  // uniform retrieval fallback
  }
  out.indices = topk(scores, k);
  if (m.cfg.variant.retrieval_mode == RetrievalMode::mean_pool) {
    out.alpha = Vec::Constant(k, 1.0 / double(k));
    out.evidence = Vec::Zero(kb.values.cols());
    for (size_t i = 0; i < out.indices.size(); ++i)
      out.evidence += out.alpha[static_cast<Eigen::Index>(i)] *
                      kb.values.row(out.indices[i]).transpose();
  } else {
    EvidenceBundle eb = aggregate(scores, out.indices, kb.values);
    out.alpha = eb.alpha;
    out.evidence = eb.evidence;
  }
  out.c_evi = evidence_cost(cond.c_s, out.alpha, select_rows(kb.semantics, out.indices));
  return out;
}

// Execute the trajectory for one missing modality and assemble its record.
// ground_truth, when provided, fills the fidelity term of the utility.
inline TrajectoryRecord execute(const ModelBundle& m, const ModalityStack& stack,
                                const Vec& u_x, const Conditioning& cond,
                                const RetrievalOut& ret, uint64_t seed,
                                const Vec* ground_truth = nullptr) {
  SampleResult sr = sample(stack.denoiser, m.sched, stack.vae, u_x, cond.c_s,
                           ret.evidence, seed);
  TrajectoryRecord rec;
  if (cond.plan) rec.plan = *cond.plan;
  rec.c_sem = cond.c_sem;
  rec.retrieved = ret.indices;
  rec.alpha = ret.alpha;
  rec.evidence = ret.evidence;
  rec.c_evi = ret.c_evi;
  rec.c_path = path_cost(sr.trajectory.tweedies);
  rec.y_hat = sr.y_hat;
  rec.target_modality = stack.modality;
  if (ground_truth)
    rec.l_rec = (sr.y_hat - *ground_truth).squaredNorm() / double(ground_truth->size());
  rec.trajectory = std::move(sr.trajectory);
  return rec;
}

struct SampleReconstruction {
  Vec u_x;
  Conditioning cond;
  std::vector<TrajectoryRecord> records;  // one per reconstructed modality
  double pred_score = 0.0;
  int pred_class = 0;
};

// Full workflow: encode, plan, then retrieve + execute per missing target
// modality; the prediction fuses u_X with the primary target's latent
// (encoded when observed, generated when missing).
inline SampleReconstruction reconstruct_sample(const ModelBundle& m,
                                               const MultimodalSample& masked,
                                               uint64_t seed,
                                               const MultimodalSample* raw = nullptr) {
  SampleReconstruction out;
  out.u_x = m.psi.encode(masked);
  out.cond = plan_sample(m, out.u_x, Rng::mix(seed ^ 0x706c6e));

  for (const auto& stack : m.stacks) {
    if (masked.mask[static_cast<size_t>(stack.modality)]) continue;
    RetrievalOut ret = retrieve(m, stack, out.u_x, out.cond);
    const Vec* truth =
        raw ? &raw->features[static_cast<size_t>(stack.modality)] : nullptr;
    out.records.push_back(execute(m, stack, out.u_x, out.cond, ret,
                                  Rng::mix(seed ^ (0xe0 + uint64_t(stack.modality))),
                                  truth));
  }

  int primary = m.primary_target();
  const ModalityStack& pstack = m.stack_for(primary);
  Vec z_cls;
  if (masked.mask[static_cast<size_t>(primary)]) {
    z_cls = pstack.vae.encode(masked.features[static_cast<size_t>(primary)]).first;
  } else {
    const TrajectoryRecord* prec = nullptr;
    for (const auto& r : out.records)
      if (r.target_modality == primary) prec = &r;
    z_cls = prec->trajectory.z0();
  }
  Vec logits = m.classifier.forward(fuse(out.u_x, z_cls));
  Eigen::Index arg;
  logits.maxCoeff(&arg);
  out.pred_class = static_cast<int>(arg);
  out.pred_score = class7_to_score(out.pred_class);
  return out;
}

}  // namespace omg
