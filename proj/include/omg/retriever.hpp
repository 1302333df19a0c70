#pragma once

// Non-parametric knowledge base and plan-driven retrieval: composite query
// projection, temperature-scaled cosine scoring, exact top-K with index
// tie-break, sparse softmax aggregation, and the evidence-plan alignment
// cost.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "omg/ad.hpp"
#include "omg/checkpoint.hpp"
#include "omg/encoders.hpp"
#include "omg/plan.hpp"
#include "omg/syndata.hpp"

namespace omg {

// Immutable after build; rows align across the three arrays.
struct KnowledgeBase {
  Mat keys;       // N x d, unit rows
  Mat values;     // N x d_z, target-modality VAE latent means
  Mat semantics;  // N x d_s, plan-space embeddings of the entries
  int target_modality = 0;
  uint64_t source_checksum = 0;

  int size() const { return static_cast<int>(keys.rows()); }
};

// Entries come only from fully observed samples; pass the raw (pre-mask)
// training set to stand in for the external knowledge base.
inline KnowledgeBase build_kb(const Dataset& source, const ObsEncoder& psi,
                              const PlanEncoder& g, const Vae& vae,
                              int target_modality) {
  std::vector<int> rows;
  for (size_t i = 0; i < source.samples.size(); ++i)
    if (source.samples[i].observed_count() == source.n_modalities())
      rows.push_back(static_cast<int>(i));
  if (rows.empty()) throw EmptyKB("no fully observed samples");

  KnowledgeBase kb;
  kb.target_modality = target_modality;
  kb.source_checksum = dataset_checksum(source);
  kb.keys = Mat(static_cast<Eigen::Index>(rows.size()), psi.out_dim());
  kb.values = Mat(static_cast<Eigen::Index>(rows.size()), vae.latent_dim());
  kb.semantics = Mat(static_cast<Eigen::Index>(rows.size()), g.out_dim());
  for (size_t r = 0; r < rows.size(); ++r) {
    const MultimodalSample& s = source.samples[static_cast<size_t>(rows[r])];
    Vec key = psi.encode(s);
    double n = key.norm();
    if (n < 1e-12) throw ZeroVector("degenerate key while building the KB");
    kb.keys.row(static_cast<Eigen::Index>(r)) = key / n;
    kb.values.row(static_cast<Eigen::Index>(r)) =
        vae.encode(s.features[static_cast<size_t>(target_modality)]).first;
    kb.semantics.row(static_cast<Eigen::Index>(r)) =
        g.encode(ground_truth_plan(s.latent, s.score, g.schema));
  }
  return kb;
}

struct QueryProjector {
  ad::Param* w = nullptr;  // d x (d + d_s)
  ad::Param* b = nullptr;

  static QueryProjector create(ad::ParamStore& store, const std::string& prefix,
                               int d, int d_s, Rng& rng) {
    QueryProjector q;
    q.w = &store.add(prefix + ".w", d, d + d_s, 1.0 / std::sqrt(double(d + d_s)), rng);
    q.b = &store.zeros(prefix + ".b", d, 1);
    return q;
  }

  std::vector<ad::Param*> params() const { return {w, b}; }

  // q = tanh(W [u_X (+) c_S] + b)
  Vec project(const Vec& u_x, const Vec& c_s) const {
    if (u_x.size() + c_s.size() != w->cols()) throw ShapeMismatch("project_query");
    Vec in(u_x.size() + c_s.size());
    in << u_x, c_s;
    return (w->value * in + b->value.col(0)).array().tanh().matrix();
  }

  ad::Var project(ad::Tape& t, ad::Var u_x, ad::Var c_s) const {
    return t.tanh_(t.affine(*w, *b, t.concat(u_x, c_s)));
  }
};

// s_i = cos(q, k_i) / kappa. Keys are unit rows; the query is normalized
// here (config switch normalize_query).
inline Vec score_entries(const Vec& q, const KnowledgeBase& kb, double kappa,
                         bool normalize_query = true) {
  if (kappa <= 0) throw ConfigError("kappa must be positive");
  if (q.size() != kb.keys.cols()) throw ShapeMismatch("score_entries query dim");
  Vec qn = q;
  if (normalize_query) {
    double n = q.norm();
    if (n < 1e-12) throw ZeroQuery("zero-norm query");
    qn /= n;
  }
  return kb.keys * qn / kappa;
}

// Indices of the K largest scores, descending, ties toward the lower index.
inline std::vector<int> topk(const Vec& scores, int k) {
  int n = static_cast<int>(scores.size());
  if (k < 1 || k > n) throw KTooLarge("k=" + std::to_string(k) + " with n=" + std::to_string(n));
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

struct EvidenceBundle {
  std::vector<int> indices;  // N_K, descending score
  Vec alpha;                 // sparse weights over the selection
  Vec evidence;              // E
};

// Softmax over the selected subset only, stabilized by max subtraction;
// E is the alpha-weighted sum of selected values.
inline EvidenceBundle aggregate(const Vec& scores, const std::vector<int>& selected,
                                const Mat& values) {
  if (selected.empty()) throw EmptyInput("aggregate with empty selection");
  Vec s(static_cast<Eigen::Index>(selected.size()));
  for (size_t i = 0; i < selected.size(); ++i)
    s[static_cast<Eigen::Index>(i)] = scores[selected[i]];
  EvidenceBundle out;
  out.indices = selected;
  out.alpha = softmax_stable(s);
  out.evidence = Vec::Zero(values.cols());
  for (size_t i = 0; i < selected.size(); ++i)
    out.evidence += out.alpha[static_cast<Eigen::Index>(i)] * values.row(selected[i]).transpose();
  return out;
}

// C_evi = sum_i alpha_i (1 - cos(c_S, u_i)) over the selected entries.
inline double evidence_cost(const Vec& c_s, const Vec& alpha, const Mat& semantics_selected) {
  if (alpha.size() != semantics_selected.rows()) throw ShapeMismatch("evidence_cost");
  double cost = 0.0;
  for (Eigen::Index i = 0; i < alpha.size(); ++i)
    cost += alpha[i] * cosine_cost(c_s, semantics_selected.row(i).transpose());
  return cost;
}

inline Mat select_rows(const Mat& m, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

inline void save_kb(const KnowledgeBase& kb, const std::string& dir, double kappa, int k) {
  std::filesystem::create_directories(dir);
  Checkpoint ckpt;
  ckpt["kb.keys"] = Tensor::from_mat(kb.keys);
  ckpt["kb.values"] = Tensor::from_mat(kb.values);
  ckpt["kb.semantics"] = Tensor::from_mat(kb.semantics);
  save_checkpoint(ckpt, dir + "/kb.ckpt");
  Json meta;
  meta["n"] = kb.size();
  meta["d"] = kb.keys.cols();
  meta["d_z"] = kb.values.cols();
  meta["d_s"] = kb.semantics.cols();
  meta["kappa"] = kappa;
  meta["k"] = k;
  meta["target_modality"] = kb.target_modality;
  meta["source_dataset_checksum"] = kb.source_checksum;
  std::ofstream os(dir + "/kb.meta.json");
  os << meta.dump(2) << "\n";
}

inline KnowledgeBase load_kb(const std::string& dir) {
  Checkpoint ckpt = load_checkpoint(dir + "/kb.ckpt");
  std::ifstream is(dir + "/kb.meta.json");
  if (!is) throw RuntimeFailure("cannot open " + dir + "/kb.meta.json");
  Json meta;
  is >> meta;
  KnowledgeBase kb;
  kb.keys = ckpt.at("kb.keys").to_mat();
  kb.values = ckpt.at("kb.values").to_mat();
  kb.semantics = ckpt.at("kb.semantics").to_mat();
  kb.target_modality = meta.at("target_modality").get<int>();
  kb.source_checksum = meta.at("source_dataset_checksum").get<uint64_t>();
  if (kb.size() != meta.at("n").get<int>())
    throw CorruptCheckpoint("kb meta row count mismatch");
  return kb;
}

}  // namespace omg
