#pragma once

// The small learned feature maps shared across stages: observation encoder,
// plan-space encoder and its target-side head, per-modality VAEs, the
// low-level feature extractor / evidence alignment pair, fusion, and the
// downstream classifier. Every map exposes a raw (Eigen) forward and a taped
// forward; the two must agree exactly (property-tested).

#include <string>
#include <utility>
#include <vector>

#include "omg/ad.hpp"
#include "omg/config.hpp"
#include "omg/plan.hpp"
#include "omg/syndata.hpp"

namespace omg {

struct Mlp2 {
  ad::Param* w1 = nullptr;
  ad::Param* b1 = nullptr;
  ad::Param* w2 = nullptr;
  ad::Param* b2 = nullptr;
  bool tanh_out = false;

  static Mlp2 create(ad::ParamStore& store, const std::string& prefix, int in,
                     int hidden, int out, bool tanh_out, Rng& rng,
                     bool trainable = true) {
    Mlp2 m;
    m.w1 = &store.add(prefix + ".w1", hidden, in, 1.0 / std::sqrt(double(in)), rng, trainable);
    m.b1 = &store.zeros(prefix + ".b1", hidden, 1, trainable);
    m.w2 = &store.add(prefix + ".w2", out, hidden, 1.0 / std::sqrt(double(hidden)), rng, trainable);
    m.b2 = &store.zeros(prefix + ".b2", out, 1, trainable);
    m.tanh_out = tanh_out;
    return m;
  }

  int in_dim() const { return w1->cols(); }
  int out_dim() const { return w2->rows(); }
  std::vector<ad::Param*> params() const { return {w1, b1, w2, b2}; }

  Vec forward(const Vec& x) const {
    if (x.size() != w1->cols()) throw ShapeMismatch("mlp input: " + w1->name);
    Vec h = (w1->value * x + b1->value.col(0)).array().tanh().matrix();
    Vec y = w2->value * h + b2->value.col(0);
    return tanh_out ? Vec(y.array().tanh().matrix()) : y;
  }

  ad::Var forward(ad::Tape& t, ad::Var x) const {
    ad::Var h = t.tanh_(t.affine(*w1, *b1, x));
    ad::Var y = t.affine(*w2, *b2, h);
    return tanh_out ? t.tanh_(y) : y;
  }
};

// psi: masked multimodal features -> R^d. Per-modality sub-encoder, then
// mask-weighted mean pooling (masked slots contribute nothing), then a
// projection layer.
struct ObsEncoder {
  std::vector<ad::Param*> w_mod, b_mod;
  ad::Param* w_out = nullptr;
  ad::Param* b_out = nullptr;

  static ObsEncoder create(ad::ParamStore& store, const DimsConfig& dims,
                           const std::vector<int>& modality_dims, Rng& rng) {
    ObsEncoder e;
    for (size_t m = 0; m < modality_dims.size(); ++m) {
      int dm = modality_dims[m];
      e.w_mod.push_back(&store.add("psi.mod" + std::to_string(m) + ".w",
                                   dims.hidden, dm, 1.0 / std::sqrt(double(dm)), rng));
      e.b_mod.push_back(&store.zeros("psi.mod" + std::to_string(m) + ".b", dims.hidden, 1));
    }
    e.w_out = &store.add("psi.out.w", dims.d, dims.hidden,
                         1.0 / std::sqrt(double(dims.hidden)), rng);
    e.b_out = &store.zeros("psi.out.b", dims.d, 1);
    return e;
  }

  int out_dim() const { return w_out->rows(); }

  std::vector<ad::Param*> params() const {
    std::vector<ad::Param*> out;
    for (size_t m = 0; m < w_mod.size(); ++m) {
      out.push_back(w_mod[m]);
      out.push_back(b_mod[m]);
    }
    out.push_back(w_out);
    out.push_back(b_out);
    return out;
  }

  Vec encode(const MultimodalSample& s) const {
    int observed = s.observed_count();
    if (observed == 0) throw AllMissing("encode_obs needs one observed modality");
    Vec pooled = Vec::Zero(w_out->cols());
    for (size_t m = 0; m < s.mask.size(); ++m) {
      if (!s.mask[m]) continue;
      pooled += (w_mod[m]->value * s.features[m] + b_mod[m]->value.col(0))
                    .array()
                    .tanh()
                    .matrix();
    }
    pooled /= double(observed);
    return (w_out->value * pooled + b_out->value.col(0)).array().tanh().matrix();
  }

  ad::Var encode(ad::Tape& t, const MultimodalSample& s) const {
    int observed = s.observed_count();
    if (observed == 0) throw AllMissing("encode_obs needs one observed modality");
    ad::Var pooled = -1;
    for (size_t m = 0; m < s.mask.size(); ++m) {
      if (!s.mask[m]) continue;
      ad::Var e = t.tanh_(t.affine(*w_mod[m], *b_mod[m], t.constant(s.features[m])));
      pooled = pooled < 0 ? e : t.add(pooled, e);
    }
    pooled = t.scale(pooled, 1.0 / double(observed));
    return t.tanh_(t.affine(*w_out, *b_out, pooled));
  }
};

// g: plan -> R^{d_s}. Position-tagged embedding sum (so triplet order
// matters) followed by a projection MLP.
struct PlanEncoder {
  Schema schema;
  ad::Param* emb_entity = nullptr;
  ad::Param* emb_action = nullptr;
  ad::Param* emb_sentiment = nullptr;
  ad::Param* tags = nullptr;  // emb x (3L), fixed
  Mlp2 proj;

  static PlanEncoder create(ad::ParamStore& store, const DimsConfig& dims,
                            const Schema& schema, Rng& rng) {
    PlanEncoder g;
    g.schema = schema;
    double std = 1.0 / std::sqrt(double(dims.emb));
    g.emb_entity = &store.add("g.emb_entity", dims.emb, schema.entity_vocab, std, rng);
    g.emb_action = &store.add("g.emb_action", dims.emb, schema.action_vocab, std, rng);
    g.emb_sentiment = &store.add("g.emb_sentiment", dims.emb, schema.sentiment_vocab, std, rng);
    g.tags = &store.add("g.tags", dims.emb, 3 * schema.triplets, 1.0, rng,
                        /*trainable=*/false);
    g.proj = Mlp2::create(store, "g.proj", dims.emb, dims.hidden, dims.d_s,
                          /*tanh_out=*/true, rng);
    return g;
  }

  int out_dim() const { return proj.out_dim(); }

  std::vector<ad::Param*> params() const {
    std::vector<ad::Param*> out = {emb_entity, emb_action, emb_sentiment};
    for (ad::Param* p : proj.params()) out.push_back(p);
    return out;
  }

  ad::Param& table(int slot) const {
    return slot == 0 ? *emb_entity : slot == 1 ? *emb_action : *emb_sentiment;
  }

  Vec encode(const SemanticPlan& plan) const {
    if (!schema_valid(plan, schema)) throw SchemaViolation("encode_plan_tokens");
    Vec x = Vec::Zero(emb_entity->rows());
    for (int l = 0; l < schema.triplets; ++l)
      for (int slot = 0; slot < 3; ++slot)
        x += tags->value.col(3 * l + slot)
                 .cwiseProduct(table(slot).value.col(plan.token(l, slot)));
    return proj.forward(x);
  }

  ad::Var encode(ad::Tape& t, const SemanticPlan& plan) const {
    if (!schema_valid(plan, schema)) throw SchemaViolation("encode_plan_tokens");
    ad::Var x = -1;
    for (int l = 0; l < schema.triplets; ++l)
      for (int slot = 0; slot < 3; ++slot) {
        ad::Var e = t.cmul(t.col(*tags, 3 * l + slot),
                           t.col(table(slot), plan.token(l, slot)));
        x = x < 0 ? e : t.add(x, e);
      }
    return proj.forward(t, x);
  }
};

struct Vae {
  ad::Param* w_enc = nullptr;
  ad::Param* b_enc = nullptr;
  ad::Param* w_mu = nullptr;
  ad::Param* b_mu = nullptr;
  ad::Param* w_lv = nullptr;
  ad::Param* b_lv = nullptr;
  Mlp2 dec;

  static constexpr double kLogvarClamp = 10.0;

  static Vae create(ad::ParamStore& store, const std::string& prefix, int target_dim,
                    int hidden, int d_z, Rng& rng) {
    Vae v;
    v.w_enc = &store.add(prefix + ".enc.w", hidden, target_dim,
                         1.0 / std::sqrt(double(target_dim)), rng);
    v.b_enc = &store.zeros(prefix + ".enc.b", hidden, 1);
    double std = 1.0 / std::sqrt(double(hidden));
    v.w_mu = &store.add(prefix + ".mu.w", d_z, hidden, std, rng);
    v.b_mu = &store.zeros(prefix + ".mu.b", d_z, 1);
    v.w_lv = &store.add(prefix + ".lv.w", d_z, hidden, std, rng);
    v.b_lv = &store.zeros(prefix + ".lv.b", d_z, 1);
    v.dec = Mlp2::create(store, prefix + ".dec", d_z, hidden, target_dim,
                         /*tanh_out=*/false, rng);
    return v;
  }

  int target_dim() const { return w_enc->cols(); }
  int latent_dim() const { return w_mu->rows(); }

  std::vector<ad::Param*> params() const {
    std::vector<ad::Param*> out = {w_enc, b_enc, w_mu, b_mu, w_lv, b_lv};
    for (ad::Param* p : dec.params()) out.push_back(p);
    return out;
  }

  std::pair<Vec, Vec> encode(const Vec& y) const {
    if (y.size() != w_enc->cols()) throw ShapeMismatch("vae_encode input");
    Vec h = (w_enc->value * y + b_enc->value.col(0)).array().tanh().matrix();
    Vec mean = w_mu->value * h + b_mu->value.col(0);
    Vec logvar = (w_lv->value * h + b_lv->value.col(0))
                     .cwiseMax(-kLogvarClamp)
                     .cwiseMin(kLogvarClamp);
    return {mean, logvar};
  }

  std::pair<ad::Var, ad::Var> encode(ad::Tape& t, ad::Var y) const {
    ad::Var h = t.tanh_(t.affine(*w_enc, *b_enc, y));
    ad::Var mean = t.affine(*w_mu, *b_mu, h);
    ad::Var logvar = t.clamp(t.affine(*w_lv, *b_lv, h), -kLogvarClamp, kLogvarClamp);
    return {mean, logvar};
  }

  static Vec reparam(const Vec& mean, const Vec& logvar, const Vec& eta) {
    if (mean.size() != logvar.size() || mean.size() != eta.size())
      throw ShapeMismatch("vae_reparam");
    return mean + (logvar / 2.0).array().exp().matrix().cwiseProduct(eta);
  }

  static ad::Var reparam(ad::Tape& t, ad::Var mean, ad::Var logvar, const Vec& eta) {
    return t.add(mean, t.cmul(t.exp_(t.scale(logvar, 0.5)), t.constant(eta)));
  }

  Vec decode(const Vec& z) const {
    if (z.size() != latent_dim()) throw ShapeMismatch("vae_decode input");
    return dec.forward(z);
  }
  ad::Var decode(ad::Tape& t, ad::Var z) const { return dec.forward(t, z); }
};

inline Vec fuse(const Vec& u_x, const Vec& z_hat) {
  Vec out(u_x.size() + z_hat.size());
  out << u_x, z_hat;
  return out;
}

constexpr int kNumClasses = 7;

}  // namespace omg
