#pragma once

// Staged training: (1) VAEs, encoder/plan alignment, and the planner policy;
// (2) retrieval projector with the evidence-alignment auxiliary; (3) denoiser,
// adapters, alignment head, and classifier on the total objective. Each stage
// runs Adam at the configured initial rate with plateau-halving. A StageCache
// memoizes stages 1-2 across ablation variants that share them; results are
// identical with or without the cache.

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "omg/metrics.hpp"
#include "omg/model.hpp"
#include "omg/objectives.hpp"
#include "omg/pipeline.hpp"

namespace omg {

struct StageCache {
  std::map<uint64_t, Checkpoint> stage1;
  std::map<uint64_t, Checkpoint> stage2;
};

struct TrainOutput {
  std::unique_ptr<ModelBundle> model;
  Dataset raw_train, raw_val, raw_test;
  Dataset masked_train, masked_val;
  std::vector<Json> log;
};

namespace detail {

inline bool is_stage1_param(const std::string& name) {
  if (name.find(".den.") != std::string::npos) return false;  // shape varies by variant
  return true;
}

inline Dataset mask_for_training(const Dataset& raw, const ProtocolConfig& proto,
                                 uint64_t seed) {
  if (proto.kind == ProtocolKind::fixed) return apply_fixed_mask(raw, proto.pattern);
  return apply_random_mask(raw, proto.mr, seed);
}

inline uint64_t json_key(const Json& j) {
  std::string s = j.dump();
  return fnv1a64(s.data(), s.size());
}

}  // namespace detail

class Trainer {
 public:
  explicit Trainer(const Config& cfg, StageCache* cache = nullptr)
      : cfg_(cfg), cache_(cache) {}

  TrainOutput run(const std::string& out_dir = "") {
    TrainOutput out;
    out.model = make_model(cfg_);
    ModelBundle& m = *out.model;

    Dataset full = generate_dataset(SyntheticConfig::from(cfg_.data));
    out.raw_train = train_split(full);
    out.raw_val = val_split(full);
    out.raw_test = test_split(full);
    out.masked_train = detail::mask_for_training(out.raw_train, cfg_.protocol,
                                                 Rng::mix(cfg_.train.seed ^ 0x747261));
    out.masked_val = detail::mask_for_training(out.raw_val, cfg_.protocol,
                                               Rng::mix(cfg_.train.seed ^ 0x76616c));
    realized_mr_ = missing_rate(out.masked_train);

    m.train_feature_means.clear();
    for (int mod = 0; mod < out.raw_train.n_modalities(); ++mod) {
      Vec mean = Vec::Zero(cfg_.data.modality_dims[size_t(mod)]);
      for (const auto& s : out.raw_train.samples) mean += s.features[size_t(mod)];
      m.train_feature_means.push_back(mean / double(out.raw_train.size()));
    }

    uint64_t key1 = stage1_key();
    bool restored1 = false;
    if (cache_) {
      auto it = cache_->stage1.find(key1);
      if (it != cache_->stage1.end()) {
        restore_params(m, it->second);
        restored1 = true;
      }
    }
    if (!restored1) {
      stage1_vae(m, out);
      stage1_align(m, out);
      stage1_gy(m, out);
      if (cache_) cache_->stage1[key1] = stage1_snapshot(m);
    }

    for (auto& stack : m.stacks)
      stack.kb = build_kb(out.raw_train, m.psi, m.g, stack.vae, stack.modality);

    precompute_conditioning(m, out);

    if (cfg_.variant.retrieval_mode != RetrievalMode::disabled) {
      uint64_t key2 = stage2_key(key1);
      bool restored2 = false;
      if (cache_) {
        auto it = cache_->stage2.find(key2);
        if (it != cache_->stage2.end()) {
          restore_params(m, it->second);
          restored2 = true;
        }
      }
      if (!restored2) {
        stage2_projector(m, out);
        if (cache_) cache_->stage2[key2] = stage2_snapshot(m);
      }
    }

    stage3_diffusion(m, out);

    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream os(out_dir + "/train_log.jsonl");
      for (const auto& e : out.log) os << e.dump() << "\n";
    }
    return out;
  }

 private:
  Config cfg_;
  StageCache* cache_;
  double realized_mr_ = 0.0;
  std::vector<Conditioning> cond_train_, cond_val_;
  std::vector<Vec> u_train_, u_val_;

  void log_epoch(TrainOutput& out, const std::string& stage, int epoch, double train_loss,
                 double val_loss, double lr) {
    Json e;
    e["stage"] = stage;
    e["epoch"] = epoch;
    e["train_loss"] = train_loss;
    e["val_loss"] = val_loss;
    e["lr"] = lr;
    e["realized_mr"] = realized_mr_;
    e["seed"] = cfg_.train.seed;
    out.log.push_back(std::move(e));
  }

  uint64_t stage1_key() const {
    Json j;
    Json cj = to_json(cfg_);
    j["data"] = cj["data"];
    j["dims"] = cj["dims"];
    j["train"] = cj["train"];
    j["protocol"] = {{"kind", cj["protocol"]["kind"]}, {"mr", cj["protocol"]["mr"]},
                     {"pattern", cj["protocol"]["pattern"]}};
    j["targets"] = cfg_.eval.target_modalities;
    return detail::json_key(j);
  }

  uint64_t stage2_key(uint64_t key1) const {
    Json j;
    Json cj = to_json(cfg_);
    j["stage1"] = key1;
    j["retriever"] = cj["retriever"];
    j["query_mode"] = to_string(cfg_.variant.query_mode);
    j["retrieval_mode"] = to_string(cfg_.variant.retrieval_mode);
    j["planner_mode"] = to_string(cfg_.variant.planner_mode);
    j["lambda_e"] = cfg_.loss.lambda_e;
    return detail::json_key(j);
  }

  Checkpoint stage1_snapshot(const ModelBundle& m) const {
    Checkpoint ckpt;
    for (const auto& p : m.store.all())
      if (detail::is_stage1_param(p.name)) ckpt[p.name] = Tensor::from_mat(p.value);
    return ckpt;
  }
  Checkpoint stage2_snapshot(const ModelBundle& m) const {
    Checkpoint ckpt;
    for (const auto& p : m.store.all())
      if (p.name.find(".proj.") != std::string::npos)
        ckpt[p.name] = Tensor::from_mat(p.value);
    return ckpt;
  }
  void restore_params(ModelBundle& m, const Checkpoint& ckpt) const {
    for (auto& p : m.store.all()) {
      auto it = ckpt.find(p.name);
      if (it != ckpt.end()) p.value = it->second.to_mat();
    }
  }

  std::vector<int> shuffled_indices(size_t n, Rng& rng) const {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t i = n; i > 1; --i)
      std::swap(idx[i - 1], idx[size_t(rng.uniform_int(int(i)))]);
    return idx;
  }

  // ---- stage 1a: per-stack VAE pretraining (reconstruction + 1e-3 KL) ----

  void stage1_vae(ModelBundle& m, TrainOutput& out) {
    for (auto& stack : m.stacks) {
      ad::Adam opt(cfg_.train.lr);
      opt.attach(stack.vae.params());
      PlateauScheduler sched(cfg_.train.lr, cfg_.train.decay_factor,
                             cfg_.train.plateau_patience);
      Rng rng = Rng::stream(cfg_.train.seed, 0x7661 + uint64_t(stack.modality));
      int dim = stack.vae.target_dim();
      for (int epoch = 0; epoch < cfg_.train.vae_epochs; ++epoch) {
        auto idx = shuffled_indices(out.raw_train.size(), rng);
        double train_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < idx.size(); start += size_t(cfg_.train.batch_size)) {
          size_t stop = std::min(idx.size(), start + size_t(cfg_.train.batch_size));
          ad::Tape tape;
          ad::Var total = -1;
          for (size_t k = start; k < stop; ++k) {
            const Vec& y = out.raw_train.samples[size_t(idx[k])].features[size_t(stack.modality)];
            ad::Var yv = tape.constant(y);
            auto [mu, lv] = stack.vae.encode(tape, yv);
            ad::Var z = Vae::reparam(tape, mu, lv, gaussian_vec(stack.vae.latent_dim(), rng));
            ad::Var rec = tape.scale(tape.sqdist(stack.vae.decode(tape, z), yv), 1.0 / dim);
            ad::Var kl = tape.scale(
                tape.sub(tape.sub(tape.add(tape.dot(mu, mu), tape.sum(tape.exp_(lv))),
                                  tape.constant(Vec::Constant(1, double(stack.vae.latent_dim())))),
                         tape.sum(lv)),
                0.5);
            ad::Var term = tape.add(rec, tape.scale(kl, 1e-3));
            total = total < 0 ? term : tape.add(total, term);
          }
          total = tape.scale(total, 1.0 / double(stop - start));
          tape.backward(total);
          double v = tape.val(total)[0];
          check_finite_loss(v, "vae loss");
          train_loss += v;
          ++batches;
          opt.step();
        }
        double val_loss = 0.0;
        for (const auto& s : out.raw_val.samples) {
          const Vec& y = s.features[size_t(stack.modality)];
          auto [mu, lv] = stack.vae.encode(y);
          double rec = (stack.vae.decode(mu) - y).squaredNorm() / dim;
          double kl = 0.5 * (mu.squaredNorm() + lv.array().exp().sum() -
                             stack.vae.latent_dim() - lv.sum());
          val_loss += rec + 1e-3 * kl;
        }
        val_loss /= double(out.raw_val.size());
        sched.observe(val_loss);
        opt.set_lr(sched.lr());
        log_epoch(out, "vae.m" + std::to_string(stack.modality), epoch,
                  train_loss / batches, val_loss, sched.lr());
      }
    }
  }

  // ---- stage 1b: psi/g contrastive alignment + planner likelihood ----

  void stage1_align(ModelBundle& m, TrainOutput& out) {
    std::vector<ad::Param*> params = m.psi.params();
    for (auto* p : m.g.params()) params.push_back(p);
    for (auto* p : m.planner.params()) params.push_back(p);
    ad::Adam opt(cfg_.train.lr);
    opt.attach(params);
    PlateauScheduler sched(cfg_.train.lr, cfg_.train.decay_factor,
                           cfg_.train.plateau_patience);
    Rng rng = Rng::stream(cfg_.train.seed, 0xa116e);
    const double tau = 0.1;
    int n_tokens = 3 * m.schema.triplets;

    std::vector<SemanticPlan> gt_train, gt_val;
    for (const auto& s : out.raw_train.samples)
      gt_train.push_back(ground_truth_plan(s.latent, s.score, m.schema));
    for (const auto& s : out.raw_val.samples)
      gt_val.push_back(ground_truth_plan(s.latent, s.score, m.schema));

    for (int epoch = 0; epoch < cfg_.train.align_epochs; ++epoch) {
      auto idx = shuffled_indices(out.masked_train.size(), rng);
      double train_loss = 0.0;
      int batches = 0;
      for (size_t start = 0; start < idx.size(); start += size_t(cfg_.train.batch_size)) {
        size_t stop = std::min(idx.size(), start + size_t(cfg_.train.batch_size));
        size_t b = stop - start;
        if (b < 2) continue;  // contrastive loss needs negatives
        ad::Tape tape;
        std::vector<ad::Var> us, gs;
        for (size_t k = start; k < stop; ++k) {
          us.push_back(m.psi.encode(tape, out.masked_train.samples[size_t(idx[k])]));
          gs.push_back(m.g.encode(tape, gt_train[size_t(idx[k])]));
        }
        ad::Var total = -1;
        for (size_t i = 0; i < b; ++i) {
          std::vector<ad::Var> row;
          for (size_t j = 0; j < b; ++j)
            row.push_back(tape.scale(tape.cosine(us[i], gs[j]), 1.0 / tau));
          ad::Var ce = tape.ce_with_logits(tape.pack(row), int(i));
          ad::Var nll = tape.scale(
              m.planner.nll(tape, us[i], gt_train[size_t(idx[start + i])]),
              1.0 / double(n_tokens));
          ad::Var term = tape.add(ce, nll);
          total = total < 0 ? term : tape.add(total, term);
        }
        total = tape.scale(total, 1.0 / double(b));
        tape.backward(total);
        double v = tape.val(total)[0];
        check_finite_loss(v, "alignment loss");
        train_loss += v;
        ++batches;
        opt.step();
      }
      // validation: mean positive-pair cosine distance + per-token planner NLL
      double val_loss = 0.0;
      for (size_t i = 0; i < out.masked_val.size(); ++i) {
        Vec u = m.psi.encode(out.masked_val.samples[i]);
        val_loss += cosine_cost(u, m.g.encode(gt_val[i]));
        double nll = 0.0;
        SemanticPlan prefix;
        prefix.constraints.assign(size_t(m.schema.triplets), Triplet{});
        for (int f = 0; f < n_tokens; ++f) {
          Vec z = m.planner.logits(u, prefix, f);
          int tok = gt_val[i].token(f / 3, f % 3);
          nll += log_sum_exp(z) - z[tok];
          int l = f / 3, slot = f % 3;
          auto& trip = prefix.constraints[size_t(l)];
          (slot == 0 ? trip.entity : slot == 1 ? trip.action : trip.sentiment) = tok;
        }
        val_loss += nll / n_tokens;
      }
      val_loss /= double(out.masked_val.size());
      sched.observe(val_loss);
      opt.set_lr(sched.lr());
      log_epoch(out, "align", epoch, train_loss / std::max(1, batches), val_loss, sched.lr());
    }
  }

  // ---- stage 1c: g_y heads, cosine-aligned to the frozen plan encoder ----

  void stage1_gy(ModelBundle& m, TrainOutput& out) {
    std::vector<Vec> g_true;
    for (const auto& s : out.raw_train.samples)
      g_true.push_back(m.g.encode(ground_truth_plan(s.latent, s.score, m.schema)));
    std::vector<Vec> g_true_val;
    for (const auto& s : out.raw_val.samples)
      g_true_val.push_back(m.g.encode(ground_truth_plan(s.latent, s.score, m.schema)));

    for (auto& stack : m.stacks) {
      ad::Adam opt(cfg_.train.lr);
      opt.attach(stack.g_y.params());
      PlateauScheduler sched(cfg_.train.lr, cfg_.train.decay_factor,
                             cfg_.train.plateau_patience);
      Rng rng = Rng::stream(cfg_.train.seed, 0x6779 + uint64_t(stack.modality));
      for (int epoch = 0; epoch < cfg_.train.align_epochs; ++epoch) {
        auto idx = shuffled_indices(out.raw_train.size(), rng);
        double train_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < idx.size(); start += size_t(cfg_.train.batch_size)) {
          size_t stop = std::min(idx.size(), start + size_t(cfg_.train.batch_size));
          ad::Tape tape;
          ad::Var total = -1;
          for (size_t k = start; k < stop; ++k) {
            int i = idx[k];
            ad::Var gy = stack.g_y.forward(
                tape, tape.constant(out.raw_train.samples[size_t(i)].features[size_t(stack.modality)]));
            ad::Var cost = tape.sub(tape.constant(Vec::Ones(1)),
                                    tape.cosine(gy, tape.constant(g_true[size_t(i)])));
            total = total < 0 ? cost : tape.add(total, cost);
          }
          total = tape.scale(total, 1.0 / double(stop - start));
          tape.backward(total);
          double v = tape.val(total)[0];
          check_finite_loss(v, "g_y loss");
          train_loss += v;
          ++batches;
          opt.step();
        }
        double val_loss = 0.0;
        for (size_t i = 0; i < out.raw_val.size(); ++i)
          val_loss += cosine_cost(
              stack.g_y.forward(out.raw_val.samples[i].features[size_t(stack.modality)]),
              g_true_val[i]);
        val_loss /= double(out.raw_val.size());
        sched.observe(val_loss);
        opt.set_lr(sched.lr());
        log_epoch(out, "g_y.m" + std::to_string(stack.modality), epoch,
                  train_loss / batches, val_loss, sched.lr());
      }
    }
  }

  // Per-sample observation embeddings and plan conditions; the planner and
  // encoders are frozen from here on, so this is computed once.
  void precompute_conditioning(ModelBundle& m, TrainOutput& out) {
    u_train_.clear();
    cond_train_.clear();
    for (size_t i = 0; i < out.masked_train.size(); ++i) {
      u_train_.push_back(m.psi.encode(out.masked_train.samples[i]));
      cond_train_.push_back(plan_sample(m, u_train_.back(),
                                        Rng::mix(cfg_.train.seed ^ (0xc0de + uint64_t(i)))));
    }
    u_val_.clear();
    cond_val_.clear();
    for (size_t i = 0; i < out.masked_val.size(); ++i) {
      u_val_.push_back(m.psi.encode(out.masked_val.samples[i]));
      cond_val_.push_back(plan_sample(m, u_val_.back(),
                                      Rng::mix(cfg_.train.seed ^ (0xc1de + uint64_t(i)))));
    }
  }

  // ---- stage 2: query projector, ||E - z0||^2 + lambda_e * C_evi ----

  void stage2_projector(ModelBundle& m, TrainOutput& out) {
    for (auto& stack : m.stacks) {
      std::vector<int> eligible;
      for (size_t i = 0; i < out.masked_train.size(); ++i)
        if (!out.masked_train.samples[i].mask[size_t(stack.modality)])
          eligible.push_back(int(i));
      if (eligible.empty()) continue;  // nothing is ever retrieved at MR=0

      std::vector<Vec> z0_true(out.masked_train.size());
      for (int i : eligible)
        z0_true[size_t(i)] =
            stack.vae.encode(out.raw_train.samples[size_t(i)].features[size_t(stack.modality)]).first;

      std::vector<int> eligible_val;
      for (size_t i = 0; i < out.masked_val.size(); ++i)
        if (!out.masked_val.samples[i].mask[size_t(stack.modality)])
          eligible_val.push_back(int(i));

      ad::Adam opt(cfg_.train.lr);
      opt.attach(stack.projector.params());
      PlateauScheduler sched(cfg_.train.lr, cfg_.train.decay_factor,
                             cfg_.train.plateau_patience);
      Rng rng = Rng::stream(cfg_.train.seed, 0x9a0 + uint64_t(stack.modality));
      int k = std::min(cfg_.retriever.k, stack.kb.size());
      double kappa = cfg_.retriever.kappa;

      for (int epoch = 0; epoch < cfg_.train.projector_epochs; ++epoch) {
        auto order = shuffled_indices(eligible.size(), rng);
        double train_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += size_t(cfg_.train.batch_size)) {
          size_t stop = std::min(order.size(), start + size_t(cfg_.train.batch_size));
          ad::Tape tape;
          ad::Var total = -1;
          for (size_t kk = start; kk < stop; ++kk) {
            int i = eligible[size_t(order[kk])];
            const Vec& u = u_train_[size_t(i)];
            const Vec& qc = cond_train_[size_t(i)].query_cond;
            // selection from the current projector, untaped
            Vec q_raw = stack.projector.project(u, qc);
            Vec scores_raw;
            try {
              scores_raw = score_entries(q_raw, stack.kb, kappa, cfg_.retriever.normalize_query);
            } catch (const ZeroQuery&) {
              scores_raw = Vec::Zero(stack.kb.size());
            }
            auto sel = topk(scores_raw, k);
            // taped scores over the selected subset only
            ad::Var q = stack.projector.project(tape, tape.constant(u), tape.constant(qc));
            if (cfg_.retriever.normalize_query)
              q = tape.smul(tape.reciprocal(tape.sqrt_(tape.dot(q, q))), q);
            std::vector<ad::Var> svars;
            for (int s : sel)
              svars.push_back(tape.scale(
                  tape.dot(q, tape.constant(stack.kb.keys.row(s).transpose())), 1.0 / kappa));
            ad::Var alpha =
                cfg_.variant.retrieval_mode == RetrievalMode::mean_pool
                    ? tape.constant(Vec::Constant(int(sel.size()), 1.0 / double(sel.size())))
                    : tape.softmax(tape.pack(svars));
            ad::Var evid = -1;
            for (size_t j = 0; j < sel.size(); ++j) {
              ad::Var term = tape.smul(tape.at(alpha, int(j)),
                                       tape.constant(stack.kb.values.row(sel[j]).transpose()));
              evid = evid < 0 ? term : tape.add(evid, term);
            }
            ad::Var fit = tape.sqdist(evid, tape.constant(z0_true[size_t(i)]));
            Vec mismatch(int(sel.size()));
            for (size_t j = 0; j < sel.size(); ++j)
              mismatch[int(j)] = cosine_cost(cond_train_[size_t(i)].c_s,
                                             stack.kb.semantics.row(sel[j]).transpose());
            ad::Var cevi = tape.dot(alpha, tape.constant(mismatch));
            ad::Var term = tape.add(fit, tape.scale(cevi, cfg_.loss.lambda_e));
            total = total < 0 ? term : tape.add(total, term);
          }
          total = tape.scale(total, 1.0 / double(stop - start));
          tape.backward(total);
          double v = tape.val(total)[0];
          check_finite_loss(v, "projector loss");
          train_loss += v;
          ++batches;
          opt.step();
        }
        double val_loss = 0.0;
        if (!eligible_val.empty()) {
          for (int i : eligible_val) {
            Conditioning& c = cond_val_[size_t(i)];
            RetrievalOut ret = retrieve(m, stack, u_val_[size_t(i)], c);
            Vec z0 = stack.vae
                         .encode(out.raw_val.samples[size_t(i)].features[size_t(stack.modality)])
                         .first;
            val_loss += (ret.evidence - z0).squaredNorm() + cfg_.loss.lambda_e * ret.c_evi;
          }
          val_loss /= double(eligible_val.size());
        }
        sched.observe(val_loss);
        opt.set_lr(sched.lr());
        log_epoch(out, "projector.m" + std::to_string(stack.modality), epoch,
                  train_loss / std::max(1, batches), val_loss, sched.lr());
      }
    }
  }

  // ---- stage 3: denoiser + adapters + alignment head (+ classifier) ----

  struct Stage3Item {
    int index = 0;
    bool target_missing = false;
    Vec z0;        // VAE latent of the true target
    Vec evidence;  // fixed per sample
    int label = 0;
  };

  void stage3_diffusion(ModelBundle& m, TrainOutput& out) {
    int primary = m.primary_target();
    for (auto& stack : m.stacks) {
      bool is_primary = stack.modality == primary;
      std::vector<ad::Param*> params = stack.denoiser.params();
      for (auto* p : stack.align_head.params()) params.push_back(p);
      if (is_primary)
        for (auto* p : m.classifier.params()) params.push_back(p);
      ad::Adam opt(cfg_.train.lr);
      opt.attach(params);
      PlateauScheduler sched(cfg_.train.lr, cfg_.train.decay_factor,
                             cfg_.train.plateau_patience);
      Rng rng = Rng::stream(cfg_.train.seed, 0xd1f + uint64_t(stack.modality));

      auto make_items = [&](const Dataset& masked, const Dataset& raw,
                            const std::vector<Vec>& us, std::vector<Conditioning>& conds)
          -> std::vector<Stage3Item> {
        std::vector<Stage3Item> items;
        for (size_t i = 0; i < masked.size(); ++i) {
          Stage3Item it;
          it.index = int(i);
          it.target_missing = !masked.samples[i].mask[size_t(stack.modality)];
          it.label = score_to_class7(raw.samples[i].score);
          it.z0 = stack.vae.encode(raw.samples[i].features[size_t(stack.modality)]).first;
          if (it.target_missing)
            it.evidence = retrieve(m, stack, us[i], conds[i]).evidence;
          if (it.target_missing || is_primary) items.push_back(std::move(it));
        }
        return items;
      };
      std::vector<Stage3Item> items = make_items(out.masked_train, out.raw_train,
                                                 u_train_, cond_train_);
      std::vector<Stage3Item> val_items = make_items(out.masked_val, out.raw_val,
                                                     u_val_, cond_val_);
      if (items.empty()) continue;

      for (int epoch = 0; epoch < cfg_.train.diffusion_epochs; ++epoch) {
        auto order = shuffled_indices(items.size(), rng);
        double train_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += size_t(cfg_.train.batch_size)) {
          size_t stop = std::min(order.size(), start + size_t(cfg_.train.batch_size));
          ad::Tape tape;
          ad::Var total = -1;
          for (size_t kk = start; kk < stop; ++kk) {
            const Stage3Item& it = items[size_t(order[kk])];
            const Vec& u = u_train_[size_t(it.index)];
            ad::Var term = -1;
            if (it.target_missing) {
              int t = 1 + rng.uniform_int(m.sched.steps);
              Vec eps = gaussian_vec(cfg_.dims.d_z, rng);
              Vec z_t = forward_diffuse(it.z0, t, eps, m.sched);
              ad::Var ztv = tape.constant(z_t);
              ad::Var uv = tape.constant(u);
              ad::Var cv = tape.constant(cond_train_[size_t(it.index)].c_s);
              ad::Var ev = tape.constant(it.evidence);
              ad::Var eps_hat = stack.denoiser.predict(tape, ztv, t, uv, cv, ev, m.sched);
              ad::Var mse = tape.sqdist(tape.constant(eps), eps_hat);
              ad::Var zhat = tweedie(tape, ztv, t, eps_hat, m.sched);
              ad::Var y_hat = stack.vae.decode(tape, zhat);
              ad::Var plan_cost = tape.sub(
                  tape.constant(Vec::Ones(1)),
                  tape.cosine(stack.g_y.forward(tape, y_hat), cv));
              ad::Var evi_cost = tape.l1dist(stack.phi.forward(tape, y_hat),
                                             stack.align_head.forward(tape, ev));
              term = tape.add(mse, tape.add(tape.scale(plan_cost, cfg_.loss.lambda_p),
                                            tape.scale(evi_cost, cfg_.loss.lambda_e)));
              if (is_primary && cfg_.loss.lambda_task > 0) {
                ad::Var z_cls =
                    cfg_.variant.task_input == TaskInput::tweedie ? zhat : ztv;
                ad::Var logits =
                    m.classifier.forward(tape, tape.concat(tape.constant(u), z_cls));
                term = tape.add(
                    term, tape.scale(tape.ce_with_logits(logits, it.label),
                                     cfg_.loss.lambda_task));
              }
            } else if (is_primary) {
              // observed target: classifier sees the encoded latent, as at
              // inference time
              ad::Var logits = m.classifier.forward(
                  tape, tape.concat(tape.constant(u), tape.constant(it.z0)));
              term = tape.ce_with_logits(logits, it.label);
            }
            if (term >= 0) total = total < 0 ? term : tape.add(total, term);
          }
          if (total < 0) continue;
          total = tape.scale(total, 1.0 / double(stop - start));
          tape.backward(total);
          double v = tape.val(total)[0];
          check_finite_loss(v, "diffusion loss");
          train_loss += v;
          ++batches;
          opt.step();
        }
        double val_loss =
            stage3_val_loss(m, stack, is_primary, val_items, rng, epoch);
        sched.observe(val_loss);
        opt.set_lr(sched.lr());
        log_epoch(out, "diffusion.m" + std::to_string(stack.modality), epoch,
                  train_loss / std::max(1, batches), val_loss, sched.lr());
      }
    }
  }

  double stage3_val_loss(ModelBundle& m, ModalityStack& stack, bool is_primary,
                         const std::vector<Stage3Item>& val_items, Rng& /*rng*/,
                         int /*epoch*/) {
    if (val_items.empty()) return 0.0;
    // one fixed validation draw set: the plateau signal reflects parameter
    // progress, not draw noise
    Rng vr = Rng::stream(cfg_.train.seed, 0xe7a1);
    double total = 0.0;
    auto predict = [&](const Vec& z_t, int t, const Vec& u, const Vec& c, const Vec& e) {
      return stack.denoiser.predict(z_t, t, u, c, e, m.sched);
    };
    for (const auto& it : val_items) {
      const Vec& u = u_val_[size_t(it.index)];
      if (it.target_missing) {
        int t = 1 + vr.uniform_int(m.sched.steps);
        Vec eps = gaussian_vec(cfg_.dims.d_z, vr);
        RecDraw d{it.z0, t, eps, u, cond_val_[size_t(it.index)].c_s, it.evidence, it.label};
        RecLossParts parts = loss_rec(std::vector<RecDraw>{d}, predict, m.sched,
                                      stack.vae, stack.g_y, stack.phi, stack.align_head);
        total += parts.total(cfg_.loss.lambda_p, cfg_.loss.lambda_e);
        if (is_primary && cfg_.loss.lambda_task > 0)
          total += cfg_.loss.lambda_task *
                   loss_task(std::vector<RecDraw>{d}, predict, m.sched, m.classifier,
                             cfg_.variant.task_input);
      } else if (is_primary) {
        Vec logits = m.classifier.forward(fuse(u, it.z0));
        total += log_sum_exp(logits) - logits[it.label];
      }
    }
    return total / double(val_items.size());
  }
};

}  // namespace omg
