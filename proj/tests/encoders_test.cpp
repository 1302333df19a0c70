#include <catch2/catch_amalgamated.hpp>

#include "omg/model.hpp"
#include "omg/train.hpp"
#include "omg/verify.hpp"

using namespace omg;

namespace {
Config tiny() {
  Config cfg;
  cfg.data.latent_dim = 4;
  cfg.data.modality_dims = {6, 4, 4};
  cfg.data.n_train = 60;
  cfg.data.n_val = 30;
  cfg.data.n_test = 20;
  cfg.protocol.mr = 0.5;
  cfg.train.vae_epochs = 20;
  cfg.train.align_epochs = 12;
  cfg.train.projector_epochs = 4;
  cfg.train.diffusion_epochs = 2;
  cfg.diffusion.steps = 20;
  return cfg;
}
}  // namespace

TEST_CASE("observation encoder ignores masked slot content") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  Dataset ds = generate_dataset(SyntheticConfig::from(cfg.data));
  Dataset masked = apply_random_mask(ds, 0.5, 77);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    MultimodalSample s = masked.samples[size_t(i)];
    Vec base = m->psi.encode(s);
    REQUIRE(base.size() == cfg.dims.d);
    // randomize masked slots, then re-apply the sentinel: u_X must not move
    MultimodalSample fuzzed = s;
    for (size_t mod = 0; mod < s.mask.size(); ++mod)
      if (!s.mask[mod]) fuzzed.features[mod] = gaussian_vec(int(s.features[mod].size()), rng);
    zero_out_masked(fuzzed);
    REQUIRE((m->psi.encode(fuzzed) - base).cwiseAbs().maxCoeff() == 0.0);
  }
  MultimodalSample all_missing = masked.samples[0];
  all_missing.mask.assign(all_missing.mask.size(), 0);
  REQUIRE_THROWS_AS(m->psi.encode(all_missing), AllMissing);
}

TEST_CASE("plan encoder is deterministic and order sensitive") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  SemanticPlan plan;
  plan.constraints = {{3, 7, 5}, {1, 2, 6}, {9, 15, 0}};
  Vec a = m->g.encode(plan);
  Vec b = m->g.encode(plan);
  REQUIRE(a == b);
  REQUIRE(a.size() == cfg.dims.d_s);
  REQUIRE(a.norm() > 1e-8);
  REQUIRE(a.allFinite());
  // position-tagged sums: permuting triplets moves the embedding
  SemanticPlan permuted;
  permuted.constraints = {{1, 2, 6}, {3, 7, 5}, {9, 15, 0}};
  REQUIRE((m->g.encode(permuted) - a).cwiseAbs().maxCoeff() > 1e-8);

  SemanticPlan invalid;
  invalid.constraints = {{3, 7, 5}, {1, 2, 6}};
  REQUIRE_THROWS_AS(m->g.encode(invalid), SchemaViolation);
  SemanticPlan oov = plan;
  oov.constraints[0].sentiment = 7;
  REQUIRE_THROWS_AS(m->g.encode(oov), SchemaViolation);
}

TEST_CASE("vae reparameterization and clamping") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  const Vae& vae = m->stacks.front().vae;
  Rng rng(3);
  Vec y = gaussian_vec(vae.target_dim(), rng);
  auto [mean, logvar] = vae.encode(y);
  REQUIRE(Vae::reparam(mean, logvar, Vec::Zero(vae.latent_dim())) == mean);
  REQUIRE(logvar.minCoeff() >= -Vae::kLogvarClamp);
  REQUIRE(logvar.maxCoeff() <= Vae::kLogvarClamp);
  Vec eta = gaussian_vec(vae.latent_dim(), rng);
  REQUIRE(Vae::reparam(mean, logvar, eta).allFinite());
  REQUIRE(vae.decode(mean).size() == vae.target_dim());
  REQUIRE_THROWS_AS(vae.encode(Vec::Ones(vae.target_dim() + 1)), ShapeMismatch);
  REQUIRE_THROWS_AS(vae.decode(Vec::Ones(vae.latent_dim() + 2)), ShapeMismatch);
}

TEST_CASE("fusion and classifier shape contracts") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  Rng rng(9);
  Vec u = gaussian_vec(cfg.dims.d, rng);
  Vec z = gaussian_vec(cfg.dims.d_z, rng);
  Vec fused = fuse(u, z);
  REQUIRE(fused.size() == cfg.dims.d + cfg.dims.d_z);
  Vec logits = m->classifier.forward(fused);
  REQUIRE(logits.size() == kNumClasses);
  REQUIRE(std::abs(softmax_stable(logits).sum() - 1.0) < 1e-6);
}

TEST_CASE("untrained classifier sits at chance on balanced 7-class data") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  Rng rng(31);
  int per_class = 300;
  long hits = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      Vec input = gaussian_vec(cfg.dims.d + cfg.dims.d_z, rng);
      Vec logits = m->classifier.forward(input);
      Eigen::Index arg;
      logits.maxCoeff(&arg);
      if (int(arg) == cls) ++hits;
    }
  }
  double acc = double(hits) / double(per_class * kNumClasses);
  REQUIRE(acc == Catch::Approx(1.0 / 7.0).margin(0.05));
}

TEST_CASE("taped forwards agree with raw forwards") {
  Config cfg = tiny();
  auto m = make_model(cfg);
  ModalityStack& stack = m->stacks.front();
  Dataset ds = generate_dataset(SyntheticConfig::from(cfg.data));
  const MultimodalSample& s = ds.samples[2];
  SemanticPlan plan = ground_truth_plan(s.latent, s.score, m->schema);

  ad::Tape t;
  REQUIRE((t.val(m->psi.encode(t, s)) - m->psi.encode(s)).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE((t.val(m->g.encode(t, plan)) - m->g.encode(plan)).cwiseAbs().maxCoeff() < 1e-14);
  const Vec& y = s.features[0];
  auto [mu, lv] = stack.vae.encode(y);
  auto [mu_t, lv_t] = stack.vae.encode(t, t.constant(y));
  REQUIRE((t.val(mu_t) - mu).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE((t.val(lv_t) - lv).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE((t.val(stack.vae.decode(t, mu_t)) - stack.vae.decode(mu)).cwiseAbs().maxCoeff() <
          1e-14);
}

TEST_CASE("encoder gradient contract (finite differences)") {
  PropertyResult r = check_encoder_gradients();
  INFO(r.detail);
  REQUIRE(r.pass);
}

TEST_CASE("stage-1 training aligns the shared space and beats baselines",
          "[training]") {
  Config cfg = tiny();
  StageCache cache;
  Trainer trainer(cfg, &cache);
  TrainOutput out = trainer.run();
  ModelBundle& m = *out.model;

  // alignment: mean val cosine after training > same statistic at init
  auto mean_cos = [&](const ModelBundle& model) {
    double total = 0.0;
    for (size_t i = 0; i < out.masked_val.size(); ++i) {
      const auto& s = out.raw_val.samples[i];
      total += cosine(model.psi.encode(out.masked_val.samples[i]),
                      model.g.encode(ground_truth_plan(s.latent, s.score, model.schema)));
    }
    return total / double(out.masked_val.size());
  };
  auto fresh = make_model(cfg);
  REQUIRE(mean_cos(m) > mean_cos(*fresh));

  // VAE: held-out reconstruction beats predicting the training mean
  const ModalityStack& stack = m.stacks.front();
  double vae_mse = 0.0, mean_mse = 0.0;
  for (const auto& s : out.raw_val.samples) {
    const Vec& y = s.features[0];
    vae_mse += (stack.vae.decode(stack.vae.encode(y).first) - y).squaredNorm();
    mean_mse += (m.train_feature_means[0] - y).squaredNorm();
  }
  REQUIRE(vae_mse < mean_mse);
}
