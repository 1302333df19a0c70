#pragma once

// The trained artifact: shared encoders, plan policy, classifier, and one
// stack (VAE, feature heads, query projector, denoiser, knowledge base) per
// target modality. Classification is anchored on the first configured
// target modality.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "omg/checkpoint.hpp"
#include "omg/config.hpp"
#include "omg/encoders.hpp"
#include "omg/executor.hpp"
#include "omg/planner.hpp"
#include "omg/retriever.hpp"

namespace omg {

struct ModalityStack {
  int modality = 0;
  Vae vae;
  Mlp2 g_y;         // reconstructed target -> plan space
  Mlp2 phi;         // low-level feature extractor, frozen
  Mlp2 align_head;  // A
  QueryProjector projector;
  Denoiser denoiser;
  KnowledgeBase kb;
};

struct ModelBundle {
  Config cfg;
  Schema schema;
  NoiseSchedule sched;
  ad::ParamStore store;
  ObsEncoder psi;
  PlanEncoder g;
  PlannerPolicy planner;
  Mlp2 classifier;
  std::vector<ModalityStack> stacks;
  std::vector<Vec> train_feature_means;  // per modality, from the raw training set

  ModelBundle() = default;
  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;
  ModelBundle(ModelBundle&&) = default;
  ModelBundle& operator=(ModelBundle&&) = default;

  int primary_target() const { return cfg.eval.target_modalities.at(0); }

  const ModalityStack& stack_for(int modality) const {
    for (const auto& s : stacks)
      if (s.modality == modality) return s;
    throw ConfigError("no stack for modality " + std::to_string(modality));
  }
  ModalityStack& stack_for(int modality) {
    return const_cast<ModalityStack&>(
        static_cast<const ModelBundle*>(this)->stack_for(modality));
  }
  bool has_stack(int modality) const {
    for (const auto& s : stacks)
      if (s.modality == modality) return true;
    return false;
  }
};

inline std::unique_ptr<ModelBundle> make_model(const Config& cfg) {
  auto m = std::make_unique<ModelBundle>();
  m->cfg = cfg;
  m->schema = Schema{};
  m->sched = NoiseSchedule::linear(cfg.diffusion.steps, cfg.diffusion.beta_min,
                                   cfg.diffusion.beta_max);
  // one stream per component, keyed by name: initial values never depend on
  // construction order or on the shapes of sibling components
  auto rng_for = [&](const char* name) {
    return Rng::stream(cfg.train.seed, fnv1a64(name, std::char_traits<char>::length(name)));
  };
  Rng r_psi = rng_for("psi");
  m->psi = ObsEncoder::create(m->store, cfg.dims, cfg.data.modality_dims, r_psi);
  Rng r_g = rng_for("g");
  m->g = PlanEncoder::create(m->store, cfg.dims, m->schema, r_g);
  Rng r_pl = rng_for("planner");
  m->planner = PlannerPolicy::create(m->store, cfg.dims, m->schema, r_pl);
  Rng r_cls = rng_for("classifier");
  m->classifier = Mlp2::create(m->store, "classifier", cfg.dims.d + cfg.dims.d_z,
                               cfg.dims.hidden, kNumClasses, /*tanh_out=*/false, r_cls);
  for (int t : cfg.eval.target_modalities) {
    if (t < 0 || t >= static_cast<int>(cfg.data.modality_dims.size()))
      throw ConfigError("target modality out of range");
    ModalityStack s;
    s.modality = t;
    std::string p = "stack" + std::to_string(t);
    int target_dim = cfg.data.modality_dims[static_cast<size_t>(t)];
    auto stack_rng = [&](const char* part) {
      std::string key = p + "." + part;
      return Rng::stream(cfg.train.seed, fnv1a64(key.data(), key.size()));
    };
    Rng r_vae = stack_rng("vae");
    s.vae = Vae::create(m->store, p + ".vae", target_dim, cfg.dims.hidden, cfg.dims.d_z, r_vae);
    Rng r_gy = stack_rng("g_y");
    s.g_y = Mlp2::create(m->store, p + ".g_y", target_dim, cfg.dims.hidden, cfg.dims.d_s,
                         /*tanh_out=*/true, r_gy);
    Rng r_phi = stack_rng("phi");
    s.phi = Mlp2::create(m->store, p + ".phi", target_dim, cfg.dims.hidden, cfg.dims.d_phi,
                         /*tanh_out=*/false, r_phi, /*trainable=*/false);
    Rng r_align = stack_rng("align");
    s.align_head = Mlp2::create(m->store, p + ".align", cfg.dims.d_z, cfg.dims.hidden,
                                cfg.dims.d_phi, /*tanh_out=*/false, r_align);
    if (s.phi.out_dim() != s.align_head.out_dim())
      throw ShapeMismatch("phi and alignment head disagree on d_phi");
    Rng r_proj = stack_rng("proj");
    s.projector = QueryProjector::create(m->store, p + ".proj", cfg.dims.d, cfg.dims.d_s, r_proj);
    Rng r_den = stack_rng("den");
    s.denoiser = Denoiser::create(m->store, p + ".den", cfg.dims, cfg.diffusion,
                                  cfg.variant.injection_mode, r_den);
    m->stacks.push_back(std::move(s));
  }
  return m;
}

inline Checkpoint model_checkpoint(const ModelBundle& m) {
  Checkpoint ckpt;
  for (const auto& p : m.store.all()) ckpt["param." + p.name] = Tensor::from_mat(p.value);
  for (const auto& s : m.stacks) {
    std::string p = "stack" + std::to_string(s.modality);
    if (s.kb.size() > 0) {
      ckpt[p + ".kb.keys"] = Tensor::from_mat(s.kb.keys);
      ckpt[p + ".kb.values"] = Tensor::from_mat(s.kb.values);
      ckpt[p + ".kb.semantics"] = Tensor::from_mat(s.kb.semantics);
    }
  }
  for (size_t i = 0; i < m.train_feature_means.size(); ++i)
    ckpt["train_mean.m" + std::to_string(i)] = Tensor::from_vec(m.train_feature_means[i]);
  return ckpt;
}

inline void load_model_params(ModelBundle& m, const Checkpoint& ckpt) {
  for (auto& p : m.store.all()) {
    auto it = ckpt.find("param." + p.name);
    if (it == ckpt.end()) throw CorruptCheckpoint("missing parameter " + p.name);
    Mat v = it->second.to_mat();
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw ShapeMismatch("parameter shape for " + p.name);
    p.value = v;
  }
  for (auto& s : m.stacks) {
    std::string p = "stack" + std::to_string(s.modality);
    auto it = ckpt.find(p + ".kb.keys");
    if (it != ckpt.end()) {
      s.kb.keys = it->second.to_mat();
      s.kb.values = ckpt.at(p + ".kb.values").to_mat();
      s.kb.semantics = ckpt.at(p + ".kb.semantics").to_mat();
      s.kb.target_modality = s.modality;
    }
  }
  m.train_feature_means.clear();
  for (size_t i = 0;; ++i) {
    auto it = ckpt.find("train_mean.m" + std::to_string(i));
    if (it == ckpt.end()) break;
    m.train_feature_means.push_back(it->second.to_vec());
  }
}

inline void save_model(const ModelBundle& m, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint(model_checkpoint(m), dir + "/model.ckpt");
  std::ofstream os(dir + "/model.meta.json");
  Json meta;
  meta["config"] = to_json(m.cfg);
  meta["config_checksum"] = config_checksum(m.cfg);
  os << meta.dump(2) << "\n";
}

inline std::unique_ptr<ModelBundle> load_model(const std::string& dir) {
  std::ifstream is(dir + "/model.meta.json");
  if (!is) throw RuntimeFailure("cannot open " + dir + "/model.meta.json");
  Json meta;
  is >> meta;
  auto m = make_model(config_from_json(meta.at("config")));
  load_model_params(*m, load_checkpoint(dir + "/model.ckpt"));
  return m;
}

}  // namespace omg
