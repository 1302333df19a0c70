#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "omg/error.hpp"
#include "omg/mathutil.hpp"

namespace omg {

using Json = nlohmann::ordered_json;

struct DataConfig {
  int latent_dim = 8;
  std::vector<int> modality_dims = {16, 8, 8};
  double obs_noise_std = 0.05;
  double score_leak = 1.0;
  int n_train = 1600;
  int n_val = 400;
  int n_test = 400;
  uint64_t seed = 1;
};

struct DimsConfig {
  int d = 32;        // shared observation space
  int d_s = 32;      // plan condition space
  int d_z = 8;       // VAE latent
  int d_phi = 16;    // low-level feature space
  int hidden = 32;   // encoder MLP width
  int emb = 16;      // token embedding width
  int denoiser_hidden = 48;
  int attn = 16;     // cross-attention head width
  int time_emb = 8;
};

struct PlannerConfig {
  int n_candidates = 5;
  double lambda_s = 0.3;
  double gamma = 0.1;
  double temperature = 1.0;
};

struct RetrieverConfig {
  int k = 10;
  double kappa = 0.07;
  bool normalize_query = true;
};

struct DiffusionConfig {
  int steps = 100;
  double beta_min = 1e-4;
  double beta_max = 0.065;
  int blocks = 6;
};

struct LossConfig {
  double lambda_p = 0.1;     // plan consistency
  double lambda_e = 0.1;     // evidence consistency
  double lambda_task = 0.1;
  double lambda_path = 0.1;  // trajectory-utility path weight
};

struct TrainConfig {
  double lr = 2e-3;
  int batch_size = 32;
  int vae_epochs = 60;
  int align_epochs = 80;
  int projector_epochs = 60;
  int diffusion_epochs = 150;
  double decay_factor = 0.5;
  int plateau_patience = 10;
  uint64_t seed = 7;
};

enum class ProtocolKind { fixed, random };

struct ProtocolConfig {
  ProtocolKind kind = ProtocolKind::random;
  double mr = 0.0;                        // random kind
  std::vector<int> pattern = {};          // fixed kind: removed modalities
  std::vector<uint64_t> eval_seeds = {1, 2, 3, 4, 5};
};

enum class PlannerMode { plan_driven, wo_rerank, wo_planner };
enum class QueryMode { plan_driven, content_only, random_plan };
enum class RetrievalMode { sparse_topk, mean_pool, disabled };
enum class InjectionMode { dual, concat, reversed, single_stream };
enum class TaskInput { tweedie, noisy };

struct VariantConfig {
  PlannerMode planner_mode = PlannerMode::plan_driven;
  QueryMode query_mode = QueryMode::plan_driven;
  RetrievalMode retrieval_mode = RetrievalMode::sparse_topk;
  InjectionMode injection_mode = InjectionMode::dual;
  TaskInput task_input = TaskInput::tweedie;
};

enum class Acc2Mode { pos_vs_neg_excl_zero, nonneg_vs_neg };

struct EvalConfig {
  Acc2Mode acc2_mode = Acc2Mode::pos_vs_neg_excl_zero;
  std::vector<int> target_modalities = {0};
};

struct Config {
  DataConfig data;
  DimsConfig dims;
  PlannerConfig planner;
  RetrieverConfig retriever;
  DiffusionConfig diffusion;
  LossConfig loss;
  TrainConfig train;
  ProtocolConfig protocol;
  VariantConfig variant;
  EvalConfig eval;
};

// ---- JSON (field-by-field so that missing keys fall back to defaults) ----

namespace detail {
template <typename T>
void opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
inline void opt_enum(const Json& j, const char* key, std::string& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}
}  // namespace detail

inline const char* to_string(ProtocolKind k) {
  return k == ProtocolKind::fixed ? "fixed" : "random";
}
inline const char* to_string(PlannerMode m) {
  switch (m) {
    case PlannerMode::plan_driven: return "plan_driven";
    case PlannerMode::wo_rerank: return "wo_rerank";
    default: return "wo_planner";
  }
}
inline const char* to_string(QueryMode m) {
  switch (m) {
    case QueryMode::plan_driven: return "plan_driven";
    case QueryMode::content_only: return "content_only";
    default: return "random_plan";
  }
}
inline const char* to_string(RetrievalMode m) {
  switch (m) {
    case RetrievalMode::sparse_topk: return "sparse_topk";
    case RetrievalMode::mean_pool: return "mean_pool";
    default: return "disabled";
  }
}
inline const char* to_string(InjectionMode m) {
  switch (m) {
    case InjectionMode::dual: return "dual";
    case InjectionMode::concat: return "concat";
    case InjectionMode::reversed: return "reversed";
    default: return "single_stream";
  }
}
inline const char* to_string(TaskInput m) {
  return m == TaskInput::tweedie ? "tweedie" : "noisy";
}
inline const char* to_string(Acc2Mode m) {
  return m == Acc2Mode::pos_vs_neg_excl_zero ? "pos_vs_neg_excl_zero"
                                             : "nonneg_vs_neg";
}

template <typename E>
E enum_from_string(const std::string& s, std::initializer_list<E> values) {
  for (E v : values)
    if (s == to_string(v)) return v;
  throw ConfigError("unknown enum value: " + s);
}

inline Json to_json(const Config& c) {
  Json j;
  j["data"] = {{"latent_dim", c.data.latent_dim},
               {"modality_dims", c.data.modality_dims},
               {"obs_noise_std", c.data.obs_noise_std},
               {"score_leak", c.data.score_leak},
               {"n_train", c.data.n_train},
               {"n_val", c.data.n_val},
               {"n_test", c.data.n_test},
               {"seed", c.data.seed}};
  j["dims"] = {{"d", c.dims.d},
               {"d_s", c.dims.d_s},
               {"d_z", c.dims.d_z},
               {"d_phi", c.dims.d_phi},
               {"hidden", c.dims.hidden},
               {"emb", c.dims.emb},
               {"denoiser_hidden", c.dims.denoiser_hidden},
               {"attn", c.dims.attn},
               {"time_emb", c.dims.time_emb}};
  j["planner"] = {{"n_candidates", c.planner.n_candidates},
                  {"lambda_s", c.planner.lambda_s},
                  {"gamma", c.planner.gamma},
                  {"temperature", c.planner.temperature}};
  j["retriever"] = {{"k", c.retriever.k},
                    {"kappa", c.retriever.kappa},
                    {"normalize_query", c.retriever.normalize_query}};
  j["diffusion"] = {{"steps", c.diffusion.steps},
                    {"beta_min", c.diffusion.beta_min},
                    {"beta_max", c.diffusion.beta_max},
                    {"blocks", c.diffusion.blocks}};
  j["loss"] = {{"lambda_p", c.loss.lambda_p},
               {"lambda_e", c.loss.lambda_e},
               {"lambda_task", c.loss.lambda_task},
               {"lambda_path", c.loss.lambda_path}};
  j["train"] = {{"lr", c.train.lr},
                {"batch_size", c.train.batch_size},
                {"vae_epochs", c.train.vae_epochs},
                {"align_epochs", c.train.align_epochs},
                {"projector_epochs", c.train.projector_epochs},
                {"diffusion_epochs", c.train.diffusion_epochs},
                {"decay_factor", c.train.decay_factor},
                {"plateau_patience", c.train.plateau_patience},
                {"seed", c.train.seed}};
  j["protocol"] = {{"kind", to_string(c.protocol.kind)},
                   {"mr", c.protocol.mr},
                   {"pattern", c.protocol.pattern},
                   {"eval_seeds", c.protocol.eval_seeds}};
  j["variant"] = {{"planner_mode", to_string(c.variant.planner_mode)},
                  {"query_mode", to_string(c.variant.query_mode)},
                  {"retrieval_mode", to_string(c.variant.retrieval_mode)},
                  {"injection_mode", to_string(c.variant.injection_mode)},
                  {"task_input", to_string(c.variant.task_input)}};
  j["eval"] = {{"acc2_mode", to_string(c.eval.acc2_mode)},
               {"target_modalities", c.eval.target_modalities}};
  return j;
}

inline Config config_from_json(const Json& j) {
  Config c;
  using detail::opt;
  if (j.contains("data")) {
    const Json& d = j.at("data");
    opt(d, "latent_dim", c.data.latent_dim);
    opt(d, "modality_dims", c.data.modality_dims);
    opt(d, "obs_noise_std", c.data.obs_noise_std);
    opt(d, "score_leak", c.data.score_leak);
    opt(d, "n_train", c.data.n_train);
    opt(d, "n_val", c.data.n_val);
    opt(d, "n_test", c.data.n_test);
    opt(d, "seed", c.data.seed);
  }
  if (j.contains("dims")) {
    const Json& d = j.at("dims");
    opt(d, "d", c.dims.d);
    opt(d, "d_s", c.dims.d_s);
    opt(d, "d_z", c.dims.d_z);
    opt(d, "d_phi", c.dims.d_phi);
    opt(d, "hidden", c.dims.hidden);
    opt(d, "emb", c.dims.emb);
    opt(d, "denoiser_hidden", c.dims.denoiser_hidden);
    opt(d, "attn", c.dims.attn);
    opt(d, "time_emb", c.dims.time_emb);
  }
  if (j.contains("planner")) {
    const Json& d = j.at("planner");
    opt(d, "n_candidates", c.planner.n_candidates);
    opt(d, "lambda_s", c.planner.lambda_s);
    opt(d, "gamma", c.planner.gamma);
    opt(d, "temperature", c.planner.temperature);
  }
  if (j.contains("retriever")) {
    const Json& d = j.at("retriever");
    opt(d, "k", c.retriever.k);
    opt(d, "kappa", c.retriever.kappa);
    opt(d, "normalize_query", c.retriever.normalize_query);
  }
  if (j.contains("diffusion")) {
    const Json& d = j.at("diffusion");
    opt(d, "steps", c.diffusion.steps);
    opt(d, "beta_min", c.diffusion.beta_min);
    opt(d, "beta_max", c.diffusion.beta_max);
    opt(d, "blocks", c.diffusion.blocks);
  }
  if (j.contains("loss")) {
    const Json& d = j.at("loss");
    opt(d, "lambda_p", c.loss.lambda_p);
    opt(d, "lambda_e", c.loss.lambda_e);
    opt(d, "lambda_task", c.loss.lambda_task);
    opt(d, "lambda_path", c.loss.lambda_path);
  }
  if (j.contains("train")) {
    const Json& d = j.at("train");
    opt(d, "lr", c.train.lr);
    opt(d, "batch_size", c.train.batch_size);
    opt(d, "vae_epochs", c.train.vae_epochs);
    opt(d, "align_epochs", c.train.align_epochs);
    opt(d, "projector_epochs", c.train.projector_epochs);
    opt(d, "diffusion_epochs", c.train.diffusion_epochs);
    opt(d, "decay_factor", c.train.decay_factor);
    opt(d, "plateau_patience", c.train.plateau_patience);
    opt(d, "seed", c.train.seed);
  }
  if (j.contains("protocol")) {
    const Json& d = j.at("protocol");
    std::string kind;
    detail::opt_enum(d, "kind", kind);
    if (!kind.empty())
      c.protocol.kind = kind == "fixed" ? ProtocolKind::fixed
                        : kind == "random"
                            ? ProtocolKind::random
                            : throw ConfigError("unknown protocol kind: " + kind);
    opt(d, "mr", c.protocol.mr);
    opt(d, "pattern", c.protocol.pattern);
    opt(d, "eval_seeds", c.protocol.eval_seeds);
  }
  if (j.contains("variant")) {
    const Json& d = j.at("variant");
    std::string s;
    detail::opt_enum(d, "planner_mode", s);
    if (!s.empty())
      c.variant.planner_mode = enum_from_string(
          s, {PlannerMode::plan_driven, PlannerMode::wo_rerank, PlannerMode::wo_planner});
    s.clear();
    detail::opt_enum(d, "query_mode", s);
    if (!s.empty())
      c.variant.query_mode = enum_from_string(
          s, {QueryMode::plan_driven, QueryMode::content_only, QueryMode::random_plan});
    s.clear();
    detail::opt_enum(d, "retrieval_mode", s);
    if (!s.empty())
      c.variant.retrieval_mode = enum_from_string(
          s, {RetrievalMode::sparse_topk, RetrievalMode::mean_pool, RetrievalMode::disabled});
    s.clear();
    detail::opt_enum(d, "injection_mode", s);
    if (!s.empty())
      c.variant.injection_mode =
          enum_from_string(s, {InjectionMode::dual, InjectionMode::concat,
                               InjectionMode::reversed, InjectionMode::single_stream});
    s.clear();
    detail::opt_enum(d, "task_input", s);
    if (!s.empty())
      c.variant.task_input = enum_from_string(s, {TaskInput::tweedie, TaskInput::noisy});
  }
  if (j.contains("eval")) {
    const Json& d = j.at("eval");
    std::string s;
    detail::opt_enum(d, "acc2_mode", s);
    if (!s.empty())
      c.eval.acc2_mode = enum_from_string(
          s, {Acc2Mode::pos_vs_neg_excl_zero, Acc2Mode::nonneg_vs_neg});
    opt(d, "target_modalities", c.eval.target_modalities);
  }
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  Json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  return config_from_json(j);
}

inline uint64_t config_checksum(const Config& c) {
  std::string s = to_json(c).dump();
  return fnv1a64(s.data(), s.size());
}

// Leaf-level diff of two configs ("section.key" entries); the ablation
// runner asserts each variant touches exactly its documented knobs.
inline std::vector<std::string> config_diff(const Config& a, const Config& b) {
  Json ja = to_json(a), jb = to_json(b);
  std::vector<std::string> out;
  for (auto& [sec, val] : ja.items()) {
    for (auto& [key, v] : val.items()) {
      if (jb.at(sec).at(key) != v) out.push_back(sec + "." + key);
    }
  }
  return out;
}

}  // namespace omg
