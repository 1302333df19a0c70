#pragma once

// Synthetic multimodal data with a known generative process, plus the
// fixed/random missingness protocols. The generator maps are stored with
// the dataset so oracles can reproduce any feature vector exactly.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "omg/checkpoint.hpp"
#include "omg/config.hpp"
#include "omg/error.hpp"
#include "omg/mathutil.hpp"
#include "omg/rng.hpp"

namespace omg {

struct SyntheticConfig {
  int latent_dim = 8;
  std::vector<int> modality_dims = {16, 8, 8};
  double obs_noise_std = 0.05;
  // attenuation of the score direction inside the feature maps: features
  // mostly encode non-score latent structure, so observation similarity is
  // a weak proxy for sentiment (the regime the retrieval strategies differ in)
  double score_leak = 1.0;
  int n_train = 800;
  int n_val = 200;
  int n_test = 400;
  uint64_t seed = 1;

  void validate() const {
    if (modality_dims.size() < 2) throw ConfigError("need at least 2 modalities");
    if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
    for (int d : modality_dims)
      if (d < 1) throw ConfigError("modality dims must be positive");
    if (obs_noise_std < 0) throw ConfigError("obs_noise_std must be >= 0");
    if (score_leak <= 0 || score_leak > 1) throw ConfigError("score_leak must be in (0, 1]");
    if (n_train < 1 || n_val < 1 || n_test < 1)
      throw ConfigError("split sizes must be positive");
  }

  static SyntheticConfig from(const DataConfig& d) {
    return SyntheticConfig{d.latent_dim, d.modality_dims, d.obs_noise_std,
                           d.score_leak, d.n_train,       d.n_val,
                           d.n_test,     d.seed};
  }
};

struct MultimodalSample {
  std::vector<Vec> features;     // per modality; masked slots hold the zero sentinel
  std::vector<uint8_t> mask;     // 1 = observed
  double score = 0.0;            // in [-3, 3]
  Vec latent;                    // generator hidden state; oracle use only

  int observed_count() const {
    return static_cast<int>(std::accumulate(mask.begin(), mask.end(), 0));
  }
};

struct GeneratorMaps {
  std::vector<Mat> w;  // per modality, dim_m x latent_dim
  std::vector<Vec> b;
  Vec w_y;             // score direction
  double c_norm = 2.5; // scales w_y.h/|w_y| so scores span [-3, 3]
};

struct Dataset {
  SyntheticConfig config;
  GeneratorMaps gen;
  std::vector<MultimodalSample> samples;

  int n_modalities() const { return static_cast<int>(config.modality_dims.size()); }
  size_t size() const { return samples.size(); }
};

// Noise-free regeneration of one modality from a latent; the oracle half
// of the generator contract.
inline Vec regenerate_feature(const GeneratorMaps& gen, const Vec& latent, int m) {
  return (gen.w[static_cast<size_t>(m)] * latent + gen.b[static_cast<size_t>(m)])
      .array()
      .tanh()
      .matrix();
}

inline double score_from_latent(const GeneratorMaps& gen, const Vec& latent) {
  double raw = gen.w_y.dot(latent) * 3.0 / (gen.w_y.norm() * gen.c_norm);
  return std::clamp(raw, -3.0, 3.0);
}

inline Dataset generate_dataset(const SyntheticConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  int m_count = static_cast<int>(config.modality_dims.size());

  Rng gen_rng = Rng::stream(config.seed, 0xab5e11);
  ds.gen.w_y = gaussian_vec(config.latent_dim, gen_rng);
  ds.gen.c_norm = 2.5;
  Vec w_y_hat = ds.gen.w_y / ds.gen.w_y.norm();
  ds.gen.w.resize(static_cast<size_t>(m_count));
  ds.gen.b.resize(static_cast<size_t>(m_count));
  for (int m = 0; m < m_count; ++m) {
    int dm = config.modality_dims[static_cast<size_t>(m)];
    Mat w(dm, config.latent_dim);
    for (int i = 0; i < dm; ++i)
      for (int j = 0; j < config.latent_dim; ++j)
        w(i, j) = gen_rng.normal() / std::sqrt(double(config.latent_dim));
    // keep only score_leak of the score direction in the feature map
    w -= (1.0 - config.score_leak) * (w * w_y_hat) * w_y_hat.transpose();
    ds.gen.w[static_cast<size_t>(m)] = w;
    Vec b(dm);
    for (int i = 0; i < dm; ++i) b[i] = 0.3 * gen_rng.normal();
    ds.gen.b[static_cast<size_t>(m)] = b;
  }

  int n_total = config.n_train + config.n_val + config.n_test;
  ds.samples.reserve(static_cast<size_t>(n_total));
  for (int i = 0; i < n_total; ++i) {
    // independent stream per sample: generation order never matters
    Rng rng = Rng::stream(config.seed, 0x5a3f00 + static_cast<uint64_t>(i));
    MultimodalSample s;
    s.latent = gaussian_vec(config.latent_dim, rng);
    s.features.resize(static_cast<size_t>(m_count));
    s.mask.assign(static_cast<size_t>(m_count), 1);
    for (int m = 0; m < m_count; ++m) {
      Vec x = regenerate_feature(ds.gen, s.latent, m);
      if (config.obs_noise_std > 0) {
        for (Eigen::Index j = 0; j < x.size(); ++j)
          x[j] += config.obs_noise_std * rng.normal();
      }
      s.features[static_cast<size_t>(m)] = x;
    }
    s.score = score_from_latent(ds.gen, s.latent);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// train/val/test views (copies; datasets are small)
inline Dataset slice_dataset(const Dataset& ds, int begin, int count) {
  Dataset out;
  out.config = ds.config;
  out.gen = ds.gen;
  out.samples.assign(ds.samples.begin() + begin, ds.samples.begin() + begin + count);
  return out;
}
inline Dataset train_split(const Dataset& ds) { return slice_dataset(ds, 0, ds.config.n_train); }
inline Dataset val_split(const Dataset& ds) {
  return slice_dataset(ds, ds.config.n_train, ds.config.n_val);
}
inline Dataset test_split(const Dataset& ds) {
  return slice_dataset(ds, ds.config.n_train + ds.config.n_val, ds.config.n_test);
}

inline void zero_out_masked(MultimodalSample& s) {
  for (size_t m = 0; m < s.mask.size(); ++m)
    if (!s.mask[m]) s.features[m].setZero();
}

inline Dataset apply_fixed_mask(const Dataset& ds, const std::vector<int>& removed) {
  int m_count = ds.n_modalities();
  std::vector<uint8_t> mask(static_cast<size_t>(m_count), 1);
  for (int r : removed) {
    if (r < 0 || r >= m_count) throw ConfigError("pattern index out of range");
    mask[static_cast<size_t>(r)] = 0;
  }
  if (std::accumulate(mask.begin(), mask.end(), 0) == 0)
    throw AllMissing("fixed pattern removes every modality");
  Dataset out = ds;
  for (auto& s : out.samples) {
    s.mask = mask;
    zero_out_masked(s);
  }
  return out;
}

// Per sample, the number of missing modalities is floor(mr*M) or ceil(mr*M),
// mixed so the expectation equals mr*M exactly; which modalities go missing
// is uniform. At least one modality always stays observed.
inline Dataset apply_random_mask(const Dataset& ds, double mr, uint64_t seed) {
  int m_count = ds.n_modalities();
  double max_mr = double(m_count - 1) / double(m_count);
  if (mr < 0.0 || mr > max_mr + 1e-12)
    throw RateOutOfRange("mr " + std::to_string(mr) + " exceeds (M-1)/M");
  Dataset out = ds;
  double mu = mr * m_count;
  int lo = static_cast<int>(std::floor(mu));
  double frac = mu - lo;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    Rng rng = Rng::stream(seed, 0x6d61736b + static_cast<uint64_t>(i));
    int n_missing = lo + (rng.uniform() < frac ? 1 : 0);
    n_missing = std::min(n_missing, m_count - 1);  // rejection of all-missing
    auto& s = out.samples[i];
    s.mask.assign(static_cast<size_t>(m_count), 1);
    // partial Fisher-Yates over modality indices
    std::vector<int> idx(static_cast<size_t>(m_count));
    std::iota(idx.begin(), idx.end(), 0);
    for (int k = 0; k < n_missing; ++k) {
      int j = k + rng.uniform_int(m_count - k);
      std::swap(idx[static_cast<size_t>(k)], idx[static_cast<size_t>(j)]);
      s.mask[static_cast<size_t>(idx[static_cast<size_t>(k)])] = 0;
    }
    zero_out_masked(s);
  }
  return out;
}

inline double missing_rate(const Dataset& ds) {
  if (ds.samples.empty()) throw EmptyDataset("missing_rate of empty dataset");
  long observed = 0;
  for (const auto& s : ds.samples) observed += s.observed_count();
  double total = double(ds.samples.size()) * double(ds.n_modalities());
  return 1.0 - double(observed) / total;
}

// All 2^M - 1 non-empty availability patterns, as removed-index sets, ordered
// by observed count ascending then lexicographically (full availability last).
inline std::vector<std::vector<int>> enumerate_fixed_patterns(int m_count) {
  std::vector<std::vector<int>> out;
  for (int bits = 1; bits < (1 << m_count); ++bits) {
    std::vector<int> removed;
    for (int m = 0; m < m_count; ++m)
      if (!(bits & (1 << m))) removed.push_back(m);
    out.push_back(std::move(removed));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a < b;
  });
  return out;
}

// ---- persistence: directory with meta.json + data.ckpt ----

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Checkpoint ckpt;
  int m_count = ds.n_modalities();
  for (int m = 0; m < m_count; ++m) {
    Mat feats(static_cast<Eigen::Index>(ds.samples.size()),
              ds.config.modality_dims[static_cast<size_t>(m)]);
    for (size_t i = 0; i < ds.samples.size(); ++i)
      feats.row(static_cast<Eigen::Index>(i)) = ds.samples[i].features[static_cast<size_t>(m)];
    ckpt["features.m" + std::to_string(m)] = Tensor::from_mat(feats);
    ckpt["gen.w" + std::to_string(m)] = Tensor::from_mat(ds.gen.w[static_cast<size_t>(m)]);
    ckpt["gen.b" + std::to_string(m)] = Tensor::from_vec(ds.gen.b[static_cast<size_t>(m)]);
  }
  Mat mask(static_cast<Eigen::Index>(ds.samples.size()), m_count);
  Vec scores(static_cast<Eigen::Index>(ds.samples.size()));
  Mat latents(static_cast<Eigen::Index>(ds.samples.size()), ds.config.latent_dim);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    for (int m = 0; m < m_count; ++m)
      mask(static_cast<Eigen::Index>(i), m) = ds.samples[i].mask[static_cast<size_t>(m)];
    scores[static_cast<Eigen::Index>(i)] = ds.samples[i].score;
    latents.row(static_cast<Eigen::Index>(i)) = ds.samples[i].latent;
  }
  ckpt["mask"] = Tensor::from_mat(mask);
  ckpt["score"] = Tensor::from_vec(scores);
  ckpt["latent"] = Tensor::from_mat(latents);
  ckpt["gen.w_y"] = Tensor::from_vec(ds.gen.w_y);
  ckpt["gen.c_norm"] = Tensor::from_scalar(ds.gen.c_norm);
  save_checkpoint(ckpt, dir + "/data.ckpt");

  Json meta;
  meta["config"] = {{"latent_dim", ds.config.latent_dim},
                    {"modality_dims", ds.config.modality_dims},
                    {"obs_noise_std", ds.config.obs_noise_std},
                    {"score_leak", ds.config.score_leak},
                    {"n_train", ds.config.n_train},
                    {"n_val", ds.config.n_val},
                    {"n_test", ds.config.n_test},
                    {"seed", ds.config.seed}};
  Json checksums;
  for (const auto& [name, t] : ckpt) checksums[name] = t.checksum();
  meta["checksums"] = checksums;
  std::ofstream os(dir + "/meta.json");
  os << meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream is(dir + "/meta.json");
  if (!is) throw RuntimeFailure("cannot open " + dir + "/meta.json");
  Json meta;
  is >> meta;
  Dataset ds;
  const Json& c = meta.at("config");
  ds.config.latent_dim = c.at("latent_dim").get<int>();
  ds.config.modality_dims = c.at("modality_dims").get<std::vector<int>>();
  ds.config.obs_noise_std = c.at("obs_noise_std").get<double>();
  ds.config.score_leak = c.at("score_leak").get<double>();
  ds.config.n_train = c.at("n_train").get<int>();
  ds.config.n_val = c.at("n_val").get<int>();
  ds.config.n_test = c.at("n_test").get<int>();
  ds.config.seed = c.at("seed").get<uint64_t>();

  Checkpoint ckpt = load_checkpoint(dir + "/data.ckpt");
  for (const auto& [name, t] : ckpt) {
    uint64_t expected = meta.at("checksums").at(name).get<uint64_t>();
    if (t.checksum() != expected)
      throw CorruptCheckpoint("checksum mismatch for tensor " + name);
  }
  int m_count = static_cast<int>(ds.config.modality_dims.size());
  Mat mask = ckpt.at("mask").to_mat();
  Vec scores = ckpt.at("score").to_vec();
  Mat latents = ckpt.at("latent").to_mat();
  std::vector<Mat> feats;
  for (int m = 0; m < m_count; ++m) {
    feats.push_back(ckpt.at("features.m" + std::to_string(m)).to_mat());
    ds.gen.w.push_back(ckpt.at("gen.w" + std::to_string(m)).to_mat());
    ds.gen.b.push_back(ckpt.at("gen.b" + std::to_string(m)).to_vec());
  }
  ds.gen.w_y = ckpt.at("gen.w_y").to_vec();
  ds.gen.c_norm = ckpt.at("gen.c_norm").to_scalar();
  size_t n = static_cast<size_t>(scores.size());
  ds.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    s.mask.resize(static_cast<size_t>(m_count));
    s.features.resize(static_cast<size_t>(m_count));
    for (int m = 0; m < m_count; ++m) {
      s.mask[static_cast<size_t>(m)] =
          mask(static_cast<Eigen::Index>(i), m) != 0.0 ? 1 : 0;
      s.features[static_cast<size_t>(m)] =
          feats[static_cast<size_t>(m)].row(static_cast<Eigen::Index>(i));
    }
    s.score = scores[static_cast<Eigen::Index>(i)];
    s.latent = latents.row(static_cast<Eigen::Index>(i));
  }
  return ds;
}

inline uint64_t dataset_checksum(const Dataset& ds) {
  uint64_t h = 0xcbf29ce484222325ull;
  h = fnv1a64(&ds.config.seed, sizeof(ds.config.seed), h);
  for (const auto& s : ds.samples) {
    h = fnv1a64(s.mask.data(), s.mask.size(), h);
    h = fnv1a64(&s.score, sizeof(s.score), h);
    for (const auto& f : s.features)
      h = fnv1a64(f.data(), static_cast<size_t>(f.size()) * sizeof(double), h);
  }
  return h;
}

}  // namespace omg
