#pragma once

// Protocol runners and the ablation suite. Reports are JSON with enough
// config and seed material embedded to reproduce them byte-for-byte.

#include <string>
#include <vector>

#include "omg/metrics.hpp"
#include "omg/pipeline.hpp"
#include "omg/train.hpp"

namespace omg {

struct EvalResult {
  double acc2 = 0.0, f1 = 0.0, acc7 = 0.0;
  double realized_mr = 0.0;
  long reconstructed = 0;   // # (sample, modality) pairs run through the workflow
  double recon_mse = 0.0;   // vs the generator's ground truth, masked slots only
  double zero_mse = 0.0;    // zero-imputation baseline on the same slots
  double mean_mse = 0.0;    // train-mean imputation baseline
};

// Reconstruct + classify every sample of a masked test set.
inline EvalResult evaluate_masked(const ModelBundle& m, const Dataset& masked,
                                  const Dataset& raw, uint64_t eval_seed) {
  if (masked.size() != raw.size()) throw ShapeMismatch("masked/raw test sets misaligned");
  EvalResult res;
  res.realized_mr = missing_rate(masked);
  std::vector<double> preds, truths;
  double se_model = 0, se_zero = 0, se_mean = 0;
  long n_coords = 0;
  for (size_t i = 0; i < masked.size(); ++i) {
    SampleReconstruction rec = reconstruct_sample(
        m, masked.samples[i], Rng::mix(eval_seed ^ (0x5eed0000 + uint64_t(i))),
        &raw.samples[i]);
    preds.push_back(rec.pred_score);
    truths.push_back(raw.samples[i].score);
    for (const auto& r : rec.records) {
      const Vec& truth = raw.samples[i].features[size_t(r.target_modality)];
      se_model += (r.y_hat - truth).squaredNorm();
      se_zero += truth.squaredNorm();
      se_mean += (m.train_feature_means[size_t(r.target_modality)] - truth).squaredNorm();
      n_coords += truth.size();
      ++res.reconstructed;
    }
  }
  res.acc2 = acc2(preds, truths, m.cfg.eval.acc2_mode);
  res.f1 = f1(preds, truths, m.cfg.eval.acc2_mode);
  res.acc7 = acc7(preds, truths);
  if (n_coords > 0) {
    res.recon_mse = se_model / double(n_coords);
    res.zero_mse = se_zero / double(n_coords);
    res.mean_mse = se_mean / double(n_coords);
  }
  return res;
}

inline Json metrics_json(const EvalResult& r) {
  Json j;
  j["acc2"] = r.acc2;
  j["f1"] = r.f1;
  j["acc7"] = r.acc7;
  return j;
}

// Fixed protocol: iterate every availability pattern. Random protocol: one
// run per eval seed plus their mean.
inline Json run_protocol(const ModelBundle& m, const Dataset& raw_test,
                         const ProtocolConfig& proto) {
  Json report;
  report["protocol"] = {{"kind", to_string(proto.kind)},
                        {"mr", proto.mr},
                        {"pattern", proto.pattern},
                        {"eval_seeds", proto.eval_seeds}};
  report["config"] = to_json(m.cfg);
  report["config_checksum"] = config_checksum(m.cfg);
  report["model_seed"] = m.cfg.train.seed;
  if (proto.kind == ProtocolKind::fixed) {
    Json patterns = Json::array();
    double a2 = 0, f = 0, a7 = 0;
    auto all = enumerate_fixed_patterns(raw_test.n_modalities());
    for (const auto& removed : all) {
      Dataset masked = apply_fixed_mask(raw_test, removed);
      EvalResult r = evaluate_masked(m, masked, raw_test, proto.eval_seeds.at(0));
      Json p;
      p["removed"] = removed;
      p["metrics"] = metrics_json(r);
      p["realized_mr"] = r.realized_mr;
      p["reconstructed"] = r.reconstructed;
      patterns.push_back(std::move(p));
      a2 += r.acc2;
      f += r.f1;
      a7 += r.acc7;
    }
    report["patterns"] = std::move(patterns);
    double n = double(all.size());
    report["mean"] = {{"acc2", a2 / n}, {"f1", f / n}, {"acc7", a7 / n}};
  } else {
    Json runs = Json::array();
    double a2 = 0, f = 0, a7 = 0;
    for (uint64_t seed : proto.eval_seeds) {
      Dataset masked = apply_random_mask(raw_test, proto.mr, seed);
      EvalResult r = evaluate_masked(m, masked, raw_test, seed);
      Json run;
      run["seed"] = seed;
      run["realized_mr"] = r.realized_mr;
      run["metrics"] = metrics_json(r);
      run["reconstructed"] = r.reconstructed;
      run["recon"] = {{"model_mse", r.recon_mse},
                      {"zero_mse", r.zero_mse},
                      {"mean_mse", r.mean_mse}};
      runs.push_back(std::move(run));
      a2 += r.acc2;
      f += r.f1;
      a7 += r.acc7;
    }
    double n = double(proto.eval_seeds.size());
    report["runs"] = std::move(runs);
    report["mean"] = {{"acc2", a2 / n}, {"f1", f / n}, {"acc7", a7 / n}};
  }
  return report;
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {
      "wo_planner",       "wo_rerank",          "wo_retriever",
      "wo_sparse_attn",   "content_only",       "random_plan",
      "concat_injection", "reversed_injection", "single_stream",
      "wo_lplan",         "wo_levi",            "wo_both",
      "wo_ltask",         "direct_classification"};
  return names;
}

// Base config -> variant config; every variant flips exactly its documented
// knob(s) and nothing else (asserted by the config-diff test).
inline Config ablation_config(const std::string& name, const Config& base) {
  Config c = base;
  if (name == "wo_planner") c.variant.planner_mode = PlannerMode::wo_planner;
  else if (name == "wo_rerank") c.variant.planner_mode = PlannerMode::wo_rerank;
  else if (name == "wo_retriever") c.variant.retrieval_mode = RetrievalMode::disabled;
  else if (name == "wo_sparse_attn") c.variant.retrieval_mode = RetrievalMode::mean_pool;
  else if (name == "content_only") c.variant.query_mode = QueryMode::content_only;
  else if (name == "random_plan") c.variant.query_mode = QueryMode::random_plan;
  else if (name == "concat_injection") c.variant.injection_mode = InjectionMode::concat;
  else if (name == "reversed_injection") c.variant.injection_mode = InjectionMode::reversed;
  else if (name == "single_stream") c.variant.injection_mode = InjectionMode::single_stream;
  else if (name == "wo_lplan") c.loss.lambda_p = 0.0;
  else if (name == "wo_levi") c.loss.lambda_e = 0.0;
  else if (name == "wo_both") { c.loss.lambda_p = 0.0; c.loss.lambda_e = 0.0; }
  else if (name == "wo_ltask") c.loss.lambda_task = 0.0;
  else if (name == "direct_classification") c.variant.task_input = TaskInput::noisy;
  else throw UnknownAblation(name);
  return c;
}

// Train and evaluate one variant; shared stages may come from the cache.
inline Json run_variant(const Config& cfg, StageCache* cache = nullptr) {
  Trainer trainer(cfg, cache);
  TrainOutput t = trainer.run();
  Json report = run_protocol(*t.model, t.raw_test, cfg.protocol);
  return report;
}

inline Json run_ablation(const std::string& name, const Config& base,
                         StageCache* cache = nullptr) {
  Config cfg = ablation_config(name, base);
  Json report = run_variant(cfg, cache);
  report["ablation"] = name;
  return report;
}

// ---- plain-text / CSV rendering of a report ----

inline std::string report_table_csv(const Json& report) {
  std::string csv = "run,acc2,f1,acc7,realized_mr\n";
  auto row = [&](const std::string& label, const Json& metrics, double mr) {
    csv += label + "," + std::to_string(metrics.at("acc2").get<double>()) + "," +
           std::to_string(metrics.at("f1").get<double>()) + "," +
           std::to_string(metrics.at("acc7").get<double>()) + "," +
           std::to_string(mr) + "\n";
  };
  if (report.contains("runs")) {
    for (const auto& run : report.at("runs"))
      row("seed" + std::to_string(run.at("seed").get<uint64_t>()), run.at("metrics"),
          run.at("realized_mr").get<double>());
  }
  if (report.contains("patterns")) {
    for (const auto& p : report.at("patterns")) {
      std::string label = "removed";
      for (const auto& r : p.at("removed")) label += "_" + std::to_string(r.get<int>());
      row(label, p.at("metrics"), p.at("realized_mr").get<double>());
    }
  }
  if (report.contains("mean")) row("mean", report.at("mean"), 0.0);
  return csv;
}

inline std::string report_table_text(const Json& report) {
  std::string txt;
  auto line = [&](const std::string& label, const Json& metrics) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-16s acc2=%.4f f1=%.4f acc7=%.4f\n", label.c_str(),
                  metrics.at("acc2").get<double>(), metrics.at("f1").get<double>(),
                  metrics.at("acc7").get<double>());
    txt += buf;
  };
  if (report.contains("runs"))
    for (const auto& run : report.at("runs"))
      line("seed " + std::to_string(run.at("seed").get<uint64_t>()), run.at("metrics"));
  if (report.contains("patterns"))
    for (const auto& p : report.at("patterns")) {
      std::string label = "removed {";
      for (const auto& r : p.at("removed")) label += std::to_string(r.get<int>()) + " ";
      label += "}";
      line(label, p.at("metrics"));
    }
  if (report.contains("mean")) line("mean", report.at("mean"));
  return txt;
}

}  // namespace omg
