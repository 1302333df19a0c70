#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "omg/protocol.hpp"
#include "omg/verify.hpp"

using namespace omg;
namespace fs = std::filesystem;

namespace {
Config tiny() {
  Config cfg;
  cfg.data.latent_dim = 4;
  cfg.data.modality_dims = {6, 4, 4};
  cfg.data.n_train = 60;
  cfg.data.n_val = 24;
  cfg.data.n_test = 30;
  cfg.protocol.mr = 0.5;
  cfg.protocol.eval_seeds = {1, 2};
  cfg.diffusion.steps = 12;
  cfg.train.vae_epochs = 6;
  cfg.train.align_epochs = 4;
  cfg.train.projector_epochs = 3;
  cfg.train.diffusion_epochs = 4;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(OMG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}
}  // namespace

TEST_CASE("ablation name mapping flips exactly the documented knobs") {
  Config base = tiny();
  auto expect = [&](const std::string& name, std::vector<std::string> keys) {
    Config varied = ablation_config(name, base);
    auto diff = config_diff(base, varied);
    std::sort(diff.begin(), diff.end());
    std::sort(keys.begin(), keys.end());
    INFO(name);
    REQUIRE(diff == keys);
  };
  expect("wo_planner", {"variant.planner_mode"});
  expect("wo_rerank", {"variant.planner_mode"});
  expect("wo_retriever", {"variant.retrieval_mode"});
  expect("wo_sparse_attn", {"variant.retrieval_mode"});
  expect("content_only", {"variant.query_mode"});
  expect("random_plan", {"variant.query_mode"});
  expect("concat_injection", {"variant.injection_mode"});
  expect("reversed_injection", {"variant.injection_mode"});
  expect("single_stream", {"variant.injection_mode"});
  expect("wo_lplan", {"loss.lambda_p"});
  expect("wo_levi", {"loss.lambda_e"});
  expect("wo_both", {"loss.lambda_p", "loss.lambda_e"});
  expect("wo_ltask", {"loss.lambda_task"});
  expect("direct_classification", {"variant.task_input"});
  REQUIRE_THROWS_AS(ablation_config("wo_everything", base), UnknownAblation);
  REQUIRE(ablation_names().size() == 14);
}

TEST_CASE("config JSON round trip and diff") {
  Config cfg = tiny();
  cfg.variant.injection_mode = InjectionMode::reversed;
  cfg.eval.acc2_mode = Acc2Mode::nonneg_vs_neg;
  Config back = config_from_json(to_json(cfg));
  REQUIRE(config_diff(cfg, back).empty());
  REQUIRE(config_checksum(cfg) == config_checksum(back));
  REQUIRE(back.variant.injection_mode == InjectionMode::reversed);
  // partial configs inherit defaults
  Config partial = config_from_json(Json::parse(R"({"retriever": {"k": 3}})"));
  REQUIRE(partial.retriever.k == 3);
  REQUIRE(partial.retriever.kappa == 0.07);
}

TEST_CASE("trained pipeline: protocols, records, determinism", "[training]") {
  Config cfg = tiny();
  StageCache cache;
  Trainer trainer(cfg, &cache);
  TrainOutput out = trainer.run();
  ModelBundle& m = *out.model;

  SECTION("full availability never invokes reconstruction") {
    Dataset unmasked = out.raw_test;
    EvalResult r = evaluate_masked(m, unmasked, out.raw_test, 1);
    REQUIRE(r.reconstructed == 0);
    REQUIRE(r.realized_mr == 0.0);
    // equals direct classification on encoded-observed latents
    std::vector<double> preds, truths;
    for (const auto& s : out.raw_test.samples) {
      Vec u = m.psi.encode(s);
      Vec z = m.stacks.front().vae.encode(s.features[0]).first;
      Vec logits = m.classifier.forward(fuse(u, z));
      Eigen::Index arg;
      logits.maxCoeff(&arg);
      preds.push_back(class7_to_score(int(arg)));
      truths.push_back(s.score);
    }
    REQUIRE(r.acc2 == acc2(preds, truths));
    REQUIRE(r.acc7 == acc7(preds, truths));
  }

  SECTION("random protocol at mr=0 equals the full-availability run") {
    Dataset masked = apply_random_mask(out.raw_test, 0.0, 5);
    EvalResult a = evaluate_masked(m, masked, out.raw_test, 1);
    EvalResult b = evaluate_masked(m, out.raw_test, out.raw_test, 1);
    REQUIRE(a.acc2 == b.acc2);
    REQUIRE(a.acc7 == b.acc7);
    REQUIRE(a.reconstructed == 0);
  }

  SECTION("reports store one run per seed plus their mean") {
    Json report = run_protocol(m, out.raw_test, cfg.protocol);
    REQUIRE(report.at("runs").size() == cfg.protocol.eval_seeds.size());
    double mean = 0.0;
    for (const auto& run : report.at("runs"))
      mean += run.at("metrics").at("acc2").get<double>();
    mean /= double(report.at("runs").size());
    REQUIRE(report.at("mean").at("acc2").get<double>() == Catch::Approx(mean));
    REQUIRE(report.at("config_checksum").get<uint64_t>() == config_checksum(cfg));
    // byte-for-byte reproducible
    Json again = run_protocol(m, out.raw_test, cfg.protocol);
    REQUIRE(report.dump() == again.dump());
    REQUIRE_FALSE(report_table_csv(report).empty());
    REQUIRE_FALSE(report_table_text(report).empty());
  }

  SECTION("fixed protocol iterates all 7 availability patterns") {
    ProtocolConfig fixed;
    fixed.kind = ProtocolKind::fixed;
    fixed.eval_seeds = {1};
    Json report = run_protocol(m, out.raw_test, fixed);
    REQUIRE(report.at("patterns").size() == 7);
    // the all-available pattern reconstructs nothing
    bool found_full = false;
    for (const auto& p : report.at("patterns")) {
      std::vector<int> removed = p.at("removed").get<std::vector<int>>();
      bool removes_target =
          std::find(removed.begin(), removed.end(), 0) != removed.end();
      if (removed.empty()) found_full = true;
      // only configured target modalities are reconstructed
      if (removes_target)
        REQUIRE(p.at("reconstructed").get<long>() > 0);
      else
        REQUIRE(p.at("reconstructed").get<long>() == 0);
    }
    REQUIRE(found_full);
  }

  SECTION("trajectory records carry the utility inputs") {
    Dataset masked = apply_random_mask(out.raw_test, 2.0 / 3.0, 3);
    for (int i = 0; i < 5; ++i) {
      SampleReconstruction rec =
          reconstruct_sample(m, masked.samples[size_t(i)], 100 + uint64_t(i),
                             &out.raw_test.samples[size_t(i)]);
      for (const auto& r : rec.records) {
        LossWeights w;
        w.lambda_s = cfg.planner.lambda_s;
        w.lambda_e = cfg.loss.lambda_e;
        w.lambda_path = cfg.loss.lambda_path;
        REQUIRE(std::isfinite(trajectory_utility(r, w)));
        REQUIRE(r.trajectory.states.size() == size_t(cfg.diffusion.steps + 1));
        if (!r.alpha.size()) continue;
        REQUIRE(std::abs(r.alpha.sum() - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("ablation runner semantics", "[training]") {
  Config cfg = tiny();
  cfg.protocol.eval_seeds = {1};
  StageCache cache;

  SECTION("wo_retriever produces all-zero evidence in every record") {
    Config varied = ablation_config("wo_retriever", cfg);
    Trainer trainer(varied, &cache);
    TrainOutput out = trainer.run();
    Dataset masked = apply_random_mask(out.raw_test, 2.0 / 3.0, 3);
    for (int i = 0; i < 8; ++i) {
      SampleReconstruction rec =
          reconstruct_sample(*out.model, masked.samples[size_t(i)], 55 + uint64_t(i));
      for (const auto& r : rec.records) REQUIRE(r.evidence.isZero());
    }
  }

  SECTION("sparse attention and mean pooling differ on unequal scores") {
    Trainer trainer(cfg, &cache);
    TrainOutput out = trainer.run();
    ModelBundle& m = *out.model;
    Dataset masked = apply_random_mask(out.raw_test, 2.0 / 3.0, 3);
    const ModalityStack& stack = m.stacks.front();
    bool differed = false;
    for (int i = 0; i < 10 && !differed; ++i) {
      if (masked.samples[size_t(i)].mask[0]) continue;
      Vec u = m.psi.encode(masked.samples[size_t(i)]);
      Conditioning cond = plan_sample(m, u, 7 + uint64_t(i));
      m.cfg.variant.retrieval_mode = RetrievalMode::sparse_topk;
      RetrievalOut sparse = retrieve(m, stack, u, cond);
      m.cfg.variant.retrieval_mode = RetrievalMode::mean_pool;
      RetrievalOut pooled = retrieve(m, stack, u, cond);
      m.cfg.variant.retrieval_mode = RetrievalMode::sparse_topk;
      REQUIRE(sparse.indices == pooled.indices);
      if ((sparse.evidence - pooled.evidence).cwiseAbs().maxCoeff() > 1e-12) differed = true;
    }
    REQUIRE(differed);
  }

  SECTION("stage cache does not change results") {
    Config small = cfg;
    small.train.diffusion_epochs = 2;
    Json with_cache = run_ablation("wo_lplan", small, &cache);
    Json without_cache = run_ablation("wo_lplan", small, nullptr);
    with_cache.erase("ablation");
    without_cache.erase("ablation");
    REQUIRE(with_cache.dump() == without_cache.dump());
  }
}

TEST_CASE("cli exit codes and determinism", "[cli]") {
  auto ws = (fs::temp_directory_path() / "omg_cli_ws").string();
  fs::remove_all(ws);
  auto cfg_path = ws + "/config.json";
  fs::create_directories(ws);
  {
    Config cfg = tiny();
    cfg.protocol.eval_seeds = {1};
    std::ofstream os(cfg_path);
    os << to_json(cfg).dump(2);
  }

  REQUIRE(run_cli("definitely-not-a-subcommand") == 1);
  REQUIRE(run_cli("ablate") == 1);                       // missing --name
  REQUIRE(run_cli("eval --out " + ws + "/nowhere") == 2); // no model to load
  REQUIRE(run_cli("gen-data --config " + cfg_path + " --out " + ws) == 0);
  REQUIRE(fs::exists(ws + "/dataset/meta.json"));
  REQUIRE(fs::exists(ws + "/dataset/data.ckpt"));

  REQUIRE(run_cli("train --config " + cfg_path + " --out " + ws) == 0);
  REQUIRE(fs::exists(ws + "/model/model.ckpt"));
  REQUIRE(fs::exists(ws + "/train_log.jsonl"));
  REQUIRE(run_cli("build-kb --config " + cfg_path + " --out " + ws) == 0);
  REQUIRE(fs::exists(ws + "/kb.m0/kb.meta.json"));

  REQUIRE(run_cli("eval --config " + cfg_path + " --seed 7 --out " + ws) == 0);
  std::string first = slurp(ws + "/report.json");
  REQUIRE_FALSE(first.empty());
  REQUIRE(run_cli("eval --config " + cfg_path + " --seed 7 --out " + ws) == 0);
  REQUIRE(slurp(ws + "/report.json") == first);  // byte-identical reports
  REQUIRE(run_cli("report --out " + ws) == 0);
  REQUIRE(fs::exists(ws + "/tables/metrics.csv"));
  fs::remove_all(ws);
}
