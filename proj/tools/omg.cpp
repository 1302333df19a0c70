// Command-line shell: data generation, training, evaluation, ablations,
// property verification, and report rendering. Exit codes: 0 success,
// 1 validation/usage error, 2 runtime failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "omg/protocol.hpp"
#include "omg/verify.hpp"

namespace fs = std::filesystem;
using namespace omg;

namespace {

Config load_or_default(const std::string& path) {
  if (path.empty()) return Config{};
  return load_config(path);
}

void write_text(const std::string& path, const std::string& body) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path);
  os << body;
}

void write_report(const Json& report, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir + "/report.json", report.dump(2) + "\n");
  write_text(out_dir + "/tables/metrics.csv", report_table_csv(report));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"missing-modality reconstruction workbench"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path, out_dir = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "JSON config (defaults used when absent)");
  app.add_option("--out", out_dir, "workspace directory");
  app.add_option("--seed", seed, "seed override")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* cmd_gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* cmd_kb = app.add_subcommand("build-kb", "build knowledge bases from a trained model");
  auto* cmd_train = app.add_subcommand("train", "run the staged training pipeline");
  auto* cmd_eval = app.add_subcommand("eval", "evaluate the configured protocol");
  auto* cmd_ablate = app.add_subcommand("ablate", "train + evaluate one ablation variant");
  std::string ablation_name;
  cmd_ablate->add_option("--name", ablation_name, "ablation variant")->required();
  auto* cmd_verify = app.add_subcommand("verify", "run the property suite");
  auto* cmd_report = app.add_subcommand("report", "render <out>/report.json as text + CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // help/version exit cleanly, usage errors are validation
  }

  try {
    Config cfg = load_or_default(config_path);
    if (seed_set) cfg.train.seed = seed;

    if (cmd_gen->parsed()) {
      if (seed_set) cfg.data.seed = seed;
      Dataset ds = generate_dataset(SyntheticConfig::from(cfg.data));
      save_dataset(ds, out_dir + "/dataset");
      std::printf("wrote %s/dataset (%zu samples)\n", out_dir.c_str(), ds.size());
    } else if (cmd_train->parsed()) {
      Trainer trainer(cfg);
      TrainOutput t = trainer.run(out_dir);
      save_model(*t.model, out_dir + "/model");
      std::printf("trained model -> %s/model (train log: %s/train_log.jsonl)\n",
                  out_dir.c_str(), out_dir.c_str());
    } else if (cmd_kb->parsed()) {
      auto model = load_model(out_dir + "/model");
      Dataset raw = train_split(generate_dataset(SyntheticConfig::from(model->cfg.data)));
      for (auto& stack : model->stacks) {
        KnowledgeBase kb = build_kb(raw, model->psi, model->g, stack.vae, stack.modality);
        save_kb(kb, out_dir + "/kb.m" + std::to_string(stack.modality),
                model->cfg.retriever.kappa, model->cfg.retriever.k);
        std::printf("kb.m%d: %d entries\n", stack.modality, kb.size());
      }
    } else if (cmd_eval->parsed()) {
      auto model = load_model(out_dir + "/model");
      if (seed_set) model->cfg.protocol.eval_seeds = {seed};
      Dataset raw_test = test_split(generate_dataset(SyntheticConfig::from(model->cfg.data)));
      Json report = run_protocol(*model, raw_test, model->cfg.protocol);
      write_report(report, out_dir);
      std::printf("%s", report_table_text(report).c_str());
    } else if (cmd_ablate->parsed()) {
      Json report = run_ablation(ablation_name, cfg);
      write_report(report, out_dir + "/ablation_" + ablation_name);
      std::printf("%s", report_table_text(report).c_str());
    } else if (cmd_verify->parsed()) {
      bool all = true;
      for (const PropertyResult& r : run_all_properties()) {
        std::printf("[%s] %-28s %s (%.2fs)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.c_str(), r.seconds);
        all = all && r.pass;
      }
      return all ? 0 : 2;
    } else if (cmd_report->parsed()) {
      std::ifstream is(out_dir + "/report.json");
      if (!is) throw ValidationError("no report.json under " + out_dir);
      Json report;
      is >> report;
      write_text(out_dir + "/tables/metrics.csv", report_table_csv(report));
      std::printf("%s", report_table_text(report).c_str());
    }
    return 0;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
