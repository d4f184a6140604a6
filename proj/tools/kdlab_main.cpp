#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "kdlab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation lab: theory checks, compression and incremental-learning experiments"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  auto* verify = app.add_subcommand("verify", "Run the numerical theory checks and print JSON reports");
  verify->add_option("--seed", seed, "Seed for the random instances");

  std::string config;
  std::string variant;
  std::string method;
  std::string in_dir;

  auto* teacher = app.add_subcommand("train-teacher", "Train and checkpoint the teacher");
  teacher->add_option("-c,--config", config, "Experiment config (JSON)")->required();

  auto* distill = app.add_subcommand("distill", "Distill one student per seed with a criterion");
  distill->add_option("-c,--config", config, "Experiment config (JSON)")->required();
  distill->add_option("--variant", variant, "vanilla, FeaturesSE, WeightedEFeaturesSE, WeightedHFeaturesSE, "
                                            "LogitsSE, CombinedBC or HintonKD")
      ->required();

  auto* sweep = app.add_subcommand("sweep-width", "Sweep the student feature width and compute RPR");
  sweep->add_option("-c,--config", config, "Experiment config (JSON)")->required();

  auto* incremental = app.add_subcommand("incremental", "Task-incremental learning over class-split tasks");
  incremental->add_option("-c,--config", config, "Experiment config (JSON)")->required();
  incremental->add_option("--method", method, "One method; every configured method when omitted");

  auto* report = app.add_subcommand("report", "Regenerate summaries from the raw CSV files of a results directory");
  report->add_option("--in", in_dir, "Results directory")->required();

  CLI11_PARSE(app, argc, argv);

  namespace exp = kdlab::exp;
  try {
    if (verify->parsed()) return exp::cmd_verify(seed, std::cout);
    if (report->parsed()) return exp::cmd_report(in_dir, std::cerr);
    const auto spec = exp::parse_config(config);
    if (teacher->parsed()) return exp::cmd_train_teacher(spec, std::cerr);
    if (distill->parsed()) return exp::cmd_distill(spec, variant, std::cerr);
    if (sweep->parsed()) return exp::cmd_sweep_width(spec, std::cerr);
    if (incremental->parsed()) return exp::cmd_incremental(spec, method, std::cerr);
  } catch (const exp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
