// Command-line harness for the sparse patch-coding defense pipeline.
//
// Subcommands map onto pipeline stages:
//   run         all stages listed in the config
//   learn-dict  dictionary learning only
//   train       one or all model trainings (--model)
//   attack      craft the configured attack suite
//   eval        accuracy / corruption / correlation artifacts
//   report      print the consolidated report for an output directory
//   gen-data    write synthetic CIFAR-format batch files
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// divergence.

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spc/experiment.hpp"

namespace {

spc::Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw spc::ConfigError("cannot open config file: " + path);
  spc::Json j;
  try {
    in >> j;
  } catch (const spc::Json::exception& e) {
    throw spc::ConfigError("config parse error in " + path + ": " + e.what());
  }
  return j;
}

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
  bool deterministic = false;

  spc::ProjectConfig load() const {
    spc::Json j = read_json_file(config);
    for (const std::string& kv : sets) spc::apply_override(j, kv);
    spc::ProjectConfig cfg = spc::parse_config(j);
    if (seed_given) cfg.seed = seed;
    if (threads > 0) cfg.threads = threads;
    if (deterministic) cfg.threads = 1;
    return cfg;
  }
};

void add_common(CLI::App* sub, CommonArgs& a, bool needs_config) {
  if (needs_config)
    sub->add_option("-c,--config", a.config, "config file (JSON)")->required();
  sub->add_option("-o,--out", a.out, "output directory");
  if (needs_config) {
    sub->add_option("-s,--set", a.sets,
                    "dotted config override, e.g. training.epochs=5");
    sub->add_option("--seed", a.seed, "override the config seed")
        ->each([&a](const std::string&) { a.seed_given = true; });
    sub->add_option("--threads", a.threads, "worker threads (>=1)");
    sub->add_flag("--deterministic", a.deterministic,
                  "force single-threaded execution");
  }
}

int run_stages(const CommonArgs& args,
               const std::vector<std::string>& stages) {
  spc::ProjectConfig cfg = args.load();
  if (!stages.empty()) cfg.experiment.stages = stages;
  spc::RunSummary sum = spc::run_experiment(cfg, args.out);
  std::cout << "completed";
  for (const std::string& s : sum.stages_completed) std::cout << ' ' << s;
  std::cout << "\nartifacts in " << sum.out_dir << ": " << sum.artifacts.size()
            << '\n';
  return 0;
}

void write_bytes(const std::string& path, const std::uint8_t* data,
                 std::size_t len) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw spc::DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data), static_cast<long>(len));
  if (!out) throw spc::DataError("short write: " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "sparse patch-coding defense: dictionary, training, attacks, reports"};
  app.require_subcommand(1);

  CommonArgs run_a, dict_a, train_a, attack_a, eval_a, report_a;
  std::string train_model = "all";

  CLI::App* run = app.add_subcommand("run", "run the config's stage list");
  add_common(run, run_a, true);

  CLI::App* dict = app.add_subcommand("learn-dict", "learn the dictionary");
  add_common(dict, dict_a, true);

  CLI::App* train = app.add_subcommand("train", "train model(s)");
  add_common(train, train_a, true);
  train
      ->add_option("-m,--model", train_model,
                   "natural | defense | sibling | adversarial | all")
      ->check(CLI::IsMember(
          {"natural", "defense", "sibling", "adversarial", "all"}));

  CLI::App* attack = app.add_subcommand("attack", "craft the attack suite");
  add_common(attack, attack_a, true);

  CLI::App* eval = app.add_subcommand("eval", "evaluate models and attacks");
  add_common(eval, eval_a, true);

  CLI::App* report =
      app.add_subcommand("report", "print the consolidated report");
  add_common(report, report_a, false);

  std::string gen_out = "data";
  int gen_train = 5000, gen_eval = 1000, gen_side = 32;
  std::uint64_t gen_seed = 1;
  CLI::App* gen =
      app.add_subcommand("gen-data", "write synthetic CIFAR-format batches");
  gen->add_option("-o,--out", gen_out, "output directory");
  gen->add_option("--train", gen_train, "training images across 5 batches");
  gen->add_option("--eval", gen_eval, "test-batch images");
  gen->add_option("--side", gen_side, "image side length");
  gen->add_option("--seed", gen_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (run->parsed()) return run_stages(run_a, {});
    if (dict->parsed()) return run_stages(dict_a, {"learn-dictionary"});
    if (train->parsed()) {
      std::vector<std::string> stages;
      if (train_model == "all")
        stages = {"train-natural", "train-defense", "train-sibling",
                  "train-adversarial"};
      else
        stages = {"train-" + train_model};
      return run_stages(train_a, stages);
    }
    if (attack->parsed()) return run_stages(attack_a, {"attacks"});
    if (eval->parsed()) return run_stages(eval_a, {"evaluate"});
    if (report->parsed()) {
      std::cout << spc::emit_report(report_a.out);
      return 0;
    }
    if (gen->parsed()) {
      if (gen_train < 5 || gen_eval < 1 || gen_side < 2)
        throw spc::ConfigError("gen-data extents out of range");
      std::filesystem::create_directories(gen_out);
      const std::vector<std::uint8_t> train_bytes =
          spc::synth_cifar_records(gen_train, gen_side, gen_seed, 0);
      const std::size_t rec = spc::cifar_record_bytes(gen_side);
      std::size_t off = 0;
      for (int b = 1; b <= 5; ++b) {
        // Records split as evenly as the count allows, batch 5 is smallest.
        const std::size_t take =
            rec * static_cast<std::size_t>(
                      (gen_train * b) / 5 - (gen_train * (b - 1)) / 5);
        write_bytes(gen_out + "/data_batch_" + std::to_string(b) + ".bin",
                    train_bytes.data() + off, take);
        off += take;
      }
      const std::vector<std::uint8_t> eval_bytes =
          spc::synth_cifar_records(gen_eval, gen_side, gen_seed, 1);
      write_bytes(gen_out + "/test_batch.bin", eval_bytes.data(),
                  eval_bytes.size());
      std::cout << "wrote " << gen_train << " train + " << gen_eval
                << " eval images (side " << gen_side << ") to " << gen_out
                << '\n';
      return 0;
    }
  } catch (const spc::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const spc::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const spc::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
