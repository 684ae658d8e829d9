// cfbench: benchmark CLI. Exit codes: 0 success, 2 config error, 3 stage failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfbench/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

cfbench::BenchmarkConfig load_config(const std::string& path,
                                     const std::vector<std::string>& overrides) {
  return cfbench::BenchmarkConfig::load(path, overrides);
}

const cfbench::ModelConfig& find_family(const cfbench::BenchmarkConfig& cfg,
                                        const std::string& family) {
  const cfbench::ModelFamily f = cfbench::family_from_name(family);
  for (const cfbench::ModelConfig& mc : cfg.models)
    if (mc.family == f) return mc;
  throw cfbench::ConfigError("family not present in config: " + family);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual brain-phantom generation benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::string family;
  std::vector<std::string> overrides;

  const auto add_common = [&](CLI::App* cmd, bool with_family) {
    cmd->add_option("--config", config_path, "Benchmark config JSON file")->required();
    cmd->add_option("--set", overrides,
                    "Override config keys as dotted.path=value (repeatable)");
    if (with_family)
      cmd->add_option("--family", family, "Model family name")->required();
  };

  CLI::App* make_data = app.add_subcommand("make-data", "Materialize the phantom dataset");
  add_common(make_data, false);

  CLI::App* train = app.add_subcommand("train", "Train one model family");
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate one trained family");
  add_common(eval, true);
  std::string axis = "all";
  eval->add_option("--axis", axis,
                   "Metric axis: all|composition|reversibility|realism|"
                   "effectiveness|minimality|generalizability");

  CLI::App* report = app.add_subcommand("report",
                                        "Run any missing stages and emit the report");
  add_common(report, false);

  CLI11_PARSE(app, argc, argv);

  cfbench::BenchmarkConfig cfg;
  try {
    cfg = load_config(config_path, overrides);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }

  try {
    if (make_data->parsed()) {
      cfbench::stage_make_data(cfg);
      std::printf("dataset ready\n");
      return kExitOk;
    }
    if (train->parsed()) {
      const cfbench::ModelConfig& mc = find_family(cfg, family);
      cfbench::stage_make_data(cfg);
      cfbench::stage_train(cfg, mc);
      std::printf("trained %s\n", family.c_str());
      return kExitOk;
    }
    if (eval->parsed()) {
      const cfbench::ModelConfig& mc = find_family(cfg, family);
      const cfbench::MetricReport r = cfbench::stage_eval(cfg, mc);
      const std::string text = cfbench::metric_report_to_json(r);
      if (axis == "all") {
        std::printf("%s\n", text.c_str());
      } else {
        // Print just the requested axis from the cached full report.
        const char* key = axis == "composition"      ? "composition_l1"
                          : axis == "reversibility"  ? "reversibility_l1"
                          : axis == "realism"        ? "realism_fid"
                          : axis == "effectiveness"  ? "effectiveness"
                          : axis == "minimality"     ? "minimality"
                          : axis == "generalizability" ? "generalizability"
                                                       : nullptr;
        if (key == nullptr) throw cfbench::ConfigError("unknown axis: " + axis);
        const auto j = nlohmann::json::parse(text);
        std::printf("%s\n", j.at(key).dump(2).c_str());
      }
      return kExitOk;
    }
    if (report->parsed()) {
      const cfbench::BenchmarkOutcome outcome = cfbench::run_benchmark(cfg);
      std::printf("report written to %s/report\n", outcome.run_dir.c_str());
      for (const cfbench::StageResult& s : outcome.stages)
        if (!s.ok)
          std::fprintf(stderr, "stage failed: %s: %s\n", s.stage.c_str(),
                       s.error.c_str());
      return outcome.all_ok() ? kExitOk : kExitStage;
    }
  } catch (const cfbench::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stage failure: %s\n", e.what());
    return kExitStage;
  }
  return kExitOk;
}
