#pragma once

// End-to-end orchestration: dataset materialization, subject-level split,
// per-family training, the full metric suite, and report emission, all
// driven by one JSON config with dotted-path CLI overrides.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cfbench/metrics.hpp"
#include "cfbench/models.hpp"
#include "cfbench/phantom.hpp"

namespace cfbench {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooFewSubjects : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BenchmarkConfig {
  int subjects_a = 40;
  int subjects_b = 20;
  int scans_per_subject_a = 3;
  int scans_per_subject_b = 1;
  double scan_jitter = 0.03;  // intra-subject relative volume jitter bound
  int resolution = 32;
  double noise_sigma = 0.02;
  double split_ratio = 0.9;
  std::uint64_t seed = 42;
  std::vector<ModelConfig> models;
  std::vector<int> passes = {1, 10};
  std::vector<int> cycles = {1, 3};
  SsimParams ssim;
  std::string out_dir = "out";

  void validate() const;  // throws ConfigError
  std::string to_json() const;
  static BenchmarkConfig from_json(const std::string& text);
  // Parse a config file then apply "dotted.path=value" overrides.
  static BenchmarkConfig load(const std::string& path,
                              const std::vector<std::string>& overrides = {});
  // Content hash of the canonical JSON form; keys the cache directory.
  std::uint64_t config_hash() const;
};

struct ScanRecord {
  std::string subject_id;
  std::string scan_id;
  CohortId cohort = CohortId::A;
  std::string dir;  // scan directory on disk
  RawVolumes raw_volumes;
  AttributeVector attrs;  // normalized, filled after the split
};

// Subject-granular split: no subject straddles the two sides; proportions
// within one subject of the ratio; deterministic in the seed.
std::pair<std::vector<ScanRecord>, std::vector<ScanRecord>> split_dataset(
    const std::vector<ScanRecord>& scans, double ratio, std::uint64_t seed);

struct StageResult {
  std::string stage;
  bool ok = true;
  std::string error;
};

struct BenchmarkOutcome {
  std::vector<MetricReport> reports;
  std::vector<StageResult> stages;
  std::string run_dir;  // content-addressed cache directory for this config
  bool all_ok() const {
    for (const StageResult& s : stages)
      if (!s.ok) return false;
    return true;
  }
};

// Full pipeline: make-data -> normalizer (train side only) -> train each
// family -> evaluate all six axes -> emit report files. Every stage is
// cached under the config-hash directory and skipped when already complete;
// a failing stage is recorded and the remaining families still run.
BenchmarkOutcome run_benchmark(const BenchmarkConfig& cfg);

// Individual stages, exposed for the CLI subcommands.
void stage_make_data(const BenchmarkConfig& cfg);
void stage_train(const BenchmarkConfig& cfg, const ModelConfig& mc);
MetricReport stage_eval(const BenchmarkConfig& cfg, const ModelConfig& mc);

// report.json + table1/table2/table3 CSVs + report.md with per-column best
// values marked (ties all marked). Idempotent.
void emit_report(const std::vector<MetricReport>& reports, const BenchmarkConfig& cfg,
                 const std::string& outdir);

std::string metric_report_to_json(const MetricReport& report);
MetricReport metric_report_from_json(const std::string& text);

// Worker pool size: CFBENCH_WORKERS if set, else hardware concurrency.
int worker_count();
// Index-sharded parallel map with order-stable results.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cfbench
