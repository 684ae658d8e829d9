#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "cfbench/harness.hpp"

using namespace cfbench;
namespace fs = std::filesystem;

namespace {

std::vector<ScanRecord> fake_scans(int subjects, int scans_each) {
  std::vector<ScanRecord> out;
  for (int s = 0; s < subjects; ++s)
    for (int k = 0; k < scans_each; ++k) {
      ScanRecord r;
      r.subject_id = "A" + std::to_string(1000 + s);
      r.scan_id = r.subject_id + "_s" + std::to_string(k);
      out.push_back(std::move(r));
    }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Minimal but complete pipeline config: identity family on a tiny dataset.
BenchmarkConfig tiny_config(const fs::path& out_dir) {
  BenchmarkConfig cfg;
  cfg.subjects_a = 12;
  cfg.subjects_b = 3;
  cfg.scans_per_subject_a = 1;
  cfg.scans_per_subject_b = 1;
  cfg.resolution = 16;
  cfg.split_ratio = 0.8;
  cfg.seed = 9;
  cfg.passes = {1, 2};
  cfg.cycles = {1};
  cfg.out_dir = out_dir.string();
  ModelConfig mc;
  mc.family = ModelFamily::Identity;
  mc.resolution = 16;
  cfg.models.push_back(mc);
  return cfg;
}

}  // namespace

TEST_CASE("split hygiene over 100 seeds") {
  const auto scans = fake_scans(13, 2);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [train, test] = split_dataset(scans, 0.9, seed);
    std::set<std::string> tr, te;
    for (const ScanRecord& r : train) tr.insert(r.subject_id);
    for (const ScanRecord& r : test) te.insert(r.subject_id);
    for (const std::string& s : tr) CHECK(te.count(s) == 0);
    CHECK(tr.size() + te.size() == 13);
    // within one subject of the 90/10 ratio
    CHECK(std::abs(double(tr.size()) - 0.9 * 13.0) <= 1.0);
    CHECK(train.size() + test.size() == scans.size());
  }
}

TEST_CASE("split determinism, rounding, and error cases") {
  const auto scans = fake_scans(10, 1);
  const auto [tr1, te1] = split_dataset(scans, 0.9, 5);
  const auto [tr2, te2] = split_dataset(scans, 0.9, 5);
  CHECK(tr1.size() == 9);
  CHECK(te1.size() == 1);
  REQUIRE(tr1.size() == tr2.size());
  for (std::size_t i = 0; i < tr1.size(); ++i)
    CHECK(tr1[i].scan_id == tr2[i].scan_id);

  CHECK_THROWS_AS(split_dataset(fake_scans(9, 1), 0.9, 1), TooFewSubjects);
  CHECK_THROWS_AS(split_dataset(scans, 1.0, 1), ConfigError);
}

TEST_CASE("benchmark config json round trip, overrides, validation") {
  const fs::path dir = fs::temp_directory_path() / "cfbench_test_cfg";
  fs::remove_all(dir);
  fs::create_directories(dir);

  BenchmarkConfig cfg = tiny_config(dir / "out");
  const BenchmarkConfig back = BenchmarkConfig::from_json(cfg.to_json());
  CHECK(back.config_hash() == cfg.config_hash());
  CHECK(back.models.size() == 1);

  // dotted-path overrides through a config file
  const fs::path cfile = dir / "config.json";
  std::ofstream(cfile) << cfg.to_json();
  const BenchmarkConfig ov = BenchmarkConfig::load(
      cfile.string(), {"seed=77", "models.0.epochs=2", "ssim.sigma=2.0"});
  CHECK(ov.seed == 77);
  CHECK(ov.models[0].epochs == 2);
  CHECK(ov.ssim.sigma == 2.0);
  CHECK(ov.config_hash() != cfg.config_hash());

  CHECK_THROWS_AS(BenchmarkConfig::load("/nonexistent/cfg.json"), ConfigError);
  CHECK_THROWS_AS(BenchmarkConfig::load(cfile.string(), {"noequals"}), ConfigError);

  BenchmarkConfig bad = cfg;
  bad.split_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.models[0].resolution = 32;  // inconsistent with dataset resolution
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("worker pool: order-stable results under CFBENCH_WORKERS") {
  std::vector<int> out(64, 0);
  setenv("CFBENCH_WORKERS", "4", 1);
  CHECK(worker_count() == 4);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = int(i) * 3; });
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == int(i) * 3);
  setenv("CFBENCH_WORKERS", "1", 1);
  CHECK(worker_count() == 1);
  unsetenv("CFBENCH_WORKERS");
}

TEST_CASE("end-to-end pipeline: determinism, resume, train-only normalizer") {
  const fs::path dir = fs::temp_directory_path() / "cfbench_test_e2e";
  fs::remove_all(dir);
  const BenchmarkConfig cfg = tiny_config(dir);

  const BenchmarkOutcome first = run_benchmark(cfg);
  CHECK(first.all_ok());
  REQUIRE(first.reports.size() == 1);
  const fs::path run(first.run_dir);
  CHECK(fs::exists(run / "report" / "report.json"));
  CHECK(fs::exists(run / "report" / "table1_composition_reversibility_realism.csv"));
  CHECK(fs::exists(run / "report" / "table2_effectiveness_generalizability.csv"));
  CHECK(fs::exists(run / "report" / "table3_minimality.csv"));
  CHECK(fs::exists(run / "report" / "report.md"));
  const std::string report1 = slurp(run / "report" / "report.json");

  // identity-family ideals flow through the pipeline
  const MetricReport& r = first.reports[0];
  CHECK(r.composition_l1.at(1) == 0.0);
  CHECK(r.composition_ssim.at(1) == 1.0);
  CHECK(r.reversibility_l1.at(1) == 0.0);
  CHECK(r.realism_fid <= 1e-6);

  // rerun from cache: bit-identical report
  const BenchmarkOutcome second = run_benchmark(cfg);
  CHECK(second.all_ok());
  CHECK(slurp(run / "report" / "report.json") == report1);

  // resume after losing eval + report artifacts equals uninterrupted run
  fs::remove_all(run / "eval");
  fs::remove_all(run / "report");
  const BenchmarkOutcome resumed = run_benchmark(cfg);
  CHECK(resumed.all_ok());
  CHECK(slurp(run / "report" / "report.json") == report1);

  // normalizer fitted strictly on the train side: refitting from train scans
  // alone reproduces normalizer.json
  const std::string saved = slurp(run / "normalizer.json");
  // recompute from scratch using only the cohort-A train split
  {
    std::vector<ScanRecord> records;
    for (const auto& subj : fs::directory_iterator(run / "data" / "A"))
      for (const auto& scan : fs::directory_iterator(subj.path())) {
        const ScanMeta meta = load_scan_meta(scan.path().string());
        ScanRecord rec;
        rec.subject_id = meta.subject_id;
        rec.scan_id = meta.scan_id;
        rec.raw_volumes = meta.raw_volumes;
        records.push_back(std::move(rec));
      }
    std::sort(records.begin(), records.end(),
              [](const ScanRecord& a, const ScanRecord& b) {
                return a.scan_id < b.scan_id;
              });
    const auto [train, test] = split_dataset(records, cfg.split_ratio, cfg.seed);
    std::vector<RawVolumes> raw;
    for (const ScanRecord& rec : train) raw.push_back(rec.raw_volumes);
    CHECK(Normalizer::fit(raw) == Normalizer::from_json(saved));
  }

  // emit_report round trip: parse report.json, emit elsewhere, identical CSVs
  {
    const auto j = nlohmann::json::parse(report1);
    std::vector<MetricReport> reports;
    for (const auto& jr : j.at("reports"))
      reports.push_back(metric_report_from_json(jr.dump()));
    const fs::path out2 = dir / "report2";
    emit_report(reports, cfg, out2.string());
    for (const char* f :
         {"table1_composition_reversibility_realism.csv",
          "table2_effectiveness_generalizability.csv", "table3_minimality.csv"})
      CHECK(slurp(out2 / f) == slurp(run / "report" / f));
  }
  fs::remove_all(dir);
}
