#include "cfbench/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cfbench/engine.hpp"
#include "cfbench/nn.hpp"
#include "cfbench/rng.hpp"

namespace cfbench {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config

void BenchmarkConfig::validate() const {
  if (!(split_ratio > 0.0 && split_ratio < 1.0))
    throw ConfigError("split_ratio must be in (0,1)");
  if (subjects_a < 1 || subjects_b < 0) throw ConfigError("bad cohort sizes");
  if (scans_per_subject_a < 1 || scans_per_subject_b < 1)
    throw ConfigError("scans per subject must be >= 1");
  if (scan_jitter < 0.0 || scan_jitter >= 1.0)
    throw ConfigError("scan_jitter must be in [0,1)");
  if (resolution < 16 || (resolution & (resolution - 1)) != 0)
    throw ConfigError("resolution must be a power of two >= 16");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (passes.empty() || cycles.empty()) throw ConfigError("passes/cycles empty");
  for (int p : passes)
    if (p < 1) throw ConfigError("pass counts must be >= 1");
  for (int c : cycles)
    if (c < 1) throw ConfigError("cycle counts must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir empty");
  for (const ModelConfig& mc : models) {
    try {
      mc.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    if (mc.resolution != resolution)
      throw ConfigError("model resolution differs from dataset resolution");
  }
}

std::string BenchmarkConfig::to_json() const {
  json j;
  j["subjects_a"] = subjects_a;
  j["subjects_b"] = subjects_b;
  j["scans_per_subject_a"] = scans_per_subject_a;
  j["scans_per_subject_b"] = scans_per_subject_b;
  j["scan_jitter"] = scan_jitter;
  j["resolution"] = resolution;
  j["noise_sigma"] = noise_sigma;
  j["split_ratio"] = split_ratio;
  j["seed"] = seed;
  j["passes"] = passes;
  j["cycles"] = cycles;
  j["ssim"] = {{"sigma", ssim.sigma},
               {"radius", ssim.radius},
               {"k1", ssim.k1},
               {"k2", ssim.k2},
               {"dynamic_range", ssim.dynamic_range}};
  j["out_dir"] = out_dir;
  json ms = json::array();
  for (const ModelConfig& mc : models) ms.push_back(json::parse(mc.to_json()));
  j["models"] = ms;
  return j.dump(2);
}

BenchmarkConfig BenchmarkConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  BenchmarkConfig c;
  try {
    c.subjects_a = j.value("subjects_a", c.subjects_a);
    c.subjects_b = j.value("subjects_b", c.subjects_b);
    c.scans_per_subject_a = j.value("scans_per_subject_a", c.scans_per_subject_a);
    c.scans_per_subject_b = j.value("scans_per_subject_b", c.scans_per_subject_b);
    c.scan_jitter = j.value("scan_jitter", c.scan_jitter);
    c.resolution = j.value("resolution", c.resolution);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.split_ratio = j.value("split_ratio", c.split_ratio);
    c.seed = j.value("seed", c.seed);
    if (j.contains("passes")) c.passes = j["passes"].get<std::vector<int>>();
    if (j.contains("cycles")) c.cycles = j["cycles"].get<std::vector<int>>();
    if (j.contains("ssim")) {
      const json& s = j["ssim"];
      c.ssim.sigma = s.value("sigma", c.ssim.sigma);
      c.ssim.radius = s.value("radius", c.ssim.radius);
      c.ssim.k1 = s.value("k1", c.ssim.k1);
      c.ssim.k2 = s.value("k2", c.ssim.k2);
      c.ssim.dynamic_range = s.value("dynamic_range", c.ssim.dynamic_range);
    }
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("models"))
      for (const json& m : j["models"])
        c.models.push_back(ModelConfig::from_json(m.dump()));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config error: ") + e.what());
  }
  c.validate();
  return c;
}

BenchmarkConfig BenchmarkConfig::load(const std::string& path,
                                      const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must be dotted.path=value: " + ov);
    const std::string path_part = ov.substr(0, eq);
    const std::string value_part = ov.substr(eq + 1);
    json* node = &j;
    std::stringstream ps(path_part);
    std::string tok;
    std::vector<std::string> toks;
    while (std::getline(ps, tok, '.')) toks.push_back(tok);
    if (toks.empty()) throw ConfigError("empty override path: " + ov);
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
      const std::string& t = toks[i];
      if (node->is_array()) {
        char* end = nullptr;
        const long idx = std::strtol(t.c_str(), &end, 10);
        if (end == t.c_str() || *end != '\0' || idx < 0 ||
            std::size_t(idx) >= node->size())
          throw ConfigError("bad array index in override: " + ov);
        node = &(*node)[std::size_t(idx)];
      } else {
        node = &(*node)[t];
      }
    }
    json leaf;
    try {
      leaf = json::parse(value_part);
    } catch (const std::exception&) {
      leaf = value_part;  // plain string value
    }
    const std::string& last = toks.back();
    if (node->is_array()) {
      char* end = nullptr;
      const long idx = std::strtol(last.c_str(), &end, 10);
      if (end == last.c_str() || *end != '\0' || idx < 0 ||
          std::size_t(idx) >= node->size())
        throw ConfigError("bad array index in override: " + ov);
      (*node)[std::size_t(idx)] = leaf;
    } else {
      (*node)[last] = leaf;
    }
  }
  return from_json(j.dump());
}

std::uint64_t BenchmarkConfig::config_hash() const {
  const std::string canon = to_json();
  return nn::fnv1a64(reinterpret_cast<const std::uint8_t*>(canon.data()),
                     canon.size());
}

// ---------------------------------------------------------------------------
// workers

int worker_count() {
  if (const char* env = std::getenv("CFBENCH_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int workers = std::min<std::size_t>(std::size_t(worker_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex err_mutex;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!failed.exchange(true)) first_error = e.what();
          return;
        }
      }
    });
  for (std::thread& t : pool) t.join();
  if (failed.load()) throw std::runtime_error(first_error);
}

// ---------------------------------------------------------------------------
// split

std::pair<std::vector<ScanRecord>, std::vector<ScanRecord>> split_dataset(
    const std::vector<ScanRecord>& scans, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0,1)");
  std::vector<std::string> subjects;
  for (const ScanRecord& s : scans)
    if (std::find(subjects.begin(), subjects.end(), s.subject_id) == subjects.end())
      subjects.push_back(s.subject_id);
  std::sort(subjects.begin(), subjects.end());
  if (subjects.size() < 10)
    throw TooFewSubjects("split_dataset requires >= 10 subjects, got " +
                         std::to_string(subjects.size()));

  Rng rng(seed);
  for (std::size_t i = subjects.size(); i > 1; --i)
    std::swap(subjects[i - 1], subjects[rng.uniform_index(i)]);

  std::size_t n_train = std::size_t(std::llround(ratio * double(subjects.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, subjects.size() - 1);
  std::vector<std::string> train_subjects(subjects.begin(),
                                          subjects.begin() + std::ptrdiff_t(n_train));
  std::sort(train_subjects.begin(), train_subjects.end());

  std::vector<ScanRecord> train, test;
  for (const ScanRecord& s : scans) {
    const bool in_train = std::binary_search(train_subjects.begin(),
                                             train_subjects.end(), s.subject_id);
    (in_train ? train : test).push_back(s);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// stage plumbing

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path run_dir_for(const BenchmarkConfig& cfg) {
  return fs::path(cfg.out_dir) / ("run_" + hex64(cfg.config_hash()));
}

void touch(const fs::path& p) { std::ofstream(p) << "done\n"; }

std::vector<ScanRecord> load_scan_records(const BenchmarkConfig& cfg) {
  const fs::path data = run_dir_for(cfg) / "data";
  std::vector<ScanRecord> records;
  for (const char* cohort : {"A", "B"}) {
    const fs::path cdir = data / cohort;
    if (!fs::exists(cdir)) continue;
    std::vector<fs::path> dirs;
    for (const auto& subj : fs::directory_iterator(cdir))
      for (const auto& scan : fs::directory_iterator(subj.path()))
        dirs.push_back(scan.path());
    std::sort(dirs.begin(), dirs.end());
    for (const fs::path& dir : dirs) {
      const ScanMeta meta = load_scan_meta(dir.string());
      ScanRecord rec;
      rec.subject_id = meta.subject_id;
      rec.scan_id = meta.scan_id;
      rec.cohort = meta.cohort;
      rec.dir = dir.string();
      rec.raw_volumes = meta.raw_volumes;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

void apply_normalizer(std::vector<ScanRecord>& records, const Normalizer& norm) {
  for (ScanRecord& rec : records)
    rec.attrs = norm.normalize(AttributeVector::from_raw(rec.raw_volumes));
}

Dataset load_dataset(const std::vector<ScanRecord>& records) {
  Dataset out;
  out.reserve(records.size());
  for (const ScanRecord& rec : records)
    out.push_back({load_scan_volume(rec.dir), rec.attrs});
  return out;
}

Normalizer load_or_fit_normalizer(const BenchmarkConfig& cfg,
                                  const std::vector<ScanRecord>& records) {
  const fs::path path = run_dir_for(cfg) / "normalizer.json";
  if (fs::exists(path)) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    return Normalizer::from_json(ss.str());
  }
  // Fitted strictly on the cohort-A training side.
  std::vector<ScanRecord> cohort_a;
  for (const ScanRecord& r : records)
    if (r.cohort == CohortId::A) cohort_a.push_back(r);
  const auto [train, test] = split_dataset(cohort_a, cfg.split_ratio, cfg.seed);
  std::vector<RawVolumes> train_raw;
  train_raw.reserve(train.size());
  for (const ScanRecord& r : train) train_raw.push_back(r.raw_volumes);
  const Normalizer norm = Normalizer::fit(train_raw);
  std::ofstream(path) << norm.to_json() << "\n";
  return norm;
}

struct EvalSets {
  Dataset test_a;   // cohort-A held-out scans, cohort-A normalizer
  Dataset all_b;    // all cohort-B scans, cohort-A normalizer
};

EvalSets build_eval_sets(const BenchmarkConfig& cfg) {
  std::vector<ScanRecord> records = load_scan_records(cfg);
  const Normalizer norm = load_or_fit_normalizer(cfg, records);
  apply_normalizer(records, norm);
  std::vector<ScanRecord> cohort_a, cohort_b;
  for (const ScanRecord& r : records)
    (r.cohort == CohortId::A ? cohort_a : cohort_b).push_back(r);
  const auto [train, test] = split_dataset(cohort_a, cfg.split_ratio, cfg.seed);
  EvalSets sets;
  sets.test_a = load_dataset(test);
  sets.all_b = load_dataset(cohort_b);
  return sets;
}

std::uint64_t family_seed(const BenchmarkConfig& cfg, const ModelConfig& mc,
                          std::uint64_t salt) {
  const std::string name = family_name(mc.family);
  return cfg.seed ^
         nn::fnv1a64(reinterpret_cast<const std::uint8_t*>(name.data()),
                     name.size()) ^
         (salt * 0x9e3779b97f4a7c15ull);
}

}  // namespace

// ---------------------------------------------------------------------------
// stages

void stage_make_data(const BenchmarkConfig& cfg) {
  const fs::path run = run_dir_for(cfg);
  const fs::path data = run / "data";
  const fs::path marker = data / ".complete";
  if (fs::exists(marker)) return;
  fs::create_directories(data);

  struct Job {
    CohortId cohort;
    int subject;
    int scan;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < cfg.subjects_a; ++i)
    for (int s = 0; s < cfg.scans_per_subject_a; ++s)
      jobs.push_back({CohortId::A, i, s});
  for (int i = 0; i < cfg.subjects_b; ++i)
    for (int s = 0; s < cfg.scans_per_subject_b; ++s)
      jobs.push_back({CohortId::B, i, s});

  const Dims dims{cfg.resolution, cfg.resolution, cfg.resolution};
  parallel_for(jobs.size(), [&](std::size_t idx) {
    const Job& job = jobs[idx];
    const std::uint64_t subj_seed = cfg.seed + std::uint64_t(job.subject);
    SubjectSpec spec = sample_subject(job.cohort, subj_seed);
    if (job.scan > 0) {
      Rng jrng(subj_seed * 1000003ull + std::uint64_t(job.scan));
      const double rel = jrng.uniform(-cfg.scan_jitter, cfg.scan_jitter);
      spec = jitter_volumes(spec, rel, jrng.next_u64());
    }
    RenderOptions opt;
    opt.noise_sigma = cfg.noise_sigma;
    const auto [vol, labels] = render_phantom(spec, dims, opt);

    ScanMeta meta;
    meta.subject_id = spec.subject_id;
    meta.scan_id = spec.subject_id + "_s" + std::to_string(job.scan);
    meta.cohort = job.cohort;
    meta.dims = dims;
    meta.seed = spec.noise_seed;
    meta.raw_volumes = region_volumes(labels);
    const fs::path dir =
        data / cohort_name(job.cohort) / spec.subject_id / ("s" + std::to_string(job.scan));
    fs::create_directories(dir);
    save_scan(dir.string(), meta, vol, labels);
  });
  touch(marker);
}

void stage_train(const BenchmarkConfig& cfg, const ModelConfig& mc) {
  const fs::path run = run_dir_for(cfg);
  const fs::path mdir = run / "models" / family_name(mc.family);
  if (fs::exists(mdir / "config.json")) return;  // resume: already trained

  std::vector<ScanRecord> records = load_scan_records(cfg);
  const Normalizer norm = load_or_fit_normalizer(cfg, records);
  apply_normalizer(records, norm);
  std::vector<ScanRecord> cohort_a;
  for (const ScanRecord& r : records)
    if (r.cohort == CohortId::A) cohort_a.push_back(r);
  const auto [train_recs, test_recs] = split_dataset(cohort_a, cfg.split_ratio, cfg.seed);
  const Dataset train_set = load_dataset(train_recs);

  std::unique_ptr<Model> model;
  if (mc.family == ModelFamily::GAN_FT) {
    // Finetuning needs a trained base GAN with identical hyperparameters.
    const fs::path base_dir = run / "models" / "GAN-Finetuned.base";
    std::unique_ptr<Model> base;
    if (fs::exists(base_dir / "config.json")) {
      base = Model::load(base_dir.string());
    } else {
      ModelConfig base_cfg = mc;
      base_cfg.family = ModelFamily::GAN;
      base = train_model(base_cfg, train_set);
      base->set_normalizer(norm);
      base->save(base_dir.string());
    }
    model = finetune_encoder_cyclic(*base, train_set);
  } else {
    model = train_model(mc, train_set);
  }
  model->set_normalizer(norm);
  model->save(mdir.string());
}

MetricReport stage_eval(const BenchmarkConfig& cfg, const ModelConfig& mc) {
  const fs::path run = run_dir_for(cfg);
  const fs::path cache = run / "eval" / (std::string(family_name(mc.family)) + ".json");
  if (fs::exists(cache)) {
    std::ifstream f(cache);
    std::stringstream ss;
    ss << f.rdbuf();
    return metric_report_from_json(ss.str());
  }

  const std::unique_ptr<Model> model =
      Model::load((run / "models" / family_name(mc.family)).string());
  const EvalSets sets = build_eval_sets(cfg);

  MetricReport report;
  report.model_name = family_name(mc.family);
  const CompositionResult comp = composition_score(*model, sets.test_a, cfg.passes);
  report.composition_l1 = comp.l1;
  report.composition_ssim = comp.ssim;
  report.reversibility_l1 =
      reversibility_score(*model, sets.test_a, cfg.cycles, family_seed(cfg, mc, 1));
  const FeatureExtractor fx(cfg.resolution);
  report.realism_fid = realism_score(*model, sets.test_a, fx);
  for (RegionId target : kAllRegions) {
    const std::uint64_t s = family_seed(cfg, mc, 100 + std::uint64_t(target));
    report.effectiveness[target] = effectiveness_score(*model, sets.test_a, target, s);
    report.minimality[target] = minimality_score(*model, sets.test_a, target, s);
    if (!sets.all_b.empty())
      report.generalizability[target] =
          generalizability_score(*model, sets.all_b, target, s);
  }

  fs::create_directories(cache.parent_path());
  std::ofstream(cache) << metric_report_to_json(report) << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// report serialization & emission

std::string metric_report_to_json(const MetricReport& r) {
  json j;
  j["model"] = r.model_name;
  const auto int_map = [](const std::map<int, double>& m) {
    json out;
    for (const auto& [k, v] : m) out[std::to_string(k)] = v;
    return out;
  };
  const auto region_map = [](const std::map<RegionId, double>& m) {
    json out;
    for (const auto& [k, v] : m) out[region_name(k)] = v;
    return out;
  };
  j["composition_l1"] = int_map(r.composition_l1);
  j["composition_ssim"] = int_map(r.composition_ssim);
  j["reversibility_l1"] = int_map(r.reversibility_l1);
  j["realism_fid"] = r.realism_fid;
  j["effectiveness"] = region_map(r.effectiveness);
  json mini;
  for (const auto& [target, row] : r.minimality)
    mini[region_name(target)] = region_map(row);
  j["minimality"] = mini;
  j["generalizability"] = region_map(r.generalizability);
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  const json j = json::parse(text);
  MetricReport r;
  r.model_name = j.at("model").get<std::string>();
  const auto int_map = [](const json& je) {
    std::map<int, double> out;
    for (const auto& [k, v] : je.items()) out[std::stoi(k)] = v.get<double>();
    return out;
  };
  const auto region_map = [](const json& je) {
    std::map<RegionId, double> out;
    for (const auto& [k, v] : je.items()) out[region_from_name(k)] = v.get<double>();
    return out;
  };
  r.composition_l1 = int_map(j.at("composition_l1"));
  r.composition_ssim = int_map(j.at("composition_ssim"));
  r.reversibility_l1 = int_map(j.at("reversibility_l1"));
  r.realism_fid = j.at("realism_fid").get<double>();
  r.effectiveness = region_map(j.at("effectiveness"));
  for (const auto& [target, row] : j.at("minimality").items())
    r.minimality[region_from_name(target)] = region_map(row);
  if (j.contains("generalizability"))
    r.generalizability = region_map(j.at("generalizability"));
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Mark every row achieving the column optimum (ties included).
std::vector<bool> best_mask(const std::vector<double>& column, bool higher_better) {
  std::vector<bool> mask(column.size(), false);
  if (column.empty()) return mask;
  double best = column.front();
  for (double v : column) best = higher_better ? std::max(best, v) : std::min(best, v);
  for (std::size_t i = 0; i < column.size(); ++i)
    if (column[i] == best) mask[i] = true;
  return mask;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;          // preformatted cells
  std::vector<std::vector<bool>> best;                 // per cell best-marking
};

void write_csv(const Table& t, const fs::path& path) {
  std::ofstream f(path);
  for (std::size_t i = 0; i < t.header.size(); ++i)
    f << t.header[i] << (i + 1 < t.header.size() ? "," : "\n");
  for (const auto& row : t.rows)
    for (std::size_t i = 0; i < row.size(); ++i)
      f << row[i] << (i + 1 < row.size() ? "," : "\n");
}

void write_md(std::ofstream& f, const std::string& title, const Table& t) {
  f << "## " << title << "\n\n|";
  for (const std::string& h : t.header) f << " " << h << " |";
  f << "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i) f << " --- |";
  f << "\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    f << "|";
    for (std::size_t c = 0; c < t.rows[r].size(); ++c) {
      const bool mark = c < t.best[r].size() && t.best[r][c];
      f << " " << (mark ? "**" + t.rows[r][c] + "**" : t.rows[r][c]) << " |";
    }
    f << "\n";
  }
  f << "\n";
}

// Fill best-masks for numeric columns starting at first_numeric.
void mark_best(Table& t, std::size_t first_numeric,
               const std::vector<bool>& higher_better,
               const std::vector<std::vector<double>>& values) {
  t.best.assign(t.rows.size(), std::vector<bool>(t.header.size(), false));
  for (std::size_t c = first_numeric; c < t.header.size(); ++c) {
    std::vector<double> column;
    std::vector<std::size_t> row_idx;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (t.rows[r][c].empty()) continue;
      column.push_back(values[r][c]);
      row_idx.push_back(r);
    }
    const std::vector<bool> mask =
        best_mask(column, higher_better[c - first_numeric]);
    for (std::size_t i = 0; i < row_idx.size(); ++i)
      t.best[row_idx[i]][c] = mask[i];
  }
}

}  // namespace

void emit_report(const std::vector<MetricReport>& reports, const BenchmarkConfig& cfg,
                 const std::string& outdir) {
  fs::create_directories(outdir);
  const fs::path out(outdir);

  // report.json with provenance
  {
    json j;
    j["config_hash"] = hex64(cfg.config_hash());
    j["seed"] = cfg.seed;
    j["config"] = json::parse(cfg.to_json());
    json rs = json::array();
    for (const MetricReport& r : reports) rs.push_back(json::parse(metric_report_to_json(r)));
    j["reports"] = rs;
    std::ofstream(out / "report.json") << j.dump(2) << "\n";
  }

  // Table 1: composition / reversibility / realism
  Table t1;
  t1.header = {"model"};
  std::vector<bool> hb1;
  for (int p : cfg.passes) {
    t1.header.push_back("comp_l1_" + std::to_string(p));
    hb1.push_back(false);
  }
  for (int p : cfg.passes) {
    t1.header.push_back("comp_ssim_" + std::to_string(p));
    hb1.push_back(true);
  }
  for (int c : cfg.cycles) {
    t1.header.push_back("rev_l1_" + std::to_string(c));
    hb1.push_back(false);
  }
  t1.header.push_back("realism_fid");
  hb1.push_back(false);
  std::vector<std::vector<double>> v1;
  for (const MetricReport& r : reports) {
    std::vector<std::string> row = {r.model_name};
    std::vector<double> vals = {0.0};
    const auto push = [&](double v) {
      row.push_back(fmt(v));
      vals.push_back(v);
    };
    for (int p : cfg.passes) push(r.composition_l1.at(p));
    for (int p : cfg.passes) push(r.composition_ssim.at(p));
    for (int c : cfg.cycles) push(r.reversibility_l1.at(c));
    push(r.realism_fid);
    t1.rows.push_back(std::move(row));
    v1.push_back(std::move(vals));
  }
  mark_best(t1, 1, hb1, v1);
  write_csv(t1, out / "table1_composition_reversibility_realism.csv");

  // Table 2: effectiveness + generalizability per region
  Table t2;
  t2.header = {"model", "metric"};
  std::vector<bool> hb2;
  for (RegionId r : kAllRegions) {
    t2.header.push_back(region_name(r));
    hb2.push_back(false);
  }
  std::vector<std::vector<double>> v2;
  for (const MetricReport& r : reports) {
    for (const char* metric : {"effectiveness", "generalizability"}) {
      const auto& m = std::string(metric) == "effectiveness" ? r.effectiveness
                                                             : r.generalizability;
      if (m.empty()) continue;
      std::vector<std::string> row = {r.model_name, metric};
      std::vector<double> vals = {0.0, 0.0};
      for (RegionId reg : kAllRegions) {
        const auto it = m.find(reg);
        if (it == m.end()) {
          row.emplace_back();
          vals.push_back(0.0);
        } else {
          row.push_back(fmt(it->second));
          vals.push_back(it->second);
        }
      }
      t2.rows.push_back(std::move(row));
      v2.push_back(std::move(vals));
    }
  }
  mark_best(t2, 2, hb2, v2);
  write_csv(t2, out / "table2_effectiveness_generalizability.csv");

  // Table 3: minimality matrix (target x measured region)
  Table t3;
  t3.header = {"model", "target"};
  std::vector<bool> hb3;
  for (RegionId r : kAllRegions) {
    t3.header.push_back(region_name(r));
    hb3.push_back(false);
  }
  std::vector<std::vector<double>> v3;
  for (const MetricReport& r : reports)
    for (RegionId target : kAllRegions) {
      const auto it = r.minimality.find(target);
      if (it == r.minimality.end()) continue;
      std::vector<std::string> row = {r.model_name, region_name(target)};
      std::vector<double> vals = {0.0, 0.0};
      for (RegionId reg : kAllRegions) {
        const auto jt = it->second.find(reg);
        if (jt == it->second.end()) {
          row.emplace_back();  // the target column itself stays blank
          vals.push_back(0.0);
        } else {
          row.push_back(fmt(jt->second));
          vals.push_back(jt->second);
        }
      }
      t3.rows.push_back(std::move(row));
      v3.push_back(std::move(vals));
    }
  mark_best(t3, 2, hb3, v3);
  write_csv(t3, out / "table3_minimality.csv");

  std::ofstream md(out / "report.md");
  md << "# Benchmark report\n\nConfig hash: `" << hex64(cfg.config_hash())
     << "`  \nSeed: " << cfg.seed << "\n\n";
  write_md(md, "Composition / Reversibility / Realism", t1);
  write_md(md, "Effectiveness and Generalizability (MAE, normalized space)", t2);
  write_md(md, "Minimality (MAE per non-target region, normalized space)", t3);
}

// ---------------------------------------------------------------------------
// full pipeline

BenchmarkOutcome run_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  BenchmarkOutcome outcome;
  outcome.run_dir = run_dir_for(cfg).string();

  const auto run_stage = [&](const std::string& name, const auto& fn) -> bool {
    StageResult sr;
    sr.stage = name;
    try {
      fn();
    } catch (const std::exception& e) {
      sr.ok = false;
      sr.error = e.what();
    }
    outcome.stages.push_back(sr);
    return sr.ok;
  };

  if (!run_stage("make-data", [&] { stage_make_data(cfg); })) return outcome;

  for (const ModelConfig& mc : cfg.models) {
    const std::string fam = family_name(mc.family);
    if (!run_stage("train:" + fam, [&] { stage_train(cfg, mc); })) continue;
    MetricReport report;
    if (run_stage("eval:" + fam, [&] { report = stage_eval(cfg, mc); }))
      outcome.reports.push_back(std::move(report));
  }

  run_stage("report", [&] {
    emit_report(outcome.reports, cfg, (run_dir_for(cfg) / "report").string());
    json js = json::array();
    for (const StageResult& s : outcome.stages)
      js.push_back({{"stage", s.stage}, {"ok", s.ok}, {"error", s.error}});
    std::ofstream(run_dir_for(cfg) / "report" / "stages.json") << js.dump(2) << "\n";
  });
  return outcome;
}

}  // namespace cfbench
