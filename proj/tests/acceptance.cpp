// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Tolerances are pinned inline next to each check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cfbench/engine.hpp"
#include "cfbench/harness.hpp"
#include "cfbench/metrics.hpp"
#include "cfbench/models.hpp"
#include "cfbench/phantom.hpp"
#include "cfbench/rng.hpp"

using namespace cfbench;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const char* title, bool ok, const std::string& detail,
            double seconds) {
  std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL",
              criterion, title, seconds, detail.empty() ? "" : " -- ",
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

struct Cohort {
  Dataset set;            // normalized attrs
  std::vector<LabelMap> labels;
  Normalizer norm;        // the normalizer the attrs were produced with
};

// n phantoms, one scan per synthetic subject. If `norm` is provided the
// attributes are normalized with it; otherwise a normalizer is fitted on
// these phantoms themselves.
Cohort make_cohort(CohortId cohort, int n, int res, double sigma,
                   std::uint64_t seed_base, const Normalizer* norm = nullptr) {
  Cohort out;
  std::vector<RawVolumes> raws;
  for (int i = 0; i < n; ++i) {
    const SubjectSpec spec = sample_subject(cohort, seed_base + std::uint64_t(i));
    auto [vol, labels] = render_phantom(spec, Dims{res, res, res}, {sigma});
    raws.push_back(region_volumes(labels));
    out.set.push_back({std::move(vol), AttributeVector{}});
    out.labels.push_back(std::move(labels));
  }
  out.norm = norm ? *norm : Normalizer::fit(raws);
  for (int i = 0; i < n; ++i)
    out.set[std::size_t(i)].attrs =
        out.norm.normalize(AttributeVector::from_raw(raws[std::size_t(i)]));
  return out;
}

double frobenius_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// ----------------------------------------------------------------------
// 1. Identity-double ideals.
void criterion1() {
  const auto t0 = Clock::now();
  const Cohort c = make_cohort(CohortId::A, 8, 16, 0.02, 7100);
  std::unique_ptr<Model> id = make_identity_double(16);
  id->set_normalizer(c.norm);

  const CompositionResult comp = composition_score(*id, c.set, {1, 10});
  const std::map<int, double> rev = reversibility_score(*id, c.set, {1, 3}, 99);
  const double fid = realism_score(*id, c.set, FeatureExtractor(16));

  bool ok = true;
  std::ostringstream d;
  for (int p : {1, 10}) {
    if (comp.l1.at(p) != 0.0 || comp.ssim.at(p) != 1.0) ok = false;
  }
  for (int cy : {1, 3})
    if (rev.at(cy) != 0.0) ok = false;
  if (!(fid <= 1e-6)) ok = false;
  d << "l1(1)=" << comp.l1.at(1) << " ssim(10)=" << comp.ssim.at(10)
    << " rev(3)=" << rev.at(3) << " fid=" << fid;
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(1, "identity-double ideals (l1=0, ssim=1, rev=0, fid<=1e-6)", ok,
         d.str(), secs);
}

// ----------------------------------------------------------------------
// 2. Metric math vs naive oracles.
Volume3D random_volume(int e, std::uint64_t seed) {
  Volume3D v(Dims{e, e, e}, 0.0f);
  Rng rng(seed);
  for (std::size_t i = 0; i < v.raw().size(); ++i)
    v.raw()[i] = float(rng.uniform());
  return v;
}

double naive_l1(const Volume3D& a, const Volume3D& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.raw().size(); ++i)
    s += std::abs(double(a.raw()[i]) - double(b.raw()[i]));
  return s / double(a.raw().size());
}

// Direct-formula SSIM over fully-interior voxels with a normalized Gaussian
// window; independent of the separable implementation under test.
double naive_ssim(const Volume3D& a, const Volume3D& b, const SsimParams& p) {
  const int e = a.dims().x, r = p.radius;
  std::vector<double> w;
  double wsum = 0.0;
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const double g =
            std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * p.sigma * p.sigma));
        w.push_back(g);
        wsum += g;
      }
  for (double& g : w) g /= wsum;
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  double total = 0.0;
  std::size_t count = 0;
  for (int z = r; z < e - r; ++z)
    for (int y = r; y < e - r; ++y)
      for (int x = r; x < e - r; ++x) {
        double ma = 0, mb = 0;
        std::size_t wi = 0;
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx, ++wi) {
              ma += w[wi] * double(a.at(x + dx, y + dy, z + dz));
              mb += w[wi] * double(b.at(x + dx, y + dy, z + dz));
            }
        double va = 0, vb = 0, cov = 0;
        wi = 0;
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx, ++wi) {
              const double da = double(a.at(x + dx, y + dy, z + dz)) - ma;
              const double db = double(b.at(x + dx, y + dy, z + dz)) - mb;
              va += w[wi] * da * da;
              vb += w[wi] * db * db;
              cov += w[wi] * da * db;
            }
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

void criterion2() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;

  const Volume3D a = random_volume(8, 21), b = random_volume(8, 22);
  const double l1_err = std::abs(l1_distance(a, b) - naive_l1(a, b));
  if (!(l1_err <= 1e-9)) ok = false;

  SsimParams sp;  // radius 3 fits an 8^3 volume (2r+1 = 7)
  const double ssim_err = std::abs(ssim3d(a, b, sp) - naive_ssim(a, b, sp));
  if (!(ssim_err <= 1e-9)) ok = false;

  // Frechet on 1-D Gaussians: d^2 = (mu1-mu2)^2 + (s1-s2)^2 = 4 exactly.
  Rng rng(77);
  std::vector<std::vector<double>> fa, fb;
  for (int i = 0; i < 10000; ++i) {
    fa.push_back({rng.normal()});
    fb.push_back({2.0 + rng.normal()});
  }
  const double fd = frechet_distance(fa, fb);
  if (!(std::abs(fd - 4.0) <= 0.2)) ok = false;

  // Matrix square root reconstruction, D up to 64.
  double worst = 0.0;
  for (int dim : {2, 8, 64}) {
    Rng mr(500 + dim);
    std::vector<double> bmat(std::size_t(dim) * dim);
    for (double& v : bmat) v = 0.1 * mr.normal();
    std::vector<double> m(std::size_t(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) {
        double s = 0.0;
        for (int k = 0; k < dim; ++k)
          s += bmat[std::size_t(k) * dim + i] * bmat[std::size_t(k) * dim + j];
        m[std::size_t(i) * dim + j] = s + (i == j ? 0.1 : 0.0);
      }
    const std::vector<double> s = sqrtm_spd(m, dim);
    std::vector<double> ss(std::size_t(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) {
        double acc = 0.0;
        for (int k = 0; k < dim; ++k)
          acc += s[std::size_t(i) * dim + k] * s[std::size_t(k) * dim + j];
        ss[std::size_t(i) * dim + j] = acc;
      }
    worst = std::max(worst, frobenius_diff(ss, m));
  }
  if (!(worst <= 1e-8)) ok = false;

  d << "l1_err=" << l1_err << " ssim_err=" << ssim_err << " frechet=" << fd
    << " sqrtm_frob=" << worst;
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(2, "metric math matches naive oracles", ok, d.str(), secs);
}

// ----------------------------------------------------------------------
// 3. Oracle segmenter Dice.
std::array<double, kNumRegions> dice_per_region(const LabelMap& pred,
                                                const LabelMap& truth) {
  std::array<double, kNumRegions> out{};
  for (RegionId r : kAllRegions) {
    const std::uint8_t lab = std::uint8_t(r);
    std::size_t inter = 0, np = 0, nt = 0;
    for (std::size_t i = 0; i < pred.raw().size(); ++i) {
      const bool p = pred.raw()[i] == lab, t = truth.raw()[i] == lab;
      inter += std::size_t(p && t);
      np += std::size_t(p);
      nt += std::size_t(t);
    }
    out[std::size_t(region_index(r))] =
        (np + nt) ? 2.0 * double(inter) / double(np + nt) : 1.0;
  }
  return out;
}

void criterion3() {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst_clean = 1.0, worst_noisy = 1.0;
  std::array<double, kNumRegions> noisy_sum{};
  for (int i = 0; i < 20; ++i) {
    const SubjectSpec spec = sample_subject(CohortId::A, 7300 + std::uint64_t(i));
    {
      auto [vol, labels] = render_phantom(spec, Dims{32, 32, 32}, {0.0});
      const auto dice = dice_per_region(oracle_segment(vol), labels);
      for (double v : dice) {
        worst_clean = std::min(worst_clean, v);
        if (v != 1.0) ok = false;  // exact on noiseless renders
      }
    }
    {
      auto [vol, labels] = render_phantom(spec, Dims{32, 32, 32}, {0.02});
      const auto dice = dice_per_region(oracle_segment(vol), labels);
      for (int r = 0; r < kNumRegions; ++r) noisy_sum[std::size_t(r)] += dice[std::size_t(r)];
    }
  }
  for (int r = 0; r < kNumRegions; ++r) {
    const double mean = noisy_sum[std::size_t(r)] / 20.0;
    worst_noisy = std::min(worst_noisy, mean);
    if (!(mean >= 0.95)) ok = false;
  }
  std::ostringstream d;
  d << "noiseless_min=" << worst_clean << " noisy_min_mean=" << worst_noisy;
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(3, "oracle segmenter dice (1.0 clean, >=0.95 at sigma=0.02)", ok,
         d.str(), secs);
}

// ----------------------------------------------------------------------
// 4-7. Trained VAE + GAN pipeline checks (training shared across criteria).
struct TrainedFamily {
  std::string name;
  std::unique_ptr<Model> model;
  std::map<RegionId, double> effectiveness;
  double mean_effectiveness = 0.0;
};

double mean_map(const std::map<RegionId, double>& m) {
  double s = 0.0;
  for (const auto& [r, v] : m) s += v;
  return s / double(m.size());
}

void criteria4to7() {
  const auto t0 = Clock::now();

  // 200 cohort-A phantoms at 32^3; 180 train / 20 eval, subject-disjoint by
  // construction (one scan per subject).
  const Cohort all = make_cohort(CohortId::A, 200, 32, 0.02, 9000);
  Dataset train_set(all.set.begin(), all.set.begin() + 180);
  Dataset test_set(all.set.begin() + 180, all.set.end());

  std::vector<TrainedFamily> fams;
  for (ModelFamily fam : {ModelFamily::VAE, ModelFamily::GAN}) {
    ModelConfig mc = ModelConfig::defaults_for(fam);
    mc.resolution = 32;
    mc.seed = 1234;
    TrainedFamily tf;
    tf.name = family_name(fam);
    tf.model = train_model(mc, train_set);
    tf.model->set_normalizer(all.norm);
    fams.push_back(std::move(tf));
  }

  // ---- criterion 4 ----
  bool ok4 = true;
  std::ostringstream d4;
  for (TrainedFamily& tf : fams) {
    const ModelConfig& mc = tf.model->config();
    std::unique_ptr<Model> untrained = create_model(mc);
    untrained->set_normalizer(all.norm);
    double untrained_mean = 0.0;
    for (RegionId r : kAllRegions) {
      const std::uint64_t seed = 4242 + std::uint64_t(region_index(r));
      const double mae = effectiveness_score(*tf.model, test_set, r, seed);
      tf.effectiveness[r] = mae;
      untrained_mean += effectiveness_score(*untrained, test_set, r, seed);
      if (!(mae <= 0.25)) ok4 = false;  // (a) per-region MAE bound
    }
    untrained_mean /= double(kNumRegions);
    tf.mean_effectiveness = mean_map(tf.effectiveness);
    if (!(tf.mean_effectiveness < untrained_mean)) ok4 = false;  // (b)
    // (c) conditioning sensitivity: flip the ventricle attribute.
    const TrainItem& item = test_set.front();
    const LatentState z = tf.model->encode(item.vol, item.attrs);
    AttributeVector flipped = item.attrs;
    flipped[RegionId::Ven] = -flipped[RegionId::Ven] + 0.5;
    if (tf.model->decode(z, item.attrs) == tf.model->decode(z, flipped))
      ok4 = false;
    d4 << tf.name << ":mae=" << tf.mean_effectiveness
       << "(untrained=" << untrained_mean << ") ";
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(4, "trained VAE/GAN effectiveness (<=0.25, beats untrained, conditioned)",
         ok4, d4.str(), secs);

  // ---- criterion 5 ----
  const auto t5 = Clock::now();
  bool ok5 = true;
  std::ostringstream d5;
  for (const TrainedFamily& tf : fams) {
    const CompositionResult comp = composition_score(*tf.model, test_set, {1, 10});
    const std::map<int, double> rev =
        reversibility_score(*tf.model, test_set, {1, 3}, 314);
    if (!(comp.l1.at(10) >= comp.l1.at(1) - 0.01)) ok5 = false;
    if (!(rev.at(3) >= rev.at(1) - 0.01)) ok5 = false;
    d5 << tf.name << ":comp=" << comp.l1.at(1) << "->" << comp.l1.at(10)
       << " rev=" << rev.at(1) << "->" << rev.at(3) << " ";
  }
  secs = std::chrono::duration<double>(Clock::now() - t5).count();
  report(5, "drift monotonicity (10 passes >= 1 pass, 3 cycles >= 1 cycle)", ok5,
         d5.str(), secs);

  // ---- criterion 6 ----
  const auto t6 = Clock::now();
  bool ok6 = false;
  std::ostringstream d6;
  for (const TrainedFamily& tf : fams) {
    double nt_sum = 0.0;
    std::size_t nt_n = 0;
    for (RegionId r : kAllRegions) {
      const std::uint64_t seed = 4242 + std::uint64_t(region_index(r));
      for (const auto& [region, mae] : minimality_score(*tf.model, test_set, r, seed)) {
        nt_sum += mae;
        ++nt_n;
      }
    }
    const double nt_mean = nt_sum / double(nt_n);
    d6 << tf.name << ":nontarget=" << nt_mean
       << " target=" << tf.mean_effectiveness << " ";
    if (nt_mean > tf.mean_effectiveness) ok6 = true;
  }
  secs = std::chrono::duration<double>(Clock::now() - t6).count();
  report(6, "minimality gap (some family drifts non-targets more than target error)",
         ok6, d6.str(), secs);

  // ---- criterion 7 ----
  const auto t7 = Clock::now();
  const Cohort b = make_cohort(CohortId::B, 20, 32, 0.02, 9500, &all.norm);
  const Model& vae = *fams[0].model;
  const std::uint64_t ven_seed = 4242 + std::uint64_t(region_index(RegionId::Ven));
  const double mae_a = fams[0].effectiveness.at(RegionId::Ven);
  const double mae_b = generalizability_score(vae, b.set, RegionId::Ven, ven_seed);
  const bool ok7 = mae_b >= mae_a - 0.02;
  std::ostringstream d7;
  d7 << "VAE Ven cohortA=" << mae_a << " cohortB=" << mae_b;
  secs = std::chrono::duration<double>(Clock::now() - t7).count();
  report(7, "generalizability shift (cohort-B >= cohort-A - 0.02)", ok7, d7.str(),
         secs);
}

// ----------------------------------------------------------------------
// 8. Harness hygiene.
std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void criterion8() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;

  // subject-split disjointness over 100 seeds
  std::vector<ScanRecord> scans;
  for (int s = 0; s < 17; ++s)
    for (int k = 0; k < 2; ++k) {
      ScanRecord r;
      r.subject_id = "A" + std::to_string(100 + s);
      r.scan_id = r.subject_id + "_s" + std::to_string(k);
      scans.push_back(std::move(r));
    }
  for (std::uint64_t seed = 0; seed < 100 && ok; ++seed) {
    const auto [train, test] = split_dataset(scans, 0.9, seed);
    std::set<std::string> tr;
    for (const ScanRecord& r : train) tr.insert(r.subject_id);
    for (const ScanRecord& r : test)
      if (tr.count(r.subject_id)) ok = false;
  }
  if (!ok) d << "split-overlap ";

  // rerun determinism + resume-equals-uninterrupted on a tiny identity run
  const fs::path dir = fs::temp_directory_path() / "cfbench_acceptance_run";
  fs::remove_all(dir);
  BenchmarkConfig cfg;
  cfg.subjects_a = 12;
  cfg.subjects_b = 3;
  cfg.scans_per_subject_a = 1;
  cfg.scans_per_subject_b = 1;
  cfg.resolution = 16;
  cfg.split_ratio = 0.8;
  cfg.seed = 3;
  cfg.passes = {1, 2};
  cfg.cycles = {1};
  cfg.out_dir = dir.string();
  ModelConfig mc;
  mc.family = ModelFamily::Identity;
  mc.resolution = 16;
  cfg.models.push_back(mc);

  const BenchmarkOutcome first = run_benchmark(cfg);
  const fs::path run(first.run_dir);
  if (!first.all_ok()) {
    ok = false;
    d << "first-run-failed ";
  }
  const std::string report1 = slurp(run / "report" / "report.json");
  if (report1.empty()) {
    ok = false;
    d << "empty-report ";
  }
  if (run_benchmark(cfg).all_ok() &&
      slurp(run / "report" / "report.json") != report1) {
    ok = false;
    d << "rerun-differs ";
  }
  fs::remove_all(run / "eval");
  fs::remove_all(run / "report");
  if (!run_benchmark(cfg).all_ok() ||
      slurp(run / "report" / "report.json") != report1) {
    ok = false;
    d << "resume-differs ";
  }
  fs::remove_all(dir);

  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(8, "harness hygiene (split disjointness, rerun + resume determinism)",
         ok, d.str(), secs);
}

}  // namespace

int main() {
  criterion1();
  criterion2();
  criterion3();
  criteria4to7();
  criterion8();
  if (g_failures) {
    std::printf("ACCEPTANCE: %d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("ACCEPTANCE: all 8 criteria passed\n");
  return 0;
}
