#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "cfbench/phantom.hpp"
#include "cfbench/rng.hpp"

using namespace cfbench;

namespace {

constexpr Dims kDims{32, 32, 32};

double dice(const LabelMap& a, const LabelMap& b, std::uint8_t code) {
  std::int64_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a.raw()[i] == code;
    const bool ib = b.raw()[i] == code;
    na += ia;
    nb += ib;
    inter += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

}  // namespace

TEST_CASE("sample_subject is deterministic and seed-sensitive") {
  const SubjectSpec a1 = sample_subject(CohortId::A, 7);
  const SubjectSpec a2 = sample_subject(CohortId::A, 7);
  CHECK(a1.subject_id == a2.subject_id);
  CHECK(a1.noise_seed == a2.noise_seed);
  for (int r = 0; r < kNumRegions; ++r)
    CHECK(a1.region_params[r].semi == a2.region_params[r].semi);

  const SubjectSpec a3 = sample_subject(CohortId::A, 8);
  bool differ = false;
  for (int r = 0; r < kNumRegions; ++r)
    if (a1.region_params[r].semi != a3.region_params[r].semi) differ = true;
  CHECK(differ);
}

TEST_CASE("cohort A ventricles are larger on average over 200 draws") {
  double mean_a = 0.0, mean_b = 0.0;
  const int n = 200;
  for (int s = 0; s < n; ++s) {
    mean_a += sample_subject(CohortId::A, 1000 + s).region_params[region_index(RegionId::Ven)].semi[0];
    mean_b += sample_subject(CohortId::B, 1000 + s).region_params[region_index(RegionId::Ven)].semi[0];
  }
  CHECK(mean_a / n > mean_b / n);
}

TEST_CASE("cohort A ventricle volumes stochastically dominate cohort B") {
  // Rank test: fraction of (A, B) pairs where A wins should be well above 1/2.
  std::vector<double> va, vb;
  for (int s = 0; s < 200; ++s) {
    va.push_back(sample_subject(CohortId::A, s).region_params[region_index(RegionId::Ven)].semi[0]);
    vb.push_back(sample_subject(CohortId::B, s).region_params[region_index(RegionId::Ven)].semi[0]);
  }
  std::int64_t wins = 0, total = 0;
  for (double a : va)
    for (double b : vb) {
      wins += a > b;
      ++total;
    }
  CHECK(double(wins) / double(total) > 0.8);
}

TEST_CASE("noiseless render paints exact prototypes and is deterministic") {
  const SubjectSpec spec = sample_subject(CohortId::A, 3);
  RenderOptions opt;
  opt.noise_sigma = 0.0;
  auto [vol, labels] = render_phantom(spec, kDims, opt);
  for (std::size_t i = 0; i < vol.size(); ++i)
    CHECK(vol.raw()[i] == kIntensityPrototypes[labels.raw()[i]]);

  auto [vol2, labels2] = render_phantom(spec, kDims, opt);
  CHECK(vol == vol2);
  CHECK(labels == labels2);

  // Noisy render is deterministic too (seed lives in the spec).
  auto [nv1, nl1] = render_phantom(spec, kDims);
  auto [nv2, nl2] = render_phantom(spec, kDims);
  CHECK(nv1 == nv2);
  CHECK(nl1 == nl2);
}

TEST_CASE("ellipsoid voxel count tracks the analytic volume") {
  // Region with semi-axes (4,3,3): expected (4/3)*pi*4*3*3 ~ 151 voxels.
  SubjectSpec spec = sample_subject(CohortId::A, 5);
  RegionShape& ven = spec.region_params[region_index(RegionId::Ven)];
  ven.semi = {4.0, 3.0, 3.0};
  ven.mirrored = false;
  RenderOptions opt;
  opt.noise_sigma = 0.0;
  auto [vol, labels] = render_phantom(spec, kDims, opt);
  const std::int64_t count = region_volumes(labels).at(RegionId::Ven);
  const double analytic = 4.0 / 3.0 * M_PI * 4.0 * 3.0 * 3.0;
  CHECK(std::abs(double(count) - analytic) / analytic < 0.08);
}

TEST_CASE("scaling semi-axes by s scales voxel count by s^3 within 10%") {
  SubjectSpec spec = sample_subject(CohortId::A, 17);
  RenderOptions opt;
  opt.noise_sigma = 0.0;
  auto [v1, l1] = render_phantom(spec, kDims, opt);
  const double base = double(region_volumes(l1).at(RegionId::Ven));

  const double s = 1.25;
  SubjectSpec big = spec;
  for (double& x : big.region_params[region_index(RegionId::Ven)].semi) x *= s;
  auto [v2, l2] = render_phantom(big, kDims, opt);
  const double scaled = double(region_volumes(l2).at(RegionId::Ven));
  CHECK(std::abs(scaled / base - s * s * s) / (s * s * s) < 0.10);
}

TEST_CASE("region overflow raises") {
  SubjectSpec spec = sample_subject(CohortId::A, 1);
  spec.region_params[region_index(RegionId::Fro)].semi = {14.0, 14.0, 14.0};
  CHECK_THROWS_AS(render_phantom(spec, kDims), RegionOverflow);
}

TEST_CASE("oracle recovers the exact labeling on noiseless phantoms") {
  const SubjectSpec spec = sample_subject(CohortId::A, 9);
  RenderOptions opt;
  opt.noise_sigma = 0.0;
  auto [vol, labels] = render_phantom(spec, kDims, opt);
  const LabelMap seg = oracle_segment(vol);
  CHECK(seg == labels);
  for (RegionId r : kAllRegions) CHECK(dice(seg, labels, std::uint8_t(r)) == 1.0);
}

TEST_CASE("oracle dice >= 0.95 per region at sigma 0.02 over 20 phantoms") {
  for (int s = 0; s < 20; ++s) {
    const SubjectSpec spec = sample_subject(CohortId::A, 100 + s);
    auto [vol, labels] = render_phantom(spec, kDims);
    const LabelMap seg = oracle_segment(vol);
    for (RegionId r : kAllRegions) {
      CHECK(dice(seg, labels, std::uint8_t(r)) >= 0.95);
    }
  }
}

TEST_CASE("constant tissue image segments to all tissue") {
  Volume3D v(kDims, kIntensityPrototypes[kTissueLabel]);
  const LabelMap seg = oracle_segment(v);
  for (std::uint8_t code : seg.raw()) CHECK(code == kTissueLabel);
}

TEST_CASE("region_volumes equals a brute-force label histogram") {
  const SubjectSpec spec = sample_subject(CohortId::B, 21);
  auto [vol, labels] = render_phantom(spec, kDims);
  std::map<std::uint8_t, std::int64_t> hist;
  for (std::uint8_t code : labels.raw()) ++hist[code];
  const RawVolumes rv = region_volumes(labels);
  for (RegionId r : kAllRegions) {
    const auto it = hist.find(std::uint8_t(r));
    CHECK(rv.at(r) == (it == hist.end() ? 0 : it->second));
  }

  LabelMap empty(kDims, kBackgroundLabel);
  for (const auto& [r, n] : region_volumes(empty)) CHECK(n == 0);
}

TEST_CASE("scan directory round-trips bit-exactly") {
  const SubjectSpec spec = sample_subject(CohortId::A, 33);
  auto [vol, labels] = render_phantom(spec, kDims);
  ScanMeta meta;
  meta.subject_id = spec.subject_id;
  meta.scan_id = spec.subject_id + "_s0";
  meta.cohort = spec.cohort;
  meta.dims = kDims;
  meta.seed = 33;
  meta.raw_volumes = region_volumes(labels);

  const std::string dir =
      (std::filesystem::temp_directory_path() / "cfbench_scan_test").string();
  std::filesystem::remove_all(dir);
  save_scan(dir, meta, vol, labels);

  const ScanMeta m2 = load_scan_meta(dir);
  CHECK(m2.subject_id == meta.subject_id);
  CHECK(m2.scan_id == meta.scan_id);
  CHECK(m2.cohort == meta.cohort);
  CHECK(m2.dims == meta.dims);
  CHECK(m2.seed == meta.seed);
  CHECK(m2.raw_volumes == meta.raw_volumes);
  CHECK(load_scan_volume(dir) == vol);
  CHECK(load_scan_labels(dir) == labels);
  std::filesystem::remove_all(dir);
}

TEST_CASE("jitter_volumes scales volume by the requested fraction") {
  SubjectSpec spec = sample_subject(CohortId::A, 55);
  SubjectSpec j = jitter_volumes(spec, 0.03, 99);
  const int vi = region_index(RegionId::Ven);
  const double ratio = std::pow(j.region_params[vi].semi[0] / spec.region_params[vi].semi[0], 3);
  CHECK(ratio == doctest::Approx(1.03).epsilon(1e-9));
  CHECK(j.noise_seed == 99);
}
