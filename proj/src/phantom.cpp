#include "cfbench/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cfbench/rng.hpp"

namespace cfbench {

namespace fs = std::filesystem;
using nlohmann::json;

const char* region_name(RegionId r) {
  switch (r) {
    case RegionId::Fro: return "Fro";
    case RegionId::Par: return "Par";
    case RegionId::Tem: return "Tem";
    case RegionId::Occ: return "Occ";
    case RegionId::Cin: return "Cin";
    case RegionId::Ins: return "Ins";
    case RegionId::Ven: return "Ven";
  }
  return "?";
}

RegionId region_from_name(const std::string& name) {
  for (RegionId r : kAllRegions)
    if (name == region_name(r)) return r;
  throw std::invalid_argument("unknown region: " + name);
}

const char* cohort_name(CohortId c) { return c == CohortId::A ? "A" : "B"; }

CohortId cohort_from_name(const std::string& name) {
  if (name == "A") return CohortId::A;
  if (name == "B") return CohortId::B;
  throw std::invalid_argument("unknown cohort: " + name);
}

namespace {

// Brain ellipsoid semi-axes as a fraction of the half-extent per axis.
constexpr std::array<double, 3> kBrainFrac = {0.84, 0.92, 0.84};

struct RegionPrior {
  std::array<double, 3> center_frac;
  std::array<double, 3> anisotropy;  // per-axis multiplier on the base size
  double mean_a, sd_a;               // base semi-axis, cohort A
  double mean_b, sd_b;               // cohort B
  bool mirrored;
};

// Canonical layout: Ven central, Fro anterior (+y), Occ posterior, Par
// superior-posterior, Tem bilateral-inferior, Cin medial-superior, Ins
// lateral-deep. Cohort A has larger ventricles (elderly-like), cohort B
// slightly larger cortical regions (adolescent-like).
constexpr std::array<RegionPrior, kNumRegions> kPriors = {{
    // Fro
    {{0.00, 0.55, 0.10}, {1.15, 1.00, 0.95}, 3.2, 0.40, 3.35, 0.40, false},
    // Par
    {{0.00, -0.30, 0.60}, {1.10, 1.00, 0.85}, 2.8, 0.35, 2.95, 0.35, false},
    // Tem (mirrored)
    {{0.60, 0.05, -0.45}, {0.85, 1.15, 0.90}, 2.4, 0.30, 2.50, 0.30, true},
    // Occ
    {{0.00, -0.62, 0.00}, {1.10, 0.90, 1.00}, 2.6, 0.32, 2.70, 0.32, false},
    // Cin
    {{0.00, 0.25, 0.55}, {0.80, 1.25, 0.85}, 2.0, 0.26, 2.10, 0.26, false},
    // Ins
    {{0.50, 0.18, 0.00}, {0.80, 1.10, 1.00}, 2.1, 0.28, 2.20, 0.28, false},
    // Ven
    {{0.00, 0.00, 0.00}, {0.90, 1.20, 1.00}, 3.6, 0.45, 2.50, 0.32, false},
}};

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

SubjectSpec sample_subject(CohortId cohort, std::uint64_t rng_seed) {
  Rng rng(rng_seed ^ (cohort == CohortId::B ? 0xb0b0b0b0ull : 0ull));
  SubjectSpec spec;
  spec.cohort = cohort;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%06llu", cohort_name(cohort),
                static_cast<unsigned long long>(rng_seed));
  spec.subject_id = buf;
  spec.noise_seed = rng.next_u64();
  for (int i = 0; i < kNumRegions; ++i) {
    const RegionPrior& p = kPriors[i];
    const double mean = cohort == CohortId::A ? p.mean_a : p.mean_b;
    const double sd = cohort == CohortId::A ? p.sd_a : p.sd_b;
    const double base = clamp(rng.normal(mean, sd), mean - 2.0 * sd, mean + 2.0 * sd);
    RegionShape& shape = spec.region_params[i];
    shape.center_frac = p.center_frac;
    shape.mirrored = p.mirrored;
    for (int a = 0; a < 3; ++a) shape.semi[a] = base * p.anisotropy[a];
  }
  return spec;
}

SubjectSpec jitter_volumes(const SubjectSpec& spec, double rel_change,
                           std::uint64_t noise_seed) {
  SubjectSpec out = spec;
  const double s = std::cbrt(1.0 + rel_change);
  for (auto& shape : out.region_params)
    for (double& semi : shape.semi) semi *= s;
  out.noise_seed = noise_seed;
  return out;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // voxel coordinates
  std::array<double, 3> semi;    // voxels

  bool contains(int i, int j, int k) const {
    const double dx = (i - center[0]) / semi[0];
    const double dy = (j - center[1]) / semi[1];
    const double dz = (k - center[2]) / semi[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

void paint_region(LabelMap& labels, const Ellipsoid& brain, const Ellipsoid& e,
                  std::uint8_t code) {
  const Dims d = labels.dims();
  const int x0 = std::max(0, int(std::floor(e.center[0] - e.semi[0])));
  const int x1 = std::min(d.x - 1, int(std::ceil(e.center[0] + e.semi[0])));
  const int y0 = std::max(0, int(std::floor(e.center[1] - e.semi[1])));
  const int y1 = std::min(d.y - 1, int(std::ceil(e.center[1] + e.semi[1])));
  const int z0 = std::max(0, int(std::floor(e.center[2] - e.semi[2])));
  const int z1 = std::min(d.z - 1, int(std::ceil(e.center[2] + e.semi[2])));
  for (int i = x0; i <= x1; ++i)
    for (int j = y0; j <= y1; ++j)
      for (int k = z0; k <= z1; ++k) {
        if (!e.contains(i, j, k)) continue;
        if (!brain.contains(i, j, k))
          throw RegionOverflow(std::string("region ") + std::to_string(code) +
                               " exits the brain mask");
        labels.at(i, j, k) = code;
      }
}

}  // namespace

std::pair<Volume3D, LabelMap> render_phantom(const SubjectSpec& spec, Dims dims,
                                             const RenderOptions& opt) {
  if (dims.x < 16 || dims.y < 16 || dims.z < 16)
    throw std::invalid_argument("render_phantom: dims must be >= 16 per axis");

  const std::array<double, 3> half = {(dims.x - 1) / 2.0, (dims.y - 1) / 2.0,
                                      (dims.z - 1) / 2.0};
  Ellipsoid brain{{half[0], half[1], half[2]},
                  {kBrainFrac[0] * half[0], kBrainFrac[1] * half[1],
                   kBrainFrac[2] * half[2]}};

  LabelMap labels(dims, kBackgroundLabel);
  const Dims d = dims;
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k)
        if (brain.contains(i, j, k)) labels.at(i, j, k) = kTissueLabel;

  // Region semi-axes are specified at the 32^3 reference scale.
  const double scale = double(std::min({d.x, d.y, d.z})) / 32.0;
  for (int r = 0; r < kNumRegions; ++r) {
    const RegionShape& shape = spec.region_params[r];
    const std::uint8_t code = std::uint8_t(r + 1);
    Ellipsoid e;
    for (int a = 0; a < 3; ++a) {
      e.center[a] = half[a] + shape.center_frac[a] * brain.semi[a];
      e.semi[a] = shape.semi[a] * scale;
      if (e.semi[a] <= 0.0) throw std::invalid_argument("non-positive semi-axis");
    }
    paint_region(labels, brain, e, code);
    if (shape.mirrored) {
      Ellipsoid m = e;
      m.center[0] = half[0] - shape.center_frac[0] * brain.semi[0];
      paint_region(labels, brain, m, code);
    }
  }

  Volume3D vol(dims);
  for (std::size_t i = 0; i < labels.size(); ++i)
    vol.raw()[i] = kIntensityPrototypes[labels.raw()[i]];

  if (opt.noise_sigma > 0.0) {
    Rng noise(spec.noise_seed);
    for (float& v : vol.raw())
      v = float(clamp(v + opt.noise_sigma * noise.normal(), 0.0, 1.0));
  }
  return {std::move(vol), std::move(labels)};
}

namespace {

// Neighbors further than this from the center voxel are treated as belonging
// to a different structure and excluded from the mean. Strictly below the
// minimum prototype gap (0.07) so noiseless renders are untouched.
constexpr float kDenoiseGate = 0.045f;

std::uint8_t nearest_prototype(float v) {
  std::uint8_t best = 0;
  float best_d = std::abs(v - kIntensityPrototypes[0]);
  for (std::uint8_t c = 1; c < 9; ++c) {
    const float dd = std::abs(v - kIntensityPrototypes[c]);
    if (dd < best_d) {
      best_d = dd;
      best = c;
    }
  }
  return best;
}

}  // namespace

namespace {

// One edge-gated 3^3 mean pass: neighbors further than the gate from the
// center value are excluded. On a noiseless render every in-gate neighbor
// equals the center exactly (prototype gaps exceed the gate), so this is the
// identity there.
Volume3D gated_mean_pass(const Volume3D& vol) {
  const Dims d = vol.dims();
  Volume3D out(d);
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k) {
        const float c = vol.at(i, j, k);
        float sum = 0.0f;
        int cnt = 0;
        for (int a = std::max(0, i - 1); a <= std::min(d.x - 1, i + 1); ++a)
          for (int b = std::max(0, j - 1); b <= std::min(d.y - 1, j + 1); ++b)
            for (int e = std::max(0, k - 1); e <= std::min(d.z - 1, k + 1); ++e) {
              const float v = vol.at(a, b, e);
              if (std::abs(v - c) <= kDenoiseGate) {
                sum += v;
                ++cnt;
              }
            }
        out.at(i, j, k) = sum / float(cnt);
      }
  return out;
}

}  // namespace

LabelMap oracle_segment(const Volume3D& vol) {
  // Two passes: the first shrinks noise well below the gate, the second then
  // cleanly rejects cross-label leakage at region boundaries.
  const Volume3D smooth = gated_mean_pass(gated_mean_pass(vol));
  const Dims d = vol.dims();
  LabelMap out(d);
  for (std::size_t i = 0; i < smooth.raw().size(); ++i)
    out.raw()[i] = nearest_prototype(smooth.raw()[i]);
  return out;
}

RawVolumes region_volumes(const LabelMap& labels) {
  std::array<std::int64_t, kNumRegions> counts{};
  for (std::uint8_t code : labels.raw())
    if (code >= 1 && code <= kNumRegions) ++counts[code - 1];
  RawVolumes out;
  for (RegionId r : kAllRegions) out[r] = counts[region_index(r)];
  return out;
}

void save_scan(const std::string& dir, const ScanMeta& meta, const Volume3D& vol,
               const LabelMap& labels) {
  if (vol.dims() != meta.dims || labels.dims() != meta.dims)
    throw ShapeMismatch("save_scan: dims disagree with meta");
  fs::create_directories(dir);
  json j;
  j["subject_id"] = meta.subject_id;
  j["scan_id"] = meta.scan_id;
  j["cohort"] = cohort_name(meta.cohort);
  j["dims"] = {meta.dims.x, meta.dims.y, meta.dims.z};
  j["seed"] = meta.seed;
  json rv;
  for (const auto& [r, n] : meta.raw_volumes) rv[region_name(r)] = n;
  j["raw_volumes"] = rv;
  std::ofstream(fs::path(dir) / "meta.json") << j.dump(2) << "\n";

  std::ofstream fv(fs::path(dir) / "volume.f32", std::ios::binary);
  fv.write(reinterpret_cast<const char*>(vol.data()),
           std::streamsize(vol.size() * sizeof(float)));
  std::ofstream fl(fs::path(dir) / "labels.u8", std::ios::binary);
  fl.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
}

ScanMeta load_scan_meta(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "meta.json");
  if (!in) throw std::runtime_error("missing meta.json in " + dir);
  json j = json::parse(in);
  ScanMeta meta;
  meta.subject_id = j.at("subject_id").get<std::string>();
  meta.scan_id = j.value("scan_id", std::string{});
  meta.cohort = cohort_from_name(j.at("cohort").get<std::string>());
  const auto& dd = j.at("dims");
  meta.dims = {dd.at(0).get<int>(), dd.at(1).get<int>(), dd.at(2).get<int>()};
  meta.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& [name, n] : j.at("raw_volumes").items())
    meta.raw_volumes[region_from_name(name)] = n.get<std::int64_t>();
  return meta;
}

Volume3D load_scan_volume(const std::string& dir) {
  const ScanMeta meta = load_scan_meta(dir);
  Volume3D vol(meta.dims);
  std::ifstream in(fs::path(dir) / "volume.f32", std::ios::binary);
  if (!in) throw std::runtime_error("missing volume.f32 in " + dir);
  in.read(reinterpret_cast<char*>(vol.data()), std::streamsize(vol.size() * sizeof(float)));
  if (std::size_t(in.gcount()) != vol.size() * sizeof(float))
    throw std::runtime_error("short read on volume.f32 in " + dir);
  return vol;
}

LabelMap load_scan_labels(const std::string& dir) {
  const ScanMeta meta = load_scan_meta(dir);
  LabelMap labels(meta.dims);
  std::ifstream in(fs::path(dir) / "labels.u8", std::ios::binary);
  if (!in) throw std::runtime_error("missing labels.u8 in " + dir);
  in.read(reinterpret_cast<char*>(labels.data()), std::streamsize(labels.size()));
  if (std::size_t(in.gcount()) != labels.size())
    throw std::runtime_error("short read on labels.u8 in " + dir);
  return labels;
}

}  // namespace cfbench
