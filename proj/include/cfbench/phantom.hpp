#pragma once

// Labeled synthetic brain phantoms: two cohorts with controllable region
// volumes, plus the intensity-prototype oracle segmenter used as the
// trusted volume-measurement instrument.

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "cfbench/volume.hpp"

namespace cfbench {

// Intervenable regions. Label codes 1..7; 0 = background, 8 = tissue.
enum class RegionId : std::uint8_t { Fro = 1, Par, Tem, Occ, Cin, Ins, Ven };

inline constexpr int kNumRegions = 7;
inline constexpr std::uint8_t kBackgroundLabel = 0;
inline constexpr std::uint8_t kTissueLabel = 8;

inline constexpr std::array<RegionId, kNumRegions> kAllRegions = {
    RegionId::Fro, RegionId::Par, RegionId::Tem, RegionId::Occ,
    RegionId::Cin, RegionId::Ins, RegionId::Ven};

const char* region_name(RegionId r);
RegionId region_from_name(const std::string& name);
inline int region_index(RegionId r) { return int(r) - 1; }

// Intensity painted for each label code 0..8. Minimum pairwise gap 0.07,
// well above the default noise sigma.
inline constexpr std::array<float, 9> kIntensityPrototypes = {
    0.00f,  // background
    0.55f,  // Fro
    0.62f,  // Par
    0.69f,  // Tem
    0.76f,  // Occ
    0.83f,  // Cin
    0.90f,  // Ins
    0.10f,  // Ven
    0.45f,  // tissue
};

enum class CohortId { A, B };
const char* cohort_name(CohortId c);
CohortId cohort_from_name(const std::string& name);

// One region's geometry: ellipsoid center as a fraction of the brain
// semi-axes, semi-axes in voxels at the 32^3 reference resolution.
struct RegionShape {
  std::array<double, 3> center_frac{};
  std::array<double, 3> semi{};
  bool mirrored = false;  // painted at +x and -x (temporal lobes)
};

struct SubjectSpec {
  std::string subject_id;
  CohortId cohort = CohortId::A;
  std::array<RegionShape, kNumRegions> region_params{};
  std::uint64_t noise_seed = 0;
};

struct RegionOverflow : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using RawVolumes = std::map<RegionId, std::int64_t>;

// Region geometry drawn from the cohort's fixed parameter distributions.
// Pure function of (cohort, rng_seed).
SubjectSpec sample_subject(CohortId cohort, std::uint64_t rng_seed);

// Scale every region's semi-axes so its volume changes by (1 + rel_change).
SubjectSpec jitter_volumes(const SubjectSpec& spec, double rel_change,
                           std::uint64_t noise_seed);

struct RenderOptions {
  double noise_sigma = 0.02;
};

// Paint the brain ellipsoid and the seven region sub-shapes. The LabelMap is
// the exact painted labeling before noise; paint order Fro..Ven, later wins.
// Throws RegionOverflow if a region voxel lands outside the brain mask.
std::pair<Volume3D, LabelMap> render_phantom(const SubjectSpec& spec, Dims dims,
                                             const RenderOptions& opt = {});

// Nearest-prototype classification after an edge-gated 3^3 mean denoising
// pass (neighbors further than the gate from the center value are excluded,
// so noiseless renders segment exactly).
LabelMap oracle_segment(const Volume3D& vol);

// Exact voxel counts per region label.
RawVolumes region_volumes(const LabelMap& labels);

// On-disk scan format: meta.json + volume.f32 + labels.u8 (little-endian,
// C-order, no header).
struct ScanMeta {
  std::string subject_id;
  std::string scan_id;
  CohortId cohort = CohortId::A;
  Dims dims;
  std::uint64_t seed = 0;
  RawVolumes raw_volumes;
};

void save_scan(const std::string& dir, const ScanMeta& meta, const Volume3D& vol,
               const LabelMap& labels);
ScanMeta load_scan_meta(const std::string& dir);
Volume3D load_scan_volume(const std::string& dir);
LabelMap load_scan_labels(const std::string& dir);

}  // namespace cfbench
