#pragma once

// The six evaluation axes (composition, reversibility, realism,
// effectiveness, minimality, generalizability) and their primitives:
// l1, 3D SSIM, fixed-seed convolutional features, Frechet distance.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfbench/models.hpp"
#include "cfbench/phantom.hpp"
#include "cfbench/volume.hpp"

namespace cfbench {

struct SsimParams {
  double sigma = 1.5;  // Gaussian window std in voxels
  int radius = 3;      // window half-width
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

struct InsufficientSamples : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mean absolute voxel difference.
double l1_distance(const Volume3D& a, const Volume3D& b);

// Mean local SSIM over voxels whose Gaussian window lies fully inside the
// volume; standard stabilized formula with C1=(K1 L)^2, C2=(K2 L)^2.
double ssim3d(const Volume3D& a, const Volume3D& b, const SsimParams& p = {});

// Untrained 3D conv embedding with weights frozen from a fixed seed:
// 4 stride-2 conv blocks (1->8->16->32->64 channels, kernel 3, pad 1) with
// ReLU, then global average pooling to a 64-dim vector.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(int input_edge = 32, std::uint64_t seed = 0x3dfeA7u);

  int input_edge() const { return input_edge_; }
  int dim() const { return 64; }

  std::vector<double> extract(const Volume3D& vol) const;

 private:
  int input_edge_ = 32;
  // per block: weights (cout x cin x 27) then bias (cout)
  std::vector<std::vector<float>> weights_, biases_;
  std::vector<int> channels_;
};

std::vector<double> extract_features(const FeatureExtractor& fx, const Volume3D& vol);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), square root via
// eigendecomposition of the symmetrized product. Eigenvalues in [-1e-10, 0)
// are clipped to 0; more negative ones raise NumericalError. Result floored
// at 0. Requires >= 2 samples per set.
double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b);

// Principal square root of a symmetric PSD matrix (row-major dim x dim),
// with the same eigenvalue clipping rule as frechet_distance.
std::vector<double> sqrtm_spd(const std::vector<double>& m, int dim);

struct CompositionResult {
  std::map<int, double> l1;    // keyed by pass count
  std::map<int, double> ssim;
};

// Mean over subjects of l1/SSIM between the factual image and the null-pass
// chain output at each requested pass count.
CompositionResult composition_score(const Model& model, const Dataset& test_set,
                                    const std::vector<int>& passes);

// Mean over subjects and all 7 target regions of l1(factual, chain output)
// at each requested cycle count.
std::map<int, double> reversibility_score(const Model& model, const Dataset& test_set,
                                          const std::vector<int>& cycles,
                                          std::uint64_t seed);

// Frechet distance between features of the factual test images and features
// of their 1-pass null-intervention counterfactuals.
double realism_score(const Model& model, const Dataset& test_set,
                     const FeatureExtractor& fx);

// Per subject: sample target value, generate the counterfactual, oracle-
// segment it, measure the realized normalized volume; MAE to the target.
double effectiveness_score(const Model& model, const Dataset& test_set,
                           RegionId target, std::uint64_t seed);

// Same generation protocol; MAE per non-target region between factual and
// realized normalized volumes (6 entries).
std::map<RegionId, double> minimality_score(const Model& model,
                                            const Dataset& test_set, RegionId target,
                                            std::uint64_t seed);

// Effectiveness protocol on cohort-B images with the cohort-A normalizer
// already embedded in the checkpoint.
double generalizability_score(const Model& model, const Dataset& cohort_b_set,
                              RegionId target, std::uint64_t seed);

struct MetricReport {
  std::string model_name;
  std::map<int, double> composition_l1, composition_ssim;  // pass count
  std::map<int, double> reversibility_l1;                  // cycle count
  double realism_fid = 0.0;
  std::map<RegionId, double> effectiveness;                         // per target
  std::map<RegionId, std::map<RegionId, double>> minimality;        // target -> region
  std::map<RegionId, double> generalizability;                      // per target
};

}  // namespace cfbench
