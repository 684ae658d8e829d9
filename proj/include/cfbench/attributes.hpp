#pragma once

// The causal graph's parent attributes: the seven region volumes, their
// [-1,1] normalization, do-interventions, and the Fourier conditioning
// embedding.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfbench/phantom.hpp"

namespace cfbench {

enum class AttrSpace { Raw, Normalized };

struct AttributeVector {
  std::array<double, kNumRegions> values{};
  AttrSpace space = AttrSpace::Raw;
  // Set when normalization had to clamp an out-of-range value.
  bool clamped = false;

  double& operator[](RegionId r) { return values[region_index(r)]; }
  double operator[](RegionId r) const { return values[region_index(r)]; }

  static AttributeVector from_raw(const RawVolumes& rv) {
    AttributeVector a;
    a.space = AttrSpace::Raw;
    for (const auto& [r, n] : rv) a[r] = double(n);
    return a;
  }
};

struct DegenerateRange : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Out-of-range normalized values are clamped here, not rejected: cohort-B
// subjects legitimately fall outside the training cohort's range.
inline constexpr double kNormalizedClamp = 1.5;

class Normalizer {
 public:
  Normalizer() = default;

  // Per-region min/max over the training subjects; affine [min,max] -> [-1,1].
  static Normalizer fit(const std::vector<RawVolumes>& train_volumes);

  AttributeVector normalize(const AttributeVector& raw) const;
  AttributeVector denormalize(const AttributeVector& normalized) const;

  double min_raw(RegionId r) const { return min_[region_index(r)]; }
  double max_raw(RegionId r) const { return max_[region_index(r)]; }

  std::string to_json() const;
  static Normalizer from_json(const std::string& text);

  bool operator==(const Normalizer&) const = default;

 private:
  std::array<double, kNumRegions> min_{};
  std::array<double, kNumRegions> max_{};
};

struct Intervention {
  RegionId target = RegionId::Fro;
  double value = 0.0;  // normalized space
};

// Copy with exactly the target coordinate overwritten.
AttributeVector apply_do(const AttributeVector& attrs, const Intervention& iv);

class Rng;
// Target value drawn Uniform[-1, 1].
Intervention sample_intervention(RegionId target, Rng& rng);

using EmbeddingVector = std::vector<double>;

// Concatenation over regions r and bands k of (sin(2^(k-1) pi v_r),
// cos(2^(k-1) pi v_r)); length 2 * bands * 7. The base band is injective
// over the clamped normalized range.
EmbeddingVector fourier_embed(const AttributeVector& attrs, int bands);

inline constexpr int kDefaultFourierBands = 4;

}  // namespace cfbench
