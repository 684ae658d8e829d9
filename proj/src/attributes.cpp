#include "cfbench/attributes.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cfbench/rng.hpp"

namespace cfbench {

using nlohmann::json;

Normalizer Normalizer::fit(const std::vector<RawVolumes>& train_volumes) {
  if (train_volumes.size() < 2)
    throw std::invalid_argument("Normalizer::fit: need >= 2 subjects");
  Normalizer n;
  n.min_.fill(std::numeric_limits<double>::infinity());
  n.max_.fill(-std::numeric_limits<double>::infinity());
  for (const RawVolumes& rv : train_volumes) {
    for (const auto& [r, count] : rv) {
      const int i = region_index(r);
      n.min_[i] = std::min(n.min_[i], double(count));
      n.max_[i] = std::max(n.max_[i], double(count));
    }
  }
  for (RegionId r : kAllRegions) {
    const int i = region_index(r);
    if (!(n.max_[i] > n.min_[i]))
      throw DegenerateRange(std::string("degenerate range for region ") + region_name(r));
  }
  return n;
}

AttributeVector Normalizer::normalize(const AttributeVector& raw) const {
  if (raw.space != AttrSpace::Raw)
    throw std::invalid_argument("normalize: input must be in Raw space");
  AttributeVector out;
  out.space = AttrSpace::Normalized;
  for (RegionId r : kAllRegions) {
    const int i = region_index(r);
    double v = -1.0 + 2.0 * (raw.values[i] - min_[i]) / (max_[i] - min_[i]);
    if (v < -kNormalizedClamp || v > kNormalizedClamp) {
      v = std::clamp(v, -kNormalizedClamp, kNormalizedClamp);
      out.clamped = true;
    }
    out.values[i] = v;
  }
  return out;
}

AttributeVector Normalizer::denormalize(const AttributeVector& normalized) const {
  if (normalized.space != AttrSpace::Normalized)
    throw std::invalid_argument("denormalize: input must be in Normalized space");
  AttributeVector out;
  out.space = AttrSpace::Raw;
  for (RegionId r : kAllRegions) {
    const int i = region_index(r);
    out.values[i] = min_[i] + (normalized.values[i] + 1.0) * 0.5 * (max_[i] - min_[i]);
  }
  return out;
}

std::string Normalizer::to_json() const {
  json j;
  for (RegionId r : kAllRegions)
    j[region_name(r)] = {{"min", min_[region_index(r)]}, {"max", max_[region_index(r)]}};
  return j.dump(2);
}

Normalizer Normalizer::from_json(const std::string& text) {
  const json j = json::parse(text);
  Normalizer n;
  for (RegionId r : kAllRegions) {
    const auto& e = j.at(region_name(r));
    const int i = region_index(r);
    n.min_[i] = e.at("min").get<double>();
    n.max_[i] = e.at("max").get<double>();
    if (!(n.max_[i] > n.min_[i]))
      throw DegenerateRange(std::string("degenerate range for region ") + region_name(r));
  }
  return n;
}

AttributeVector apply_do(const AttributeVector& attrs, const Intervention& iv) {
  if (attrs.space != AttrSpace::Normalized)
    throw std::invalid_argument("apply_do: attributes must be normalized");
  AttributeVector out = attrs;
  out[iv.target] = iv.value;
  return out;
}

Intervention sample_intervention(RegionId target, Rng& rng) {
  return Intervention{target, rng.uniform(-1.0, 1.0)};
}

EmbeddingVector fourier_embed(const AttributeVector& attrs, int bands) {
  if (attrs.space != AttrSpace::Normalized)
    throw std::invalid_argument("fourier_embed: attributes must be normalized");
  if (bands < 1) throw std::invalid_argument("fourier_embed: bands must be >= 1");
  EmbeddingVector out;
  out.reserve(std::size_t(2 * bands * kNumRegions));
  for (RegionId r : kAllRegions) {
    const double v = attrs[r];
    // Base frequency pi/2: the lowest band is injective (and monotone in its
    // sine coordinate) across the whole clamped range [-1.5, 1.5]. A base of
    // pi would alias v = -1 with v = +1, collapsing the extremes of the
    // intervention range onto one embedding.
    double freq = M_PI / 2.0;
    for (int k = 0; k < bands; ++k) {
      out.push_back(std::sin(freq * v));
      out.push_back(std::cos(freq * v));
      freq *= 2.0;
    }
  }
  return out;
}

}  // namespace cfbench
