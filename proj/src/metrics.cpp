#include "cfbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "cfbench/engine.hpp"
#include "cfbench/kernels.hpp"
#include "cfbench/rng.hpp"

namespace cfbench {

double l1_distance(const Volume3D& a, const Volume3D& b) {
  if (a.dims() != b.dims()) throw ShapeMismatch("l1_distance: dims differ");
  return kernels::active().sum_abs_diff(a.data(), b.data(), a.size()) /
         double(a.size());
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

// Separable Gaussian smoothing along one axis; boundary handled by renormal-
// izing over in-bounds taps (interior voxels are unaffected, and only
// interior voxels enter the final mean).
void gauss_axis(const std::vector<double>& src, Dims d, int axis,
                const std::vector<double>& taps, std::vector<double>& dst) {
  const int radius = int(taps.size() / 2);
  const int strides[3] = {d.y * d.z, d.z, 1};
  const int extents[3] = {d.x, d.y, d.z};
  dst.assign(src.size(), 0.0);
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k) {
        const int pos[3] = {i, j, k};
        const std::size_t base = std::size_t(i) * strides[0] +
                                 std::size_t(j) * strides[1] + std::size_t(k);
        double acc = 0.0, wsum = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const int q = pos[axis] + t;
          if (q < 0 || q >= extents[axis]) continue;
          const double w = taps[std::size_t(t + radius)];
          acc += w * src[base + std::size_t(t) * strides[axis]];
          wsum += w;
        }
        dst[base] = acc / wsum;
      }
}

void gauss3(const std::vector<double>& src, Dims d, const std::vector<double>& taps,
            std::vector<double>& dst, std::vector<double>& scratch) {
  gauss_axis(src, d, 0, taps, dst);
  gauss_axis(dst, d, 1, taps, scratch);
  gauss_axis(scratch, d, 2, taps, dst);
}

}  // namespace

double ssim3d(const Volume3D& a, const Volume3D& b, const SsimParams& p) {
  if (a.dims() != b.dims()) throw ShapeMismatch("ssim3d: dims differ");
  const Dims d = a.dims();
  const int r = p.radius;
  if (d.x < 2 * r + 1 || d.y < 2 * r + 1 || d.z < 2 * r + 1)
    throw ShapeMismatch("ssim3d: volume smaller than SSIM window");

  std::vector<double> taps(std::size_t(2 * r + 1));
  double tsum = 0.0;
  for (int t = -r; t <= r; ++t) {
    taps[std::size_t(t + r)] = std::exp(-0.5 * (t * t) / (p.sigma * p.sigma));
    tsum += taps[std::size_t(t + r)];
  }
  for (double& w : taps) w /= tsum;

  const std::size_t n = a.size();
  std::vector<double> xa(n), xb(n), xa2(n), xb2(n), xab(n);
  for (std::size_t i = 0; i < n; ++i) {
    xa[i] = a.data()[i];
    xb[i] = b.data()[i];
    xa2[i] = xa[i] * xa[i];
    xb2[i] = xb[i] * xb[i];
    xab[i] = xa[i] * xb[i];
  }
  std::vector<double> mua, mub, ma2, mb2, mab, scratch;
  gauss3(xa, d, taps, mua, scratch);
  gauss3(xb, d, taps, mub, scratch);
  gauss3(xa2, d, taps, ma2, scratch);
  gauss3(xb2, d, taps, mb2, scratch);
  gauss3(xab, d, taps, mab, scratch);

  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);

  double total = 0.0;
  std::size_t count = 0;
  for (int i = r; i < d.x - r; ++i)
    for (int j = r; j < d.y - r; ++j)
      for (int k = r; k < d.z - r; ++k) {
        const std::size_t idx =
            (std::size_t(i) * d.y + std::size_t(j)) * d.z + std::size_t(k);
        const double ma = mua[idx], mb = mub[idx];
        const double va = ma2[idx] - ma * ma;
        const double vb = mb2[idx] - mb * mb;
        const double cov = mab[idx] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

// ---------------------------------------------------------------------------
// Feature extractor

FeatureExtractor::FeatureExtractor(int input_edge, std::uint64_t seed)
    : input_edge_(input_edge), channels_({1, 8, 16, 32, 64}) {
  if (input_edge < 16) throw std::invalid_argument("feature extractor needs edge >= 16");
  Rng rng(seed);
  for (std::size_t b = 0; b + 1 < channels_.size(); ++b) {
    const int cin = channels_[b], cout = channels_[b + 1];
    std::vector<float> w(std::size_t(cout) * cin * 27);
    const double scale = std::sqrt(2.0 / (cin * 27.0));
    for (float& v : w) v = float(rng.normal() * scale);
    weights_.push_back(std::move(w));
    std::vector<float> bias(std::size_t(cout), 0.0f);
    for (float& v : bias) v = float(rng.normal() * 0.01);
    biases_.push_back(std::move(bias));
  }
}

std::vector<double> FeatureExtractor::extract(const Volume3D& vol) const {
  const int e = input_edge_;
  if (vol.dims() != Dims{e, e, e})
    throw ShapeMismatch("feature extractor: input dims mismatch");

  std::vector<float> cur(vol.data(), vol.data() + vol.size());
  int edge = e;
  int cin = 1;
  for (std::size_t blk = 0; blk < weights_.size(); ++blk) {
    const int cout = channels_[blk + 1];
    const int oe = edge / 2;  // stride 2, pad 1, kernel 3
    std::vector<float> next(std::size_t(cout) * oe * oe * oe, 0.0f);
    const std::vector<float>& W = weights_[blk];
    for (int co = 0; co < cout; ++co)
      for (int oi = 0; oi < oe; ++oi)
        for (int oj = 0; oj < oe; ++oj)
          for (int ok = 0; ok < oe; ++ok) {
            float acc = biases_[blk][std::size_t(co)];
            for (int ci = 0; ci < cin; ++ci)
              for (int a = 0; a < 3; ++a) {
                const int ii = 2 * oi + a - 1;
                if (ii < 0 || ii >= edge) continue;
                for (int b = 0; b < 3; ++b) {
                  const int jj = 2 * oj + b - 1;
                  if (jj < 0 || jj >= edge) continue;
                  for (int c = 0; c < 3; ++c) {
                    const int kk = 2 * ok + c - 1;
                    if (kk < 0 || kk >= edge) continue;
                    acc += W[((std::size_t(co) * cin + ci) * 27) +
                             std::size_t(a) * 9 + std::size_t(b) * 3 + c] *
                           cur[((std::size_t(ci) * edge + ii) * edge + jj) * edge + kk];
                  }
                }
              }
            next[((std::size_t(co) * oe + oi) * oe + oj) * oe + ok] =
                acc > 0.0f ? acc : 0.0f;
          }
    cur.swap(next);
    edge = oe;
    cin = cout;
  }

  std::vector<double> out(std::size_t(cin), 0.0);
  const std::size_t voxels = std::size_t(edge) * edge * edge;
  for (int c = 0; c < cin; ++c) {
    double s = 0.0;
    for (std::size_t v = 0; v < voxels; ++v) s += cur[std::size_t(c) * voxels + v];
    out[std::size_t(c)] = s / double(voxels);
  }
  return out;
}

std::vector<double> extract_features(const FeatureExtractor& fx, const Volume3D& vol) {
  return fx.extract(vol);
}

// ---------------------------------------------------------------------------
// Frechet distance

namespace {

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < 0.0) {
      if (ev[i] < -1e-10)
        throw NumericalError("matrix square root: eigenvalue below -1e-10");
      ev[i] = 0.0;
    }
  }
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

}  // namespace

std::vector<double> sqrtm_spd(const std::vector<double>& m, int dim) {
  if (dim < 1 || m.size() != std::size_t(dim) * dim)
    throw ShapeMismatch("sqrtm_spd: bad matrix size");
  Eigen::MatrixXd em(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) em(i, j) = m[std::size_t(i) * dim + j];
  const Eigen::MatrixXd s = sqrtm_psd(0.5 * (em + em.transpose()));
  std::vector<double> out(std::size_t(dim) * dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) out[std::size_t(i) * dim + j] = s(i, j);
  return out;
}

double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b) {
  if (feats_a.size() < 2 || feats_b.size() < 2)
    throw InsufficientSamples("frechet_distance needs >= 2 samples per set");
  const int dim = int(feats_a.front().size());
  if (int(feats_b.front().size()) != dim)
    throw ShapeMismatch("frechet_distance: feature dims differ");

  const auto stats = [dim](const std::vector<std::vector<double>>& feats) {
    Eigen::MatrixXd X(feats.size(), dim);
    for (std::size_t i = 0; i < feats.size(); ++i)
      for (int j = 0; j < dim; ++j) X(int(i), j) = feats[i][std::size_t(j)];
    const Eigen::VectorXd mu = X.colwise().mean();
    const Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
    const Eigen::MatrixXd cov =
        centered.transpose() * centered / double(feats.size() - 1);
    return std::pair<Eigen::VectorXd, Eigen::MatrixXd>(mu, cov);
  };

  const auto [mua, cova] = stats(feats_a);
  const auto [mub, covb] = stats(feats_b);

  // Symmetrized product sqrt: sqrt(Sa) Sb sqrt(Sa) is PSD whenever the
  // inputs are, unlike Sa*Sb directly.
  const Eigen::MatrixXd ra = sqrtm_psd(cova);
  const Eigen::MatrixXd inner = ra * covb * ra;
  const Eigen::MatrixXd covmean = sqrtm_psd(0.5 * (inner + inner.transpose()));

  const double diff = (mua - mub).squaredNorm();
  const double tr = cova.trace() + covb.trace() - 2.0 * covmean.trace();
  return std::max(0.0, diff + tr);
}

// ---------------------------------------------------------------------------
// Aggregate scores

CompositionResult composition_score(const Model& model, const Dataset& test_set,
                                    const std::vector<int>& passes) {
  if (test_set.empty()) throw std::invalid_argument("composition: empty test set");
  const int max_pass = *std::max_element(passes.begin(), passes.end());
  CompositionResult result;
  for (int p : passes) {
    result.l1[p] = 0.0;
    result.ssim[p] = 0.0;
  }
  for (const TrainItem& item : test_set) {
    const std::vector<Volume3D> chain =
        null_pass_chain(model, item.vol, item.attrs, max_pass);
    for (int p : passes) {
      result.l1[p] += l1_distance(item.vol, chain[std::size_t(p - 1)]);
      result.ssim[p] += ssim3d(item.vol, chain[std::size_t(p - 1)]);
    }
  }
  for (int p : passes) {
    result.l1[p] /= double(test_set.size());
    result.ssim[p] /= double(test_set.size());
  }
  return result;
}

std::map<int, double> reversibility_score(const Model& model, const Dataset& test_set,
                                          const std::vector<int>& cycles,
                                          std::uint64_t seed) {
  if (test_set.empty()) throw std::invalid_argument("reversibility: empty test set");
  const int max_cycles = *std::max_element(cycles.begin(), cycles.end());
  std::map<int, double> result;
  for (int c : cycles) result[c] = 0.0;

  std::size_t chain_id = 0;
  for (const TrainItem& item : test_set) {
    for (RegionId target : kAllRegions) {
      const CycleTrace trace = reversibility_chain(
          model, item.vol, item.attrs, target, max_cycles,
          seed ^ (0x9e3779b97f4a7c15ull * (chain_id + 1)));
      for (int c : cycles)
        result[c] += l1_distance(item.vol, trace.steps[std::size_t(2 * c - 1)].vol);
      ++chain_id;
    }
  }
  for (int c : cycles) result[c] /= double(test_set.size() * kAllRegions.size());
  return result;
}

double realism_score(const Model& model, const Dataset& test_set,
                     const FeatureExtractor& fx) {
  if (test_set.size() < 2)
    throw InsufficientSamples("realism: need >= 2 test subjects");
  std::vector<std::vector<double>> real, fake;
  for (const TrainItem& item : test_set) {
    real.push_back(fx.extract(item.vol));
    fake.push_back(fx.extract(counterfactual({&model, item.vol, item.attrs, {}})));
  }
  return frechet_distance(real, fake);
}

namespace {

// Shared generation protocol for effectiveness/minimality/generalizability:
// one sampled intervention per subject, realized volumes measured by the
// oracle segmenter and mapped through the checkpoint's normalizer.
struct RealizedOutcome {
  double target_value = 0.0;
  AttributeVector realized;  // normalized
};

RealizedOutcome realize(const Model& model, const TrainItem& item, RegionId target,
                        Rng& rng) {
  const Intervention iv = sample_intervention(target, rng);
  const Volume3D cf = counterfactual({&model, item.vol, item.attrs, iv});
  const LabelMap labels = oracle_segment(cf);
  const RawVolumes rv = region_volumes(labels);
  RealizedOutcome out;
  out.target_value = iv.value;
  out.realized = model.normalizer().normalize(AttributeVector::from_raw(rv));
  return out;
}

}  // namespace

double effectiveness_score(const Model& model, const Dataset& test_set,
                           RegionId target, std::uint64_t seed) {
  if (test_set.empty()) throw std::invalid_argument("effectiveness: empty test set");
  Rng rng(seed);
  double mae = 0.0;
  for (const TrainItem& item : test_set) {
    const RealizedOutcome out = realize(model, item, target, rng);
    mae += std::abs(out.target_value - out.realized[target]);
  }
  return mae / double(test_set.size());
}

std::map<RegionId, double> minimality_score(const Model& model,
                                            const Dataset& test_set, RegionId target,
                                            std::uint64_t seed) {
  if (test_set.empty()) throw std::invalid_argument("minimality: empty test set");
  Rng rng(seed);
  std::map<RegionId, double> mae;
  for (RegionId r : kAllRegions)
    if (r != target) mae[r] = 0.0;
  for (const TrainItem& item : test_set) {
    const RealizedOutcome out = realize(model, item, target, rng);
    for (auto& [r, acc] : mae) acc += std::abs(item.attrs[r] - out.realized[r]);
  }
  for (auto& [r, acc] : mae) acc /= double(test_set.size());
  return mae;
}

double generalizability_score(const Model& model, const Dataset& cohort_b_set,
                              RegionId target, std::uint64_t seed) {
  return effectiveness_score(model, cohort_b_set, target, seed);
}

}  // namespace cfbench
