#include "cfbench/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfbench/kernels.hpp"

namespace cfbench {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Vec;

const char* family_name(ModelFamily f) {
  switch (f) {
    case ModelFamily::VAE: return "VAE";
    case ModelFamily::HVAE: return "HVAE";
    case ModelFamily::VAE_GLM: return "VAE-GLM";
    case ModelFamily::GAN: return "GAN";
    case ModelFamily::GAN_FT: return "GAN-Finetuned";
    case ModelFamily::HA_GAN: return "HA-GAN";
    case ModelFamily::Identity: return "Identity";
  }
  return "?";
}

ModelFamily family_from_name(const std::string& name) {
  for (ModelFamily f : {ModelFamily::VAE, ModelFamily::HVAE, ModelFamily::VAE_GLM,
                        ModelFamily::GAN, ModelFamily::GAN_FT, ModelFamily::HA_GAN,
                        ModelFamily::Identity})
    if (name == family_name(f)) return f;
  throw std::invalid_argument("unknown model family: " + name);
}

void ModelConfig::validate() const {
  if (resolution < 16 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("resolution must be a power of two >= 16");
  if (latent_dims.empty()) throw std::invalid_argument("latent_dims empty");
  for (int d : latent_dims)
    if (d <= 0) throw std::invalid_argument("latent dims must be positive");
  if (family == ModelFamily::HVAE && latent_dims.size() < 2)
    throw std::invalid_argument("HVAE requires >= 2 latent levels");
  if (family == ModelFamily::HA_GAN && low_res >= resolution)
    throw std::invalid_argument("HA-GAN requires low_res < resolution");
  if (fourier_bands < 1) throw std::invalid_argument("fourier_bands must be >= 1");
  if (batch < 1 || epochs < 0) throw std::invalid_argument("bad batch/epochs");
}

std::string ModelConfig::to_json() const {
  json j;
  j["family"] = family_name(family);
  j["resolution"] = resolution;
  j["latent_dims"] = latent_dims;
  j["fourier_bands"] = fourier_bands;
  j["hidden"] = hidden;
  j["lr"] = lr;
  j["epochs"] = epochs;
  j["batch"] = batch;
  j["seed"] = seed;
  j["recon_weight"] = recon_weight;
  j["kl_weight"] = kl_weight;
  j["mismatch_weight"] = mismatch_weight;
  j["volume_weight"] = volume_weight;
  j["indep_weight"] = indep_weight;
  j["sharp_weight"] = sharp_weight;
  j["adv_weight"] = adv_weight;
  j["warmup_epochs"] = warmup_epochs;
  j["latent_prior_weight"] = latent_prior_weight;
  j["encoder_epochs"] = encoder_epochs;
  j["finetune_epochs"] = finetune_epochs;
  j["image_cycle_weight"] = image_cycle_weight;
  j["latent_cycle_weight"] = latent_cycle_weight;
  j["low_res"] = low_res;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.family = family_from_name(j.at("family").get<std::string>());
  c.resolution = j.value("resolution", c.resolution);
  if (j.contains("latent_dims")) c.latent_dims = j["latent_dims"].get<std::vector<int>>();
  c.fourier_bands = j.value("fourier_bands", c.fourier_bands);
  c.hidden = j.value("hidden", c.hidden);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  c.recon_weight = j.value("recon_weight", c.recon_weight);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.mismatch_weight = j.value("mismatch_weight", c.mismatch_weight);
  c.volume_weight = j.value("volume_weight", c.volume_weight);
  c.indep_weight = j.value("indep_weight", c.indep_weight);
  c.sharp_weight = j.value("sharp_weight", c.sharp_weight);
  c.adv_weight = j.value("adv_weight", c.adv_weight);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.latent_prior_weight = j.value("latent_prior_weight", c.latent_prior_weight);
  c.encoder_epochs = j.value("encoder_epochs", c.encoder_epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.image_cycle_weight = j.value("image_cycle_weight", c.image_cycle_weight);
  c.latent_cycle_weight = j.value("latent_cycle_weight", c.latent_cycle_weight);
  c.low_res = j.value("low_res", c.low_res);
  c.validate();
  return c;
}

ModelConfig ModelConfig::defaults_for(ModelFamily family) {
  ModelConfig c;
  c.family = family;
  switch (family) {
    case ModelFamily::GAN:
    case ModelFamily::GAN_FT:
    case ModelFamily::HA_GAN:
      // Pixel term dominates; the soft-volume meter destabilizes the
      // latent-table optimization and stays off for the GAN variants.
      c.recon_weight = 10.0;
      c.volume_weight = 0.0;
      c.encoder_epochs = 40;
      break;
    case ModelFamily::HVAE:
      c.latent_dims = {4, 8};
      break;
    default:
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// shared helpers

namespace {

Vec embed_f(const AttributeVector& attrs, int bands) {
  const EmbeddingVector e = fourier_embed(attrs, bands);
  return Vec(e.begin(), e.end());
}

int embed_dim(int bands) { return 2 * bands * kNumRegions; }

std::size_t cube(int e) { return std::size_t(e) * e * e; }

// 2x average pooling on a flat cubic grid.
void pool2_flat(const float* src, int edge, float* dst) {
  const int h = edge / 2;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < h; ++j)
      for (int k = 0; k < h; ++k) {
        float s = 0.0f;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c)
              s += src[(std::size_t(2 * i + a) * edge + (2 * j + b)) * edge + (2 * k + c)];
        dst[(std::size_t(i) * h + j) * h + k] = s / 8.0f;
      }
}

void pool2_adjoint(const float* ddst, int edge, float* dsrc) {
  const int h = edge / 2;
  for (int i = 0; i < edge; ++i)
    for (int j = 0; j < edge; ++j)
      for (int k = 0; k < edge; ++k)
        dsrc[(std::size_t(i) * edge + j) * edge + k] =
            ddst[(std::size_t(i / 2) * h + j / 2) * h + k / 2] / 8.0f;
}

void pool_to_flat(const float* src, int edge, int target, Vec& out) {
  Vec cur(src, src + cube(edge));
  Vec next;
  int e = edge;
  while (e > target) {
    next.resize(cube(e / 2));
    pool2_flat(cur.data(), e, next.data());
    cur.swap(next);
    e /= 2;
  }
  out = std::move(cur);
}

void up2_flat(const float* src, int edge, float* dst) {
  const int d = edge * 2;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        dst[(std::size_t(i) * d + j) * d + k] =
            src[(std::size_t(i / 2) * edge + j / 2) * edge + k / 2];
}

void up2_adjoint(const float* ddst, int edge, float* dsrc) {
  const int d = edge * 2;
  std::fill(dsrc, dsrc + cube(edge), 0.0f);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        dsrc[(std::size_t(i / 2) * edge + j / 2) * edge + k / 2] +=
            ddst[(std::size_t(i) * d + j) * d + k];
}

void check_finite(double loss, const char* what) {
  if (!std::isfinite(loss))
    throw DivergenceError(std::string("non-finite ") + what + " loss");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
  return idx;
}

Volume3D vec_to_volume(const Vec& v, int resolution) {
  Volume3D out({resolution, resolution, resolution},
                std::vector<float>(v.begin(), v.end()));
  kernels::active().clamp(out.data(), out.size(), 0.0f, 1.0f);
  return out;
}

// Differentiable training-time volume measurement: per voxel, softmax
// responsibilities over the 9 intensity prototypes (temperature kTau), summed
// per region. An affine map from soft counts to the normalized attribute
// space is least-squares fitted per region on the training images themselves,
// so the term needs no external normalizer or segmenter.
// Mean squared distance of each voxel to its nearest intensity prototype,
// with the gradient (scaled by `weight`) accumulated into `grad`. Pointwise
// and minimized at any prototype, so it sharpens boundaries without the
// off-manifold pull a count-matching objective has.
double sharpness_grad(const float* o, std::size_t n, float weight, float* grad) {
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float v = o[i];
    float best = v - kIntensityPrototypes[0];
    for (std::size_t p = 1; p < kIntensityPrototypes.size(); ++p) {
      const float d = v - kIntensityPrototypes[p];
      if (std::abs(d) < std::abs(best)) best = d;
    }
    loss += double(best) * double(best);
    grad[i] += weight * 2.0f * best / float(n);
  }
  return loss / double(n);
}

class SoftVolumeMeter {
 public:
  // Measurement temperature: well under the 0.07 prototype gap, so soft
  // counts track true voxel counts (R^2 > 0.92 per region on renders).
  static constexpr double kTau = 0.025;
  // Gradient surrogate temperature: at the sharp tau the responsibilities
  // vanish a fraction of the gap away from a prototype and no gradient can
  // move a tissue voxel toward a region intensity. The backward pass
  // therefore uses a smoother kernel: same direction, longer reach.
  static constexpr double kGradTau = 0.08;

  void fit(const Dataset& dataset) {
    std::array<double, kNumRegions> sx{}, sxx{}, sy{}, sxy{};
    for (const TrainItem& item : dataset) {
      std::array<double, kNumRegions> counts{};
      soft_counts(item.vol.data(), item.vol.size(), counts.data(), nullptr, -1);
      for (int r = 0; r < kNumRegions; ++r) {
        const double x = counts[std::size_t(r)];
        const double y = item.attrs.values[std::size_t(r)];
        sx[std::size_t(r)] += x;
        sxx[std::size_t(r)] += x * x;
        sy[std::size_t(r)] += y;
        sxy[std::size_t(r)] += x * y;
      }
    }
    const double n = double(dataset.size());
    for (int r = 0; r < kNumRegions; ++r) {
      const double var = sxx[std::size_t(r)] - sx[std::size_t(r)] * sx[std::size_t(r)] / n;
      if (var > 1e-9) {
        alpha_[std::size_t(r)] =
            (sxy[std::size_t(r)] - sx[std::size_t(r)] * sy[std::size_t(r)] / n) / var;
      } else {
        alpha_[std::size_t(r)] = 0.0;
      }
      beta_[std::size_t(r)] =
          (sy[std::size_t(r)] - alpha_[std::size_t(r)] * sx[std::size_t(r)]) / n;
    }
  }

  // |alpha*S_r(o) + beta - target| with its gradient scaled by `weight` added
  // into grad (size n).
  double loss_grad(const float* o, std::size_t n, int region_idx, double target,
                   float weight, float* grad) const {
    std::array<double, kNumRegions> counts{};
    std::vector<float> dcount(n);
    soft_counts(o, n, counts.data(), dcount.data(), region_idx);
    const double a = alpha_[std::size_t(region_idx)];
    const double nhat = a * counts[std::size_t(region_idx)] + beta_[std::size_t(region_idx)];
    const double err = nhat - target;
    const float c = weight * float((err > 0.0 ? 1.0 : -1.0) * a);
    for (std::size_t i = 0; i < n; ++i) grad[i] += c * dcount[i];
    return std::abs(err);
  }

 private:
  // Soft region counts at the sharp measurement tau; if dcount != nullptr
  // also writes the smooth-kernel surrogate of dS_{grad_region}/do_v.
  static void soft_counts(const float* o, std::size_t n, double* counts,
                          float* dcount, int grad_region) {
    for (int r = 0; r < kNumRegions; ++r) counts[r] = 0.0;
    const double inv2t2 = 1.0 / (2.0 * kTau * kTau);
    const double ginv2t2 = 1.0 / (2.0 * kGradTau * kGradTau);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = double(o[i]);
      double w[9], sum = 0.0;
      for (int l = 0; l < 9; ++l) {
        const double d = v - double(kIntensityPrototypes[std::size_t(l)]);
        // Clipped exponent keeps far prototypes at exactly zero weight.
        const double e = d * d * inv2t2;
        w[l] = e < 40.0 ? std::exp(-e) : 0.0;
        sum += w[l];
      }
      if (sum >= 1e-30) {
        const double inv = 1.0 / sum;
        // region label codes are 1..7 -> prototype index region+1
        for (int r = 0; r < kNumRegions; ++r) counts[r] += w[r + 1] * inv;
      }
      if (dcount) {
        double g[9], gsum = 0.0;
        for (int l = 0; l < 9; ++l) {
          const double d = v - double(kIntensityPrototypes[std::size_t(l)]);
          g[l] = std::exp(-d * d * ginv2t2);
          gsum += g[l];
        }
        for (int l = 0; l < 9; ++l) g[l] /= gsum;
        const int l0 = grad_region + 1;
        // dw_r/dv = w_r * ( (p_r - v) + sum_l w_l (v - p_l) ) / tau^2
        double mixed = 0.0;
        for (int l = 0; l < 9; ++l)
          mixed += g[l] * (v - double(kIntensityPrototypes[std::size_t(l)]));
        dcount[i] = float(g[l0] *
                          ((double(kIntensityPrototypes[std::size_t(l0)]) - v) + mixed) /
                          (kGradTau * kGradTau));
      }
    }
  }

  std::array<double, kNumRegions> alpha_{}, beta_{};
};

}  // namespace

// ---------------------------------------------------------------------------
// Model base

std::uint64_t Model::generator_hash() const { return weights_hash(); }

std::uint64_t Model::weights_hash() const { return nn::params_hash(tensors()); }

void Model::check_dims(const Volume3D& vol) const {
  const int r = config_.resolution;
  if (vol.dims() != Dims{r, r, r})
    throw ShapeMismatch("volume dims do not match model resolution");
}

void Model::check_latent(const LatentState& z) const {
  if (z.family != config_.family)
    throw FamilyMismatch(std::string("latent from ") + family_name(z.family) +
                         " fed to " + family_name(config_.family));
}

void Model::log_epoch(int epoch, std::map<std::string, double> losses) {
  log_.push_back({epoch, std::move(losses)});
}

void Model::save(const std::string& dir) const {
  fs::create_directories(dir);
  json j = json::parse(config_.to_json());
  j["weights_hash"] = weights_hash();
  if (!log_.empty()) {
    json fin;
    for (const auto& [k, v] : log_.back().losses) fin[k] = v;
    j["final_losses"] = fin;
  }
  std::ofstream(fs::path(dir) / "config.json") << j.dump(2) << "\n";
  std::ofstream(fs::path(dir) / "normalizer.json") << normalizer_.to_json() << "\n";

  std::vector<std::uint8_t> blob;
  nn::serialize(tensors(), blob);
  std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  wf.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));

  std::ofstream log(fs::path(dir) / "train_log.csv");
  std::vector<std::string> keys;
  for (const TrainLogRow& row : log_)
    for (const auto& [k, v] : row.losses)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  log << "epoch";
  for (const std::string& k : keys) log << "," << k;
  log << "\n";
  for (const TrainLogRow& row : log_) {
    log << row.epoch;
    for (const std::string& k : keys) {
      log << ",";
      const auto it = row.losses.find(k);
      if (it != row.losses.end()) log << it->second;
    }
    log << "\n";
  }
}

std::unique_ptr<Model> Model::load(const std::string& dir) {
  std::ifstream cf(fs::path(dir) / "config.json");
  if (!cf) throw std::runtime_error("missing config.json in " + dir);
  std::stringstream ss;
  ss << cf.rdbuf();
  const json j = json::parse(ss.str());
  const ModelConfig cfg = ModelConfig::from_json(ss.str());
  std::unique_ptr<Model> m = create_model(cfg);

  std::ifstream nf(fs::path(dir) / "normalizer.json");
  if (nf) {
    std::stringstream ns;
    ns << nf.rdbuf();
    m->set_normalizer(Normalizer::from_json(ns.str()));
  }

  std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!wf) throw std::runtime_error("missing weights.bin in " + dir);
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(wf)),
                                 std::istreambuf_iterator<char>());
  nn::deserialize(m->tensors_mut(), blob);

  if (j.contains("weights_hash") &&
      j["weights_hash"].get<std::uint64_t>() != m->weights_hash())
    throw std::runtime_error("weights hash mismatch in " + dir);
  return m;
}

// ---------------------------------------------------------------------------
// Identity test double

namespace {

class IdentityModel final : public Model {
 public:
  explicit IdentityModel(ModelConfig cfg) : Model(std::move(cfg)) {}

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    LatentState z;
    z.family = ModelFamily::Identity;
    z.payload = {vol.raw()};
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector&) const override {
    check_latent(z);
    const int r = config_.resolution;
    return Volume3D({r, r, r}, std::vector<float>(z.payload.at(0)));
  }

  void train(const Dataset&) override {}

  std::vector<const nn::Tensor*> tensors() const override { return {}; }
  std::vector<nn::Tensor*> tensors_mut() override { return {}; }
};

}  // namespace

std::unique_ptr<Model> make_identity_double(int resolution) {
  ModelConfig cfg;
  cfg.family = ModelFamily::Identity;
  cfg.resolution = resolution;
  return std::make_unique<IdentityModel>(std::move(cfg));
}

// ---------------------------------------------------------------------------
// VAE

namespace {

class VaeModel final : public Model {
 public:
  explicit VaeModel(ModelConfig cfg) : Model(std::move(cfg)) {
    const int R = config_.resolution;
    N_ = cube(R);
    P_ = cube(R / 2);
    E_ = embed_dim(config_.fourier_bands);
    L_ = config_.latent_dims[0];
    enc_ = nn::Mlp({P_ + E_, std::size_t(config_.hidden), std::size_t(2 * L_)},
                   {nn::Act::Relu, nn::Act::None});
    dec_ = nn::Mlp({std::size_t(L_) + E_, std::size_t(config_.hidden), N_},
                   {nn::Act::Relu, nn::Act::Sigmoid});
    Rng rng(config_.seed);
    enc_.init_he(rng);
    dec_.init_he(rng);
  }

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    Vec in = encoder_input(vol.raw(), attrs);
    const Vec out = enc_.forward_const(in.data(), 1);
    LatentState z;
    z.family = config_.family;
    z.payload = {Vec(out.begin(), out.begin() + L_)};  // posterior mean
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector& attrs) const override {
    check_latent(z);
    if (int(z.payload.at(0).size()) != L_) throw ShapeMismatch("latent dim mismatch");
    Vec in = z.payload[0];
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    in.insert(in.end(), emb.begin(), emb.end());
    return vec_to_volume(dec_.forward_const(in.data(), 1), config_.resolution);
  }

  void train(const Dataset& dataset) override {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    Rng rng(config_.seed + 1);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all(enc_.params());
    opt.attach_all(dec_.params());

    const std::size_t B = std::size_t(config_.batch);
    std::vector<Vec> pooled(dataset.size()), embeds(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      pool_to_flat(dataset[i].vol.data(), config_.resolution, config_.resolution / 2,
                   pooled[i]);
      embeds[i] = embed_f(dataset[i].attrs, config_.fourier_bands);
    }
    SoftVolumeMeter meter;
    if (config_.volume_weight > 0.0) meter.fit(dataset);

    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double recon_sum = 0.0, kl_sum = 0.0, vol_sum = 0.0, indep_sum = 0.0;
      std::size_t nb = 0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (std::size_t s = 0; s < order.size(); s += B) {
        const std::size_t bs = std::min(B, order.size() - s);
        Vec ein(bs * (P_ + E_)), target(bs * N_);
        for (std::size_t r = 0; r < bs; ++r) {
          const std::size_t i = order[s + r];
          std::memcpy(ein.data() + r * (P_ + E_), pooled[i].data(), P_ * sizeof(float));
          std::memcpy(ein.data() + r * (P_ + E_) + P_, embeds[i].data(),
                      E_ * sizeof(float));
          std::memcpy(target.data() + r * N_, dataset[i].vol.data(), N_ * sizeof(float));
        }
        const Vec& stats = enc_.forward(ein.data(), bs);

        Vec z(bs * L_), eps(bs * L_), din(bs * (L_ + E_));
        for (std::size_t r = 0; r < bs; ++r)
          for (int l = 0; l < L_; ++l) {
            const float mu = stats[r * 2 * L_ + l];
            const float lv = stats[r * 2 * L_ + L_ + l];
            const float e = float(rng.normal());
            eps[r * L_ + l] = e;
            z[r * L_ + l] = mu + std::exp(0.5f * lv) * e;
          }
        for (std::size_t r = 0; r < bs; ++r) {
          std::memcpy(din.data() + r * (L_ + E_), z.data() + r * L_, L_ * sizeof(float));
          std::memcpy(din.data() + r * (L_ + E_) + L_,
                      ein.data() + r * (P_ + E_) + P_, E_ * sizeof(float));
        }
        const Vec& recon = dec_.forward(din.data(), bs);

        Vec drecon(bs * N_);
        const double recon_loss =
            nn::l1_loss(recon.data(), target.data(), drecon.data(), bs * N_);
        for (float& g : drecon) g *= float(config_.recon_weight);
        if (config_.sharp_weight > 0.0) {
          // Also sharpen factual reconstructions: the pixel term pins the
          // plateaus, so this gradient concentrates on mid-ramp edge voxels.
          const float w = float(config_.sharp_weight) / float(bs);
          for (std::size_t r = 0; r < bs; ++r)
            sharpness_grad(recon.data() + r * N_, N_, w, drecon.data() + r * N_);
        }

        opt.zero_grad();
        const Vec& ddin = dec_.backward(drecon.data(), bs);

        Vec dstats(bs * 2 * L_, 0.0f);
        double kl_loss = 0.0;
        for (std::size_t r = 0; r < bs; ++r) {
          const float* mu = stats.data() + r * 2 * L_;
          const float* lv = mu + L_;
          float* dmu = dstats.data() + r * 2 * L_;
          float* dlv = dmu + L_;
          kl_loss += nn::kl_gaussian(mu, lv, dmu, dlv, L_);
          const float kw = float(config_.kl_weight) / float(bs * L_);
          for (int l = 0; l < L_; ++l) {
            dmu[l] *= kw;
            dlv[l] *= kw;
            const float dz = ddin[r * (L_ + E_) + l];
            dmu[l] += dz;
            dlv[l] += dz * eps[r * L_ + l] * 0.5f *
                      std::exp(0.5f * stats[r * 2 * L_ + L_ + l]);
          }
        }

        // Latent-independence penalty: squared batch covariance between the
        // posterior means and the attributes. With z decorrelated from the
        // causal parents, the decoder has to take volume information from
        // the conditioning embedding, so interventions actually bite.
        double indep_loss = 0.0;
        if (config_.indep_weight > 0.0 && bs > 1) {
          std::vector<double> mu_mean(std::size_t(L_), 0.0);
          std::array<double, kNumRegions> a_mean{};
          for (std::size_t r = 0; r < bs; ++r) {
            for (int l = 0; l < L_; ++l) mu_mean[std::size_t(l)] += stats[r * 2 * L_ + l];
            for (int q = 0; q < kNumRegions; ++q)
              a_mean[std::size_t(q)] += dataset[order[s + r]].attrs.values[std::size_t(q)];
          }
          for (double& v : mu_mean) v /= double(bs);
          for (double& v : a_mean) v /= double(bs);
          std::vector<double> cov(std::size_t(L_) * kNumRegions, 0.0);
          for (std::size_t r = 0; r < bs; ++r)
            for (int l = 0; l < L_; ++l) {
              const double mc = double(stats[r * 2 * L_ + l]) - mu_mean[std::size_t(l)];
              for (int q = 0; q < kNumRegions; ++q)
                cov[std::size_t(l) * kNumRegions + q] +=
                    mc * (dataset[order[s + r]].attrs.values[std::size_t(q)] -
                          a_mean[std::size_t(q)]) /
                    double(bs);
            }
          for (const double c : cov) indep_loss += c * c;
          const double iw = config_.indep_weight;
          for (std::size_t r = 0; r < bs; ++r)
            for (int l = 0; l < L_; ++l) {
              double g = 0.0;
              for (int q = 0; q < kNumRegions; ++q)
                g += cov[std::size_t(l) * kNumRegions + q] *
                     (dataset[order[s + r]].attrs.values[std::size_t(q)] -
                      a_mean[std::size_t(q)]);
              dstats[r * 2 * L_ + std::size_t(l)] += float(iw * 2.0 * g / double(bs));
            }
        }
        enc_.backward(dstats.data(), bs);

        // Volume-consistency pass: decode the same latents under a sampled
        // intervention and push the soft-measured target volume toward the
        // commanded value. Only the decoder receives gradients.
        double vol_loss = 0.0;
        if (config_.volume_weight > 0.0 || config_.sharp_weight > 0.0) {
          Vec din2(bs * (L_ + E_));
          std::vector<int> regions(bs);
          std::vector<double> values(bs);
          for (std::size_t r = 0; r < bs; ++r) {
            regions[r] = int(rng.uniform_index(kNumRegions));
            values[r] = rng.uniform(-1.0, 1.0);
            AttributeVector a = dataset[order[s + r]].attrs;
            a.values[std::size_t(regions[r])] = values[r];
            const Vec emb2 = embed_f(a, config_.fourier_bands);
            std::memcpy(din2.data() + r * (L_ + E_), z.data() + r * L_,
                        L_ * sizeof(float));
            std::memcpy(din2.data() + r * (L_ + E_) + L_, emb2.data(),
                        E_ * sizeof(float));
          }
          const Vec& out2 = dec_.forward(din2.data(), bs);
          Vec dout2(bs * N_, 0.0f);
          if (config_.volume_weight > 0.0) {
            const float w = float(config_.volume_weight) / float(bs);
            // Constrain every region's soft volume, not just the intervened
            // one: a global intensity shift that inflates one region's count
            // would otherwise go unpunished.
            for (std::size_t r = 0; r < bs; ++r) {
              AttributeVector tgt = dataset[order[s + r]].attrs;
              tgt.values[std::size_t(regions[r])] = values[r];
              for (int q = 0; q < kNumRegions; ++q)
                vol_loss += meter.loss_grad(out2.data() + r * N_, N_, q,
                                            tgt.values[std::size_t(q)], w,
                                            dout2.data() + r * N_);
            }
            vol_loss /= double(bs * kNumRegions);
          }
          if (config_.sharp_weight > 0.0) {
            const float w = float(config_.sharp_weight) / float(bs);
            for (std::size_t r = 0; r < bs; ++r)
              sharpness_grad(out2.data() + r * N_, N_, w, dout2.data() + r * N_);
          }
          dec_.backward(dout2.data(), bs);
        }
        opt.step();

        kl_loss /= double(bs * L_);
        check_finite(recon_loss + kl_loss + vol_loss + indep_loss, "VAE");
        recon_sum += recon_loss;
        kl_sum += kl_loss;
        vol_sum += vol_loss;
        indep_sum += indep_loss;
        ++nb;
      }
      log_epoch(epoch, {{"recon_l1", recon_sum / double(nb)},
                        {"kl", kl_sum / double(nb)},
                        {"vol_mae", vol_sum / double(nb)},
                        {"indep", indep_sum / double(nb)}});
    }
  }

  std::vector<const nn::Tensor*> tensors() const override {
    std::vector<const nn::Tensor*> out;
    for (auto* t : const_cast<VaeModel*>(this)->enc_.params()) out.push_back(t);
    for (auto* t : const_cast<VaeModel*>(this)->dec_.params()) out.push_back(t);
    return out;
  }
  std::vector<nn::Tensor*> tensors_mut() override {
    auto out = enc_.params();
    for (auto* t : dec_.params()) out.push_back(t);
    return out;
  }

 private:
  Vec encoder_input(const std::vector<float>& vol, const AttributeVector& attrs) const {
    Vec pooled;
    pool_to_flat(vol.data(), config_.resolution, config_.resolution / 2, pooled);
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    pooled.insert(pooled.end(), emb.begin(), emb.end());
    return pooled;
  }

  std::size_t N_ = 0, P_ = 0;
  int E_ = 0, L_ = 0;
  mutable nn::Mlp enc_, dec_;
};

}  // namespace

// ---------------------------------------------------------------------------
// VAE-GLM: unconditional VAE plus a linear attribute model fitted on the
// training latents; counterfactuals move the latent along the fitted effect.

namespace {

class VaeGlmModel final : public Model {
 public:
  explicit VaeGlmModel(ModelConfig cfg) : Model(std::move(cfg)) {
    const int R = config_.resolution;
    N_ = cube(R);
    P_ = cube(R / 2);
    L_ = config_.latent_dims[0];
    enc_ = nn::Mlp({P_, std::size_t(config_.hidden), std::size_t(2 * L_)},
                   {nn::Act::Relu, nn::Act::None});
    dec_ = nn::Mlp({std::size_t(L_), std::size_t(config_.hidden), N_},
                   {nn::Act::Relu, nn::Act::Sigmoid});
    glm_ = nn::Tensor(std::size_t(L_) * (kNumRegions + 1));
    Rng rng(config_.seed);
    enc_.init_he(rng);
    dec_.init_he(rng);
    // GLM starts at the null effect.
    std::fill(glm_.w.begin(), glm_.w.end(), 0.0f);
  }

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    Vec pooled;
    pool_to_flat(vol.data(), config_.resolution, config_.resolution / 2, pooled);
    const Vec stats = enc_.forward_const(pooled.data(), 1);
    Vec mu(stats.begin(), stats.begin() + L_);
    const Vec eff = glm_effect(attrs);
    for (int l = 0; l < L_; ++l) mu[l] -= eff[l];  // subject residual
    LatentState z;
    z.family = config_.family;
    z.payload = {std::move(mu)};
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector& attrs) const override {
    check_latent(z);
    if (int(z.payload.at(0).size()) != L_) throw ShapeMismatch("latent dim mismatch");
    Vec zin = z.payload[0];
    const Vec eff = glm_effect(attrs);
    for (int l = 0; l < L_; ++l) zin[l] += eff[l];
    return vec_to_volume(dec_.forward_const(zin.data(), 1), config_.resolution);
  }

  void train(const Dataset& dataset) override {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    Rng rng(config_.seed + 1);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all(enc_.params());
    opt.attach_all(dec_.params());

    std::vector<Vec> pooled(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i)
      pool_to_flat(dataset[i].vol.data(), config_.resolution, config_.resolution / 2,
                   pooled[i]);

    const std::size_t B = std::size_t(config_.batch);
    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double recon_sum = 0.0, kl_sum = 0.0;
      std::size_t nb = 0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (std::size_t s = 0; s < order.size(); s += B) {
        const std::size_t bs = std::min(B, order.size() - s);
        Vec ein(bs * P_), target(bs * N_);
        for (std::size_t r = 0; r < bs; ++r) {
          const std::size_t i = order[s + r];
          std::memcpy(ein.data() + r * P_, pooled[i].data(), P_ * sizeof(float));
          std::memcpy(target.data() + r * N_, dataset[i].vol.data(), N_ * sizeof(float));
        }
        const Vec& stats = enc_.forward(ein.data(), bs);
        Vec z(bs * L_), eps(bs * L_);
        for (std::size_t r = 0; r < bs; ++r)
          for (int l = 0; l < L_; ++l) {
            const float mu = stats[r * 2 * L_ + l];
            const float lv = stats[r * 2 * L_ + L_ + l];
            const float e = float(rng.normal());
            eps[r * L_ + l] = e;
            z[r * L_ + l] = mu + std::exp(0.5f * lv) * e;
          }
        const Vec& recon = dec_.forward(z.data(), bs);
        Vec drecon(bs * N_);
        const double recon_loss =
            nn::l1_loss(recon.data(), target.data(), drecon.data(), bs * N_);
        for (float& g : drecon) g *= float(config_.recon_weight);
        if (config_.sharp_weight > 0.0) {
          // Also sharpen factual reconstructions: the pixel term pins the
          // plateaus, so this gradient concentrates on mid-ramp edge voxels.
          const float w = float(config_.sharp_weight) / float(bs);
          for (std::size_t r = 0; r < bs; ++r)
            sharpness_grad(recon.data() + r * N_, N_, w, drecon.data() + r * N_);
        }

        opt.zero_grad();
        const Vec& dz = dec_.backward(drecon.data(), bs);
        Vec dstats(bs * 2 * L_, 0.0f);
        double kl_loss = 0.0;
        for (std::size_t r = 0; r < bs; ++r) {
          const float* mu = stats.data() + r * 2 * L_;
          const float* lv = mu + L_;
          float* dmu = dstats.data() + r * 2 * L_;
          float* dlv = dmu + L_;
          kl_loss += nn::kl_gaussian(mu, lv, dmu, dlv, L_);
          const float kw = float(config_.kl_weight) / float(bs * L_);
          for (int l = 0; l < L_; ++l) {
            dmu[l] *= kw;
            dlv[l] *= kw;
            dmu[l] += dz[r * L_ + l];
            dlv[l] += dz[r * L_ + l] * eps[r * L_ + l] * 0.5f *
                      std::exp(0.5f * lv[l]);
          }
        }
        enc_.backward(dstats.data(), bs);
        opt.step();
        kl_loss /= double(bs * L_);
        check_finite(recon_loss + kl_loss, "VAE-GLM");
        recon_sum += recon_loss;
        kl_sum += kl_loss;
        ++nb;
      }
      log_epoch(epoch, {{"recon_l1", recon_sum / double(nb)},
                        {"kl", kl_sum / double(nb)}});
    }
    fit_glm(dataset, pooled);
  }

  std::vector<const nn::Tensor*> tensors() const override {
    std::vector<const nn::Tensor*> out;
    for (auto* t : const_cast<VaeGlmModel*>(this)->enc_.params()) out.push_back(t);
    for (auto* t : const_cast<VaeGlmModel*>(this)->dec_.params()) out.push_back(t);
    out.push_back(&glm_);
    return out;
  }
  std::vector<nn::Tensor*> tensors_mut() override {
    auto out = enc_.params();
    for (auto* t : dec_.params()) out.push_back(t);
    out.push_back(&glm_);
    return out;
  }

 private:
  Vec glm_effect(const AttributeVector& attrs) const {
    Vec eff(L_, 0.0f);
    for (int l = 0; l < L_; ++l) {
      float s = glm_.w[std::size_t(l) * (kNumRegions + 1) + kNumRegions];  // intercept
      for (int r = 0; r < kNumRegions; ++r)
        s += glm_.w[std::size_t(l) * (kNumRegions + 1) + r] * float(attrs.values[r]);
      eff[l] = s;
    }
    return eff;
  }

  // Ordinary least squares of the posterior means on [attrs; 1].
  void fit_glm(const Dataset& dataset, const std::vector<Vec>& pooled) {
    const std::size_t n = dataset.size();
    Eigen::MatrixXd X(n, kNumRegions + 1);
    Eigen::MatrixXd Y(n, L_);
    for (std::size_t i = 0; i < n; ++i) {
      for (int r = 0; r < kNumRegions; ++r) X(i, r) = dataset[i].attrs.values[r];
      X(i, kNumRegions) = 1.0;
      const Vec stats = enc_.forward_const(pooled[i].data(), 1);
      for (int l = 0; l < L_; ++l) Y(i, l) = stats[l];
    }
    const Eigen::MatrixXd xtx =
        X.transpose() * X +
        1e-6 * Eigen::MatrixXd::Identity(kNumRegions + 1, kNumRegions + 1);
    const Eigen::MatrixXd W = xtx.ldlt().solve(X.transpose() * Y);  // (8 x L)
    for (int l = 0; l < L_; ++l)
      for (int r = 0; r <= kNumRegions; ++r)
        glm_.w[std::size_t(l) * (kNumRegions + 1) + r] = float(W(r, l));
  }

  std::size_t N_ = 0, P_ = 0;
  int L_ = 0;
  mutable nn::Mlp enc_, dec_;
  nn::Tensor glm_;  // (L x 8) row-major, last column intercept
};

}  // namespace

// ---------------------------------------------------------------------------
// HVAE: latent grids at two intermediate resolutions, injected into both the
// posterior and the decoder path at their own scale.

namespace {

class HvaeModel final : public Model {
 public:
  explicit HvaeModel(ModelConfig cfg) : Model(std::move(cfg)) {
    config_.validate();
    e1_ = config_.latent_dims[0];  // coarse grid edge (e.g. 8)
    e2_ = config_.latent_dims[1];  // fine grid edge (e.g. 16)
    if (e2_ != 2 * e1_ || config_.resolution != 2 * e2_)
      throw std::invalid_argument("HVAE latent grids must be R/4 and R/2");
    G1_ = cube(e1_);
    G2_ = cube(e2_);
    N_ = cube(config_.resolution);
    E_ = embed_dim(config_.fourier_bands);

    q1_ = nn::Diag(G1_);
    q2x_ = nn::Diag(G2_);
    q2up_ = nn::Diag(G2_);
    d1_ = nn::Diag(G1_);
    d2z_ = nn::Diag(G2_);
    d2up_ = nn::Diag(G2_);
    out_ = nn::Diag(N_);
    qe1_ = nn::Mlp({std::size_t(E_), 64, G1_}, {nn::Act::Relu, nn::Act::None});
    qe2_ = nn::Mlp({std::size_t(E_), 64, G2_}, {nn::Act::Relu, nn::Act::None});
    de1_ = nn::Mlp({std::size_t(E_), 64, G1_}, {nn::Act::Relu, nn::Act::None});
    de2_ = nn::Mlp({std::size_t(E_), 64, G2_}, {nn::Act::Relu, nn::Act::None});

    Rng rng(config_.seed);
    q1_.init_identity();
    q2x_.init_identity();
    q2up_.init_identity();
    std::fill(q2up_.scale().w.begin(), q2up_.scale().w.end(), 0.0f);
    d1_.init_identity();
    d2z_.init_identity();
    d2up_.init_identity();
    std::fill(d2up_.scale().w.begin(), d2up_.scale().w.end(), 0.0f);
    out_.init_identity();
    for (nn::Mlp* m : {&qe1_, &qe2_, &de1_, &de2_}) {
      m->init_he(rng);
      // Small initial conditioning effect so the identity-like image path
      // dominates at the start of training.
      for (float& w : m->layers().back().weights().w) w *= 0.05f;
    }
  }

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    Vec x8, x16;
    pool_to_flat(vol.data(), config_.resolution, e1_, x8);
    pool_to_flat(vol.data(), config_.resolution, e2_, x16);

    Vec z1(G1_), z2(G2_), tmp(G2_);
    q1_.forward(x8.data(), z1.data(), 1);
    const Vec c1 = qe1_.forward_const(emb.data(), 1);
    for (std::size_t i = 0; i < G1_; ++i) z1[i] += c1[i];

    Vec up1(G2_);
    up2_flat(z1.data(), e1_, up1.data());
    q2x_.forward(x16.data(), z2.data(), 1);
    q2up_.forward(up1.data(), tmp.data(), 1);
    const Vec c2 = qe2_.forward_const(emb.data(), 1);
    for (std::size_t i = 0; i < G2_; ++i) z2[i] += tmp[i] + c2[i];

    LatentState z;
    z.family = config_.family;
    z.payload = {std::move(z1), std::move(z2)};
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector& attrs) const override {
    check_latent(z);
    if (z.payload.size() != 2 || z.payload[0].size() != G1_ || z.payload[1].size() != G2_)
      throw ShapeMismatch("HVAE latent grid shapes mismatch");
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    Vec out = decode_raw(z.payload[0], z.payload[1], emb);
    return vec_to_volume(out, config_.resolution);
  }

  void train(const Dataset& dataset) override {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    Rng rng(config_.seed + 1);
    nn::Adam opt({float(config_.lr)});
    for (nn::Diag* d : diags())
      opt.attach_all({&d->scale(), &d->bias()});
    for (nn::Mlp* m : {&qe1_, &qe2_, &de1_, &de2_}) opt.attach_all(m->params());

    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double recon_sum = 0.0, prior_sum = 0.0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (const std::size_t i : order) {
        const TrainItem& item = dataset[i];
        const Vec emb = embed_f(item.attrs, config_.fourier_bands);
        Vec x8, x16;
        pool_to_flat(item.vol.data(), config_.resolution, e1_, x8);
        pool_to_flat(item.vol.data(), config_.resolution, e2_, x16);

        // ---- forward (posterior means; training uses the mean path) ----
        Vec z1(G1_), z2(G2_), q2a(G2_), q2b(G2_);
        q1_.forward(x8.data(), z1.data(), 1);
        const Vec c1 = qe1_.forward(emb.data(), 1);
        for (std::size_t k = 0; k < G1_; ++k) z1[k] += c1[k];
        Vec up1(G2_);
        up2_flat(z1.data(), e1_, up1.data());
        q2x_.forward(x16.data(), q2a.data(), 1);
        q2up_.forward(up1.data(), q2b.data(), 1);
        const Vec c2 = qe2_.forward(emb.data(), 1);
        for (std::size_t k = 0; k < G2_; ++k) z2[k] = q2a[k] + q2b[k] + c2[k];

        // decoder
        Vec h8(G1_);
        d1_.forward(z1.data(), h8.data(), 1);
        const Vec dc1 = de1_.forward(emb.data(), 1);
        for (std::size_t k = 0; k < G1_; ++k) h8[k] += dc1[k];
        Vec uph8(G2_), h16a(G2_), h16b(G2_), h16(G2_);
        up2_flat(h8.data(), e1_, uph8.data());
        d2z_.forward(z2.data(), h16a.data(), 1);
        d2up_.forward(uph8.data(), h16b.data(), 1);
        const Vec dc2 = de2_.forward(emb.data(), 1);
        for (std::size_t k = 0; k < G2_; ++k) h16[k] = h16a[k] + h16b[k] + dc2[k];
        Vec up16(N_), out(N_);
        up2_flat(h16.data(), e2_, up16.data());
        out_.forward(up16.data(), out.data(), 1);

        // ---- losses ----
        Vec dout(N_);
        const double recon = nn::l1_loss(out.data(), item.vol.data(), dout.data(), N_);
        double prior = 0.0;
        Vec dz1p(G1_, 0.0f), dz2p(G2_, 0.0f);
        {
          const float pw = float(config_.latent_prior_weight);
          // z1 shrinks to 0.5 (mid-intensity), z2 to its upsampled parent.
          for (std::size_t k = 0; k < G1_; ++k) {
            const float d = z1[k] - 0.5f;
            prior += 0.5 * d * d;
            dz1p[k] = pw * d / float(G1_);
          }
          Vec upz1(G2_);
          up2_flat(z1.data(), e1_, upz1.data());
          Vec dz2_up(G2_, 0.0f);
          for (std::size_t k = 0; k < G2_; ++k) {
            const float d = z2[k] - upz1[k];
            prior += 0.5 * d * d;
            dz2p[k] += pw * d / float(G2_);
            dz2_up[k] -= pw * d / float(G2_);
          }
          Vec tmp(G1_);
          up2_adjoint(dz2_up.data(), e1_, tmp.data());
          for (std::size_t k = 0; k < G1_; ++k) dz1p[k] += tmp[k];
        }
        check_finite(recon + prior, "HVAE");

        // ---- backward ----
        opt.zero_grad();
        Vec dup16(N_);
        for (std::size_t k = 0; k < N_; ++k) dup16[k] = dout[k];
        Vec dout_in(N_);
        out_.backward(up16.data(), dup16.data(), dout_in.data(), 1);
        Vec dh16(G2_);
        up2_adjoint(dout_in.data(), e2_, dh16.data());

        Vec dz2(G2_), duph8(G2_);
        d2z_.backward(z2.data(), dh16.data(), dz2.data(), 1);
        d2up_.backward(uph8.data(), dh16.data(), duph8.data(), 1);
        de2_.backward(dh16.data(), 1);
        Vec dh8(G1_);
        up2_adjoint(duph8.data(), e1_, dh8.data());
        Vec dz1(G1_);
        d1_.backward(z1.data(), dh8.data(), dz1.data(), 1);
        de1_.backward(dh8.data(), 1);

        for (std::size_t k = 0; k < G2_; ++k) dz2[k] += dz2p[k];
        for (std::size_t k = 0; k < G1_; ++k) dz1[k] += dz1p[k];

        // posterior backward
        Vec dx16(G2_), dup1(G2_);
        q2x_.backward(x16.data(), dz2.data(), dx16.data(), 1);
        q2up_.backward(up1.data(), dz2.data(), dup1.data(), 1);
        qe2_.backward(dz2.data(), 1);
        Vec dz1_from2(G1_);
        up2_adjoint(dup1.data(), e1_, dz1_from2.data());
        for (std::size_t k = 0; k < G1_; ++k) dz1[k] += dz1_from2[k];
        Vec dx8(G1_);
        q1_.backward(x8.data(), dz1.data(), dx8.data(), 1);
        qe1_.backward(dz1.data(), 1);

        opt.step();
        recon_sum += recon;
        prior_sum += prior / double(G1_ + G2_);
      }
      log_epoch(epoch, {{"recon_l1", recon_sum / double(dataset.size())},
                        {"latent_prior", prior_sum / double(dataset.size())}});
    }
  }

  std::vector<const nn::Tensor*> tensors() const override {
    std::vector<const nn::Tensor*> out;
    for (const nn::Diag* d : const_cast<HvaeModel*>(this)->diags()) {
      out.push_back(&d->scale());
      out.push_back(&d->bias());
    }
    for (nn::Mlp* m : {&const_cast<HvaeModel*>(this)->qe1_,
                       &const_cast<HvaeModel*>(this)->qe2_,
                       &const_cast<HvaeModel*>(this)->de1_,
                       &const_cast<HvaeModel*>(this)->de2_})
      for (auto* t : m->params()) out.push_back(t);
    return out;
  }
  std::vector<nn::Tensor*> tensors_mut() override {
    std::vector<nn::Tensor*> out;
    for (nn::Diag* d : diags()) {
      out.push_back(&d->scale());
      out.push_back(&d->bias());
    }
    for (nn::Mlp* m : {&qe1_, &qe2_, &de1_, &de2_})
      for (auto* t : m->params()) out.push_back(t);
    return out;
  }

 private:
  std::vector<nn::Diag*> diags() {
    return {&q1_, &q2x_, &q2up_, &d1_, &d2z_, &d2up_, &out_};
  }

  Vec decode_raw(const Vec& z1, const Vec& z2, const Vec& emb) const {
    Vec h8(G1_);
    d1_.forward(z1.data(), h8.data(), 1);
    const Vec dc1 = de1_.forward_const(emb.data(), 1);
    for (std::size_t k = 0; k < G1_; ++k) h8[k] += dc1[k];
    Vec uph8(G2_), h16a(G2_), h16b(G2_), h16(G2_);
    up2_flat(h8.data(), e1_, uph8.data());
    d2z_.forward(z2.data(), h16a.data(), 1);
    d2up_.forward(uph8.data(), h16b.data(), 1);
    const Vec dc2 = de2_.forward_const(emb.data(), 1);
    for (std::size_t k = 0; k < G2_; ++k) h16[k] = h16a[k] + h16b[k] + dc2[k];
    Vec up16(N_), out(N_);
    up2_flat(h16.data(), e2_, up16.data());
    out_.forward(up16.data(), out.data(), 1);
    return out;
  }

  int e1_ = 8, e2_ = 16, E_ = 0;
  std::size_t G1_ = 0, G2_ = 0, N_ = 0;
  nn::Diag q1_, q2x_, q2up_, d1_, d2z_, d2up_, out_;
  mutable nn::Mlp qe1_, qe2_, de1_, de2_;
};

}  // namespace

// ---------------------------------------------------------------------------
// GAN (+ finetuned variant) and HA-GAN

namespace {

class GanModel : public Model {
 public:
  explicit GanModel(ModelConfig cfg) : Model(std::move(cfg)) {
    const int R = config_.resolution;
    N_ = cube(R);
    P_ = cube(R / 2);
    E_ = embed_dim(config_.fourier_bands);
    L_ = config_.latent_dims[0];
    gen_ = nn::Mlp({std::size_t(L_) + E_, std::size_t(config_.hidden), N_},
                   {nn::Act::Relu, nn::Act::Sigmoid});
    dis_ = nn::Mlp({P_ + E_, std::size_t(config_.hidden), 64, 1},
                   {nn::Act::LRelu, nn::Act::LRelu, nn::Act::None});
    enc_ = nn::Mlp({P_ + E_, std::size_t(config_.hidden), std::size_t(L_)},
                   {nn::Act::Relu, nn::Act::None});
    Rng rng(config_.seed);
    gen_.init_he(rng);
    dis_.init_he(rng);
    enc_.init_he(rng);
  }

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    Vec in;
    pool_to_flat(vol.data(), config_.resolution, config_.resolution / 2, in);
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    in.insert(in.end(), emb.begin(), emb.end());
    LatentState z;
    z.family = config_.family;
    z.payload = {enc_.forward_const(in.data(), 1)};
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector& attrs) const override {
    check_latent(z);
    if (int(z.payload.at(0).size()) != L_) throw ShapeMismatch("latent dim mismatch");
    Vec in = z.payload[0];
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    in.insert(in.end(), emb.begin(), emb.end());
    return vec_to_volume(gen_.forward_const(in.data(), 1), config_.resolution);
  }

  void train(const Dataset& dataset) override {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    train_adversarial(dataset);
    train_encoder(dataset);
  }

  std::vector<const nn::Tensor*> tensors() const override {
    std::vector<const nn::Tensor*> out;
    auto* self = const_cast<GanModel*>(this);
    for (auto* t : self->gen_.params()) out.push_back(t);
    for (auto* t : self->dis_.params()) out.push_back(t);
    for (auto* t : self->enc_.params()) out.push_back(t);
    return out;
  }
  std::vector<nn::Tensor*> tensors_mut() override {
    auto out = gen_.params();
    for (auto* t : dis_.params()) out.push_back(t);
    for (auto* t : enc_.params()) out.push_back(t);
    return out;
  }

  std::uint64_t generator_hash() const override {
    std::vector<const nn::Tensor*> gt;
    auto* self = const_cast<GanModel*>(this);
    for (auto* t : self->gen_.params()) gt.push_back(t);
    for (auto* t : self->dis_.params()) gt.push_back(t);
    return nn::params_hash(gt);
  }

  // Cyclic cost refinement: image-space cycle through the frozen generator
  // plus latent-space cycle on prior samples. Touches encoder weights only.
  void finetune_cyclic(const Dataset& dataset) {
    Rng rng(config_.seed + 7);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all(enc_.params());

    std::vector<Vec> pooled(dataset.size()), embeds(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      pool_to_flat(dataset[i].vol.data(), config_.resolution, config_.resolution / 2,
                   pooled[i]);
      embeds[i] = embed_f(dataset[i].attrs, config_.fourier_bands);
    }

    for (int epoch = 1; epoch <= config_.finetune_epochs; ++epoch) {
      double img_sum = 0.0, lat_sum = 0.0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (const std::size_t i : order) {
        opt.zero_grad();
        // image cycle ||x - G(E(x,a),a)||_1
        Vec ein = pooled[i];
        ein.insert(ein.end(), embeds[i].begin(), embeds[i].end());
        const Vec& z = enc_.forward(ein.data(), 1);
        Vec gin(z.begin(), z.end());
        gin.insert(gin.end(), embeds[i].begin(), embeds[i].end());
        const Vec& recon = gen_.forward(gin.data(), 1);
        Vec drecon(N_);
        const double img_loss =
            nn::l1_loss(recon.data(), dataset[i].vol.data(), drecon.data(), N_);
        for (float& g : drecon) g *= float(config_.image_cycle_weight);
        const Vec& dgin = gen_.backward(drecon.data(), 1);
        Vec dz(dgin.begin(), dgin.begin() + L_);

        // latent cycle ||z - E(G(z,a),a)||_2^2
        Vec zs(L_);
        for (int l = 0; l < L_; ++l) zs[l] = float(rng.normal());
        Vec gin2(zs.begin(), zs.end());
        gin2.insert(gin2.end(), embeds[i].begin(), embeds[i].end());
        const Vec fake = gen_.forward_const(gin2.data(), 1);
        Vec fake_pooled;
        pool_to_flat(fake.data(), config_.resolution, config_.resolution / 2,
                     fake_pooled);
        Vec ein2 = fake_pooled;
        ein2.insert(ein2.end(), embeds[i].begin(), embeds[i].end());

        // First backprop the image-cycle path while enc_ still caches it.
        const double img_only = img_loss;
        enc_.backward(dz.data(), 1);

        const Vec& zhat = enc_.forward(ein2.data(), 1);
        Vec dzhat(L_);
        const double lat_loss = nn::mse_loss(zhat.data(), zs.data(), dzhat.data(), L_);
        for (float& g : dzhat) g *= float(config_.latent_cycle_weight);
        enc_.backward(dzhat.data(), 1);

        // Generator/discriminator gradients may have accumulated through the
        // frozen path; they are never stepped. Only enc_ is attached.
        opt.step();
        check_finite(img_only + lat_loss, "GAN-FT");
        img_sum += img_only;
        lat_sum += lat_loss;
      }
      log_epoch(epoch, {{"image_cycle_l1", img_sum / double(dataset.size())},
                        {"latent_cycle_l2", lat_sum / double(dataset.size())}});
    }
  }

  double cycle_loss(const Dataset& dataset) const {
    double total = 0.0;
    for (const TrainItem& item : dataset) {
      const Volume3D recon = decode(encode(item.vol, item.attrs), item.attrs);
      total += kernels::active().sum_abs_diff(recon.data(), item.vol.data(), N_) /
               double(N_);
    }
    return total / double(dataset.size());
  }

 protected:
  void train_adversarial(const Dataset& dataset) {
    Rng rng(config_.seed + 1);
    nn::Adam optg({float(config_.lr)});
    optg.attach_all(gen_.params());
    nn::Adam optd({float(config_.lr)});
    optd.attach_all(dis_.params());

    std::vector<Vec> pooled(dataset.size()), embeds(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      pool_to_flat(dataset[i].vol.data(), config_.resolution, config_.resolution / 2,
                   pooled[i]);
      embeds[i] = embed_f(dataset[i].attrs, config_.fourier_bands);
    }
    SoftVolumeMeter meter;
    if (config_.volume_weight > 0.0) meter.fit(dataset);

    // Per-subject learnable latents (generative latent optimization): the
    // pixel term then demands a sharp reconstruction instead of the blurry
    // conditional mean a random latent would force, and the independence
    // penalty below keeps region volumes out of these latents so the
    // conditioning stays the only volume pathway.
    ztab_.assign(dataset.size() * std::size_t(L_), 0.0f);
    for (float& v : ztab_) v = float(rng.normal());
    Vec zm(ztab_.size(), 0.0f), zv(ztab_.size(), 0.0f);
    const float zlr = 1e-2f;
    long zstep = 0;

    const std::size_t B = std::size_t(config_.batch);
    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double d_sum = 0.0, g_sum = 0.0, pix_sum = 0.0, vol_sum = 0.0;
      std::size_t nb = 0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (std::size_t s = 0; s < order.size(); s += B) {
        const std::size_t bs = std::min(B, order.size() - s);

        // --- generator forward: fake batch, reused by both steps ---
        Vec gin(bs * (L_ + E_));
        for (std::size_t r = 0; r < bs; ++r) {
          std::memcpy(gin.data() + r * (L_ + E_),
                      ztab_.data() + order[s + r] * std::size_t(L_),
                      std::size_t(L_) * sizeof(float));
          std::memcpy(gin.data() + r * (L_ + E_) + L_, embeds[order[s + r]].data(),
                      E_ * sizeof(float));
        }

        // --- discriminator step ---
        double d_loss = 0.0;
        optd.zero_grad();
        {
          const Vec fake = gen_.forward_const(gin.data(), bs);
          Vec din;
          build_dis_input(fake.data(), bs, order, s, embeds, din, /*mismatch=*/false);
          const Vec& logits_fake = dis_.forward(din.data(), bs);
          Vec dlog(bs);
          d_loss += nn::bce_logits_loss(logits_fake.data(), 0.0f, dlog.data(), bs);
          dis_.backward(dlog.data(), bs);

          Vec rin(bs * (P_ + E_));
          for (std::size_t r = 0; r < bs; ++r) {
            std::memcpy(rin.data() + r * (P_ + E_), pooled[order[s + r]].data(),
                        P_ * sizeof(float));
            std::memcpy(rin.data() + r * (P_ + E_) + P_, embeds[order[s + r]].data(),
                        E_ * sizeof(float));
          }
          const Vec& logits_real = dis_.forward(rin.data(), bs);
          d_loss += nn::bce_logits_loss(logits_real.data(), 1.0f, dlog.data(), bs);
          dis_.backward(dlog.data(), bs);

          // matching-aware term: real images paired with shuffled attributes
          if (config_.mismatch_weight > 0.0 && dataset.size() > 1) {
            Vec min(bs * (P_ + E_));
            for (std::size_t r = 0; r < bs; ++r) {
              std::size_t other = rng.uniform_index(dataset.size());
              if (other == order[s + r]) other = (other + 1) % dataset.size();
              std::memcpy(min.data() + r * (P_ + E_), pooled[order[s + r]].data(),
                          P_ * sizeof(float));
              std::memcpy(min.data() + r * (P_ + E_) + P_, embeds[other].data(),
                          E_ * sizeof(float));
            }
            const Vec& logits_mis = dis_.forward(min.data(), bs);
            d_loss += config_.mismatch_weight *
                      nn::bce_logits_loss(logits_mis.data(), 0.0f, dlog.data(), bs);
            for (float& g : dlog) g *= float(config_.mismatch_weight);
            dis_.backward(dlog.data(), bs);
          }
          optd.step();
        }

        // --- generator step (non-saturating + paired pixel term) ---
        double g_loss = 0.0, pix_loss = 0.0;
        optg.zero_grad();
        {
          const Vec& fake = gen_.forward(gin.data(), bs);
          Vec dfake(bs * N_, 0.0f);

          if (config_.adv_weight > 0.0 && epoch > config_.warmup_epochs) {
            Vec din;
            build_dis_input(fake.data(), bs, order, s, embeds, din, false);
            const Vec& logits = dis_.forward(din.data(), bs);
            Vec dlog(bs);
            g_loss = nn::bce_logits_loss(logits.data(), 1.0f, dlog.data(), bs);
            for (float& g : dlog) g *= float(config_.adv_weight);
            // dis_ grads accumulate here but are cleared before its next step.
            const Vec& ddin = dis_.backward(dlog.data(), bs);
            for (std::size_t r = 0; r < bs; ++r)
              pool2_adjoint(ddin.data() + r * (P_ + E_), config_.resolution,
                            dfake.data() + r * N_);
          }

          if (config_.recon_weight > 0.0) {
            Vec dpix(bs * N_);
            Vec target(bs * N_);
            for (std::size_t r = 0; r < bs; ++r)
              std::memcpy(target.data() + r * N_, dataset[order[s + r]].vol.data(),
                          N_ * sizeof(float));
            pix_loss = nn::l1_loss(fake.data(), target.data(), dpix.data(), bs * N_);
            kernels::active().axpy(float(config_.recon_weight), dpix.data(),
                                   dfake.data(), bs * N_);
          }
          if (config_.sharp_weight > 0.0) {
            const float w = float(config_.sharp_weight) / float(bs);
            for (std::size_t r = 0; r < bs; ++r)
              sharpness_grad(fake.data() + r * N_, N_, w, dfake.data() + r * N_);
          }
          const Vec& dgin = gen_.backward(dfake.data(), bs);

          // Latent table update: pixel/adversarial gradient through the
          // generator input, a weak pull to the prior, and the same
          // centered-covariance independence penalty the VAE uses.
          {
            Vec dz(bs * std::size_t(L_));
            for (std::size_t r = 0; r < bs; ++r)
              for (int l = 0; l < L_; ++l)
                dz[r * std::size_t(L_) + std::size_t(l)] =
                    dgin[r * (L_ + E_) + std::size_t(l)] +
                    float(config_.latent_prior_weight) *
                        gin[r * (L_ + E_) + std::size_t(l)] / float(bs);
            if (config_.indep_weight > 0.0 && bs > 1) {
              std::vector<double> z_mean(std::size_t(L_), 0.0);
              std::array<double, kNumRegions> a_mean{};
              for (std::size_t r = 0; r < bs; ++r) {
                for (int l = 0; l < L_; ++l)
                  z_mean[std::size_t(l)] += gin[r * (L_ + E_) + std::size_t(l)];
                for (int q = 0; q < kNumRegions; ++q)
                  a_mean[std::size_t(q)] +=
                      dataset[order[s + r]].attrs.values[std::size_t(q)];
              }
              for (double& v : z_mean) v /= double(bs);
              for (double& v : a_mean) v /= double(bs);
              std::vector<double> cov(std::size_t(L_) * kNumRegions, 0.0);
              for (std::size_t r = 0; r < bs; ++r)
                for (int l = 0; l < L_; ++l) {
                  const double zc = double(gin[r * (L_ + E_) + std::size_t(l)]) -
                                    z_mean[std::size_t(l)];
                  for (int q = 0; q < kNumRegions; ++q)
                    cov[std::size_t(l) * kNumRegions + q] +=
                        zc * (dataset[order[s + r]].attrs.values[std::size_t(q)] -
                              a_mean[std::size_t(q)]) /
                        double(bs);
                }
              for (std::size_t r = 0; r < bs; ++r)
                for (int l = 0; l < L_; ++l) {
                  double g = 0.0;
                  for (int q = 0; q < kNumRegions; ++q)
                    g += cov[std::size_t(l) * kNumRegions + q] *
                         (dataset[order[s + r]].attrs.values[std::size_t(q)] -
                          a_mean[std::size_t(q)]);
                  dz[r * std::size_t(L_) + std::size_t(l)] +=
                      float(config_.indep_weight * 2.0 * g / double(bs));
                }
            }
            ++zstep;
            const float b1 = 0.9f, b2 = 0.999f, eps_a = 1e-8f;
            const float corr1 = 1.0f - std::pow(b1, float(zstep));
            const float corr2 = 1.0f - std::pow(b2, float(zstep));
            for (std::size_t r = 0; r < bs; ++r)
              for (int l = 0; l < L_; ++l) {
                const std::size_t zi = order[s + r] * std::size_t(L_) + std::size_t(l);
                const float g = dz[r * std::size_t(L_) + std::size_t(l)];
                zm[zi] = b1 * zm[zi] + (1.0f - b1) * g;
                zv[zi] = b2 * zv[zi] + (1.0f - b2) * g * g;
                ztab_[zi] -= zlr * (zm[zi] / corr1) /
                             (std::sqrt(zv[zi] / corr2) + eps_a);
              }
          }

          // Counterfactual-consistency pass: same latents, intervened
          // attributes; soft-volume matching and/or prototype sharpening.
          if (config_.volume_weight > 0.0 || config_.sharp_weight > 0.0) {
            Vec gin2 = gin;
            std::vector<int> regions(bs);
            std::vector<double> values(bs);
            for (std::size_t r = 0; r < bs; ++r) {
              regions[r] = int(rng.uniform_index(kNumRegions));
              values[r] = rng.uniform(-1.0, 1.0);
              AttributeVector a = dataset[order[s + r]].attrs;
              a.values[std::size_t(regions[r])] = values[r];
              const Vec emb2 = embed_f(a, config_.fourier_bands);
              std::memcpy(gin2.data() + r * (L_ + E_) + L_, emb2.data(),
                          E_ * sizeof(float));
            }
            const Vec& fake2 = gen_.forward(gin2.data(), bs);
            Vec dfake2(bs * N_, 0.0f);
            if (config_.volume_weight > 0.0) {
              const float w = float(config_.volume_weight) / float(bs);
              double vol_loss = 0.0;
              // All-region constraint; see the VAE volume pass for why.
              for (std::size_t r = 0; r < bs; ++r) {
                AttributeVector tgt = dataset[order[s + r]].attrs;
                tgt.values[std::size_t(regions[r])] = values[r];
                for (int q = 0; q < kNumRegions; ++q)
                  vol_loss += meter.loss_grad(fake2.data() + r * N_, N_, q,
                                              tgt.values[std::size_t(q)], w,
                                              dfake2.data() + r * N_);
              }
              vol_sum += vol_loss / double(bs * kNumRegions);
            }
            if (config_.sharp_weight > 0.0) {
              const float w = float(config_.sharp_weight) / float(bs);
              for (std::size_t r = 0; r < bs; ++r)
                sharpness_grad(fake2.data() + r * N_, N_, w, dfake2.data() + r * N_);
            }
            gen_.backward(dfake2.data(), bs);
          }
          optg.step();
        }

        check_finite(d_loss + g_loss, "GAN");
        d_sum += d_loss;
        g_sum += g_loss;
        pix_sum += pix_loss;
        ++nb;
      }
      log_epoch(epoch, {{"d_bce", d_sum / double(nb)},
                        {"g_bce", g_sum / double(nb)},
                        {"g_pixel_l1", pix_sum / double(nb)},
                        {"vol_mae", vol_sum / double(nb)}});
    }
  }

  // Inversion encoder: regress the per-subject latents learned during
  // adversarial training from the real images (falls back to prior-sample
  // inversion when no latent table exists, e.g. a freshly loaded model).
  void train_encoder(const Dataset& dataset) {
    Rng rng(config_.seed + 3);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all(enc_.params());
    const bool have_table = ztab_.size() == dataset.size() * std::size_t(L_);
    for (int epoch = 1; epoch <= config_.encoder_epochs; ++epoch) {
      double sum = 0.0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (const std::size_t i : order) {
        Vec zs(L_);
        const Vec emb = embed_f(dataset[i].attrs, config_.fourier_bands);
        Vec ein;
        if (have_table) {
          std::memcpy(zs.data(), ztab_.data() + i * std::size_t(L_),
                      std::size_t(L_) * sizeof(float));
          pool_to_flat(dataset[i].vol.data(), config_.resolution,
                       config_.resolution / 2, ein);
        } else {
          for (int l = 0; l < L_; ++l) zs[l] = float(rng.normal());
          Vec gin(zs.begin(), zs.end());
          gin.insert(gin.end(), emb.begin(), emb.end());
          const Vec fake = gen_.forward_const(gin.data(), 1);
          pool_to_flat(fake.data(), config_.resolution, config_.resolution / 2, ein);
        }
        ein.insert(ein.end(), emb.begin(), emb.end());
        opt.zero_grad();
        const Vec& zhat = enc_.forward(ein.data(), 1);
        Vec dz(L_);
        const double loss = nn::mse_loss(zhat.data(), zs.data(), dz.data(), L_);
        enc_.backward(dz.data(), 1);
        opt.step();
        check_finite(loss, "GAN encoder");
        sum += loss;
      }
      log_epoch(config_.epochs + epoch, {{"encoder_mse", sum / double(dataset.size())}});
    }
  }

  void build_dis_input(const float* volumes, std::size_t bs,
                       const std::vector<std::size_t>& order, std::size_t s,
                       const std::vector<Vec>& embeds, Vec& out, bool) const {
    out.assign(bs * (P_ + E_), 0.0f);
    for (std::size_t r = 0; r < bs; ++r) {
      pool2_flat(volumes + r * N_, config_.resolution, out.data() + r * (P_ + E_));
      std::memcpy(out.data() + r * (P_ + E_) + P_, embeds[order[s + r]].data(),
                  E_ * sizeof(float));
    }
  }

  std::size_t N_ = 0, P_ = 0;
  int E_ = 0, L_ = 0;
  mutable nn::Mlp gen_, dis_, enc_;
  Vec ztab_;  // per-subject learned latents, training-time state only
};

// ---------------------------------------------------------------------------
// HA-GAN: low-resolution adversarial generator plus a learned upsampler
// trained on random sub-blocks, with the same post-hoc inversion encoder.

class HaGanModel final : public Model {
 public:
  explicit HaGanModel(ModelConfig cfg) : Model(std::move(cfg)) {
    config_.validate();
    const int R = config_.resolution;
    if (config_.low_res * 2 != R)
      throw std::invalid_argument("HA-GAN low_res must be resolution/2");
    N_ = cube(R);
    P_ = cube(R / 2);  // equals the low-res grid
    E_ = embed_dim(config_.fourier_bands);
    L_ = config_.latent_dims[0];
    gen_low_ = nn::Mlp({std::size_t(L_) + E_, std::size_t(config_.hidden), P_},
                       {nn::Act::Relu, nn::Act::Sigmoid});
    dis_low_ = nn::Mlp({P_ + E_, std::size_t(config_.hidden), 64, 1},
                       {nn::Act::LRelu, nn::Act::LRelu, nn::Act::None});
    up_diag_ = nn::Diag(N_);
    up_emb_ = nn::Mlp({std::size_t(E_), 64, N_}, {nn::Act::Relu, nn::Act::None});
    enc_ = nn::Mlp({P_ + E_, std::size_t(config_.hidden), std::size_t(L_)},
                   {nn::Act::Relu, nn::Act::None});
    Rng rng(config_.seed);
    gen_low_.init_he(rng);
    dis_low_.init_he(rng);
    up_diag_.init_identity();
    up_emb_.init_he(rng);
    for (float& w : up_emb_.layers().back().weights().w) w *= 0.05f;
    enc_.init_he(rng);
  }

  LatentState encode(const Volume3D& vol, const AttributeVector& attrs) const override {
    check_dims(vol);
    Vec in;
    pool_to_flat(vol.data(), config_.resolution, config_.low_res, in);
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    in.insert(in.end(), emb.begin(), emb.end());
    LatentState z;
    z.family = config_.family;
    z.payload = {enc_.forward_const(in.data(), 1)};
    z.attrs = attrs;
    return z;
  }

  Volume3D decode(const LatentState& z, const AttributeVector& attrs) const override {
    check_latent(z);
    if (int(z.payload.at(0).size()) != L_) throw ShapeMismatch("latent dim mismatch");
    const Vec emb = embed_f(attrs, config_.fourier_bands);
    Vec gin = z.payload[0];
    gin.insert(gin.end(), emb.begin(), emb.end());
    const Vec low = gen_low_.forward_const(gin.data(), 1);
    return vec_to_volume(upsample_raw(low, emb), config_.resolution);
  }

  void train(const Dataset& dataset) override {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    train_stage1(dataset);
    train_upsampler(dataset);
    train_encoder(dataset);
  }

  std::vector<const nn::Tensor*> tensors() const override {
    std::vector<const nn::Tensor*> out;
    auto* self = const_cast<HaGanModel*>(this);
    for (auto* t : self->gen_low_.params()) out.push_back(t);
    for (auto* t : self->dis_low_.params()) out.push_back(t);
    out.push_back(&up_diag_.scale());
    out.push_back(&up_diag_.bias());
    for (auto* t : self->up_emb_.params()) out.push_back(t);
    for (auto* t : self->enc_.params()) out.push_back(t);
    return out;
  }
  std::vector<nn::Tensor*> tensors_mut() override {
    auto out = gen_low_.params();
    for (auto* t : dis_low_.params()) out.push_back(t);
    out.push_back(&up_diag_.scale());
    out.push_back(&up_diag_.bias());
    for (auto* t : up_emb_.params()) out.push_back(t);
    for (auto* t : enc_.params()) out.push_back(t);
    return out;
  }

 private:
  Vec upsample_raw(const Vec& low, const Vec& emb) const {
    Vec up(N_), out(N_);
    up2_flat(low.data(), config_.low_res, up.data());
    up_diag_.forward(up.data(), out.data(), 1);
    const Vec c = up_emb_.forward_const(emb.data(), 1);
    for (std::size_t k = 0; k < N_; ++k) out[k] += c[k];
    return out;
  }

  void train_stage1(const Dataset& dataset) {
    Rng rng(config_.seed + 1);
    nn::Adam optg({float(config_.lr)});
    optg.attach_all(gen_low_.params());
    nn::Adam optd({float(config_.lr)});
    optd.attach_all(dis_low_.params());

    std::vector<Vec> lows(dataset.size()), embeds(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      pool_to_flat(dataset[i].vol.data(), config_.resolution, config_.low_res, lows[i]);
      embeds[i] = embed_f(dataset[i].attrs, config_.fourier_bands);
    }

    const std::size_t B = std::size_t(config_.batch);
    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double d_sum = 0.0, g_sum = 0.0, pix_sum = 0.0;
      std::size_t nb = 0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (std::size_t s = 0; s < order.size(); s += B) {
        const std::size_t bs = std::min(B, order.size() - s);
        Vec gin(bs * (L_ + E_));
        for (std::size_t r = 0; r < bs; ++r) {
          for (int l = 0; l < L_; ++l) gin[r * (L_ + E_) + l] = float(rng.normal());
          std::memcpy(gin.data() + r * (L_ + E_) + L_, embeds[order[s + r]].data(),
                      E_ * sizeof(float));
        }

        double d_loss = 0.0;
        optd.zero_grad();
        {
          const Vec fake = gen_low_.forward_const(gin.data(), bs);
          Vec din(bs * (P_ + E_));
          for (std::size_t r = 0; r < bs; ++r) {
            std::memcpy(din.data() + r * (P_ + E_), fake.data() + r * P_,
                        P_ * sizeof(float));
            std::memcpy(din.data() + r * (P_ + E_) + P_, embeds[order[s + r]].data(),
                        E_ * sizeof(float));
          }
          const Vec& lf = dis_low_.forward(din.data(), bs);
          Vec dlog(bs);
          d_loss += nn::bce_logits_loss(lf.data(), 0.0f, dlog.data(), bs);
          dis_low_.backward(dlog.data(), bs);

          Vec rin(bs * (P_ + E_));
          for (std::size_t r = 0; r < bs; ++r) {
            std::memcpy(rin.data() + r * (P_ + E_), lows[order[s + r]].data(),
                        P_ * sizeof(float));
            std::memcpy(rin.data() + r * (P_ + E_) + P_, embeds[order[s + r]].data(),
                        E_ * sizeof(float));
          }
          const Vec& lr = dis_low_.forward(rin.data(), bs);
          d_loss += nn::bce_logits_loss(lr.data(), 1.0f, dlog.data(), bs);
          dis_low_.backward(dlog.data(), bs);

          if (config_.mismatch_weight > 0.0 && dataset.size() > 1) {
            Vec min(bs * (P_ + E_));
            for (std::size_t r = 0; r < bs; ++r) {
              std::size_t other = rng.uniform_index(dataset.size());
              if (other == order[s + r]) other = (other + 1) % dataset.size();
              std::memcpy(min.data() + r * (P_ + E_), lows[order[s + r]].data(),
                          P_ * sizeof(float));
              std::memcpy(min.data() + r * (P_ + E_) + P_, embeds[other].data(),
                          E_ * sizeof(float));
            }
            const Vec& lm = dis_low_.forward(min.data(), bs);
            d_loss += config_.mismatch_weight *
                      nn::bce_logits_loss(lm.data(), 0.0f, dlog.data(), bs);
            for (float& g : dlog) g *= float(config_.mismatch_weight);
            dis_low_.backward(dlog.data(), bs);
          }
          optd.step();
        }

        double g_loss = 0.0, pix_loss = 0.0;
        optg.zero_grad();
        {
          const Vec& fake = gen_low_.forward(gin.data(), bs);
          Vec dfake(bs * P_, 0.0f);
          Vec din(bs * (P_ + E_));
          for (std::size_t r = 0; r < bs; ++r) {
            std::memcpy(din.data() + r * (P_ + E_), fake.data() + r * P_,
                        P_ * sizeof(float));
            std::memcpy(din.data() + r * (P_ + E_) + P_, embeds[order[s + r]].data(),
                        E_ * sizeof(float));
          }
          const Vec& logits = dis_low_.forward(din.data(), bs);
          Vec dlog(bs);
          g_loss = nn::bce_logits_loss(logits.data(), 1.0f, dlog.data(), bs);
          const Vec& ddin = dis_low_.backward(dlog.data(), bs);
          for (std::size_t r = 0; r < bs; ++r)
            std::memcpy(dfake.data() + r * P_, ddin.data() + r * (P_ + E_),
                        P_ * sizeof(float));

          if (config_.recon_weight > 0.0) {
            Vec target(bs * P_), dpix(bs * P_);
            for (std::size_t r = 0; r < bs; ++r)
              std::memcpy(target.data() + r * P_, lows[order[s + r]].data(),
                          P_ * sizeof(float));
            pix_loss = nn::l1_loss(fake.data(), target.data(), dpix.data(), bs * P_);
            kernels::active().axpy(float(config_.recon_weight), dpix.data(),
                                   dfake.data(), bs * P_);
          }
          gen_low_.backward(dfake.data(), bs);
          optg.step();
        }
        check_finite(d_loss + g_loss, "HA-GAN stage 1");
        d_sum += d_loss;
        g_sum += g_loss;
        pix_sum += pix_loss;
        ++nb;
      }
      log_epoch(epoch, {{"d_bce", d_sum / double(nb)},
                        {"g_bce", g_sum / double(nb)},
                        {"g_pixel_l1", pix_sum / double(nb)}});
    }
  }

  // Supervised sub-block training: only a random low_res^3 crop of the output
  // contributes gradients each step.
  void train_upsampler(const Dataset& dataset) {
    Rng rng(config_.seed + 5);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all({&up_diag_.scale(), &up_diag_.bias()});
    opt.attach_all(up_emb_.params());
    const int R = config_.resolution;
    const int C = config_.low_res;

    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      double sum = 0.0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (const std::size_t i : order) {
        const Vec emb = embed_f(dataset[i].attrs, config_.fourier_bands);
        Vec low;
        pool_to_flat(dataset[i].vol.data(), R, C, low);
        Vec up(N_), out(N_);
        up2_flat(low.data(), C, up.data());
        up_diag_.forward(up.data(), out.data(), 1);
        const Vec c = up_emb_.forward(emb.data(), 1);
        for (std::size_t k = 0; k < N_; ++k) out[k] += c[k];

        const int ox = int(rng.uniform_index(std::size_t(R - C + 1)));
        const int oy = int(rng.uniform_index(std::size_t(R - C + 1)));
        const int oz = int(rng.uniform_index(std::size_t(R - C + 1)));
        Vec dout(N_, 0.0f);
        double loss = 0.0;
        const std::size_t nc = cube(C);
        for (int a = 0; a < C; ++a)
          for (int b = 0; b < C; ++b)
            for (int d = 0; d < C; ++d) {
              const std::size_t idx =
                  (std::size_t(ox + a) * R + (oy + b)) * R + (oz + d);
              const float diff = out[idx] - dataset[i].vol.data()[idx];
              loss += std::abs(diff);
              dout[idx] = (diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f)) /
                          float(nc);
            }
        loss /= double(nc);
        check_finite(loss, "HA-GAN upsampler");

        opt.zero_grad();
        Vec dup(N_);
        up_diag_.backward(up.data(), dout.data(), dup.data(), 1);
        up_emb_.backward(dout.data(), 1);
        opt.step();
        sum += loss;
      }
      log_epoch(config_.epochs + epoch, {{"upsampler_l1", sum / double(dataset.size())}});
    }
  }

  void train_encoder(const Dataset& dataset) {
    Rng rng(config_.seed + 3);
    nn::Adam opt({float(config_.lr)});
    opt.attach_all(enc_.params());
    for (int epoch = 1; epoch <= config_.encoder_epochs; ++epoch) {
      double sum = 0.0;
      const auto order = shuffled_indices(dataset.size(), rng);
      for (const std::size_t i : order) {
        Vec zs(L_);
        for (int l = 0; l < L_; ++l) zs[l] = float(rng.normal());
        const Vec emb = embed_f(dataset[i].attrs, config_.fourier_bands);
        Vec gin(zs.begin(), zs.end());
        gin.insert(gin.end(), emb.begin(), emb.end());
        const Vec low = gen_low_.forward_const(gin.data(), 1);
        Vec full = upsample_raw(low, emb);
        kernels::active().clamp(full.data(), full.size(), 0.0f, 1.0f);
        Vec ein;
        pool_to_flat(full.data(), config_.resolution, config_.low_res, ein);
        ein.insert(ein.end(), emb.begin(), emb.end());
        opt.zero_grad();
        const Vec& zhat = enc_.forward(ein.data(), 1);
        Vec dz(L_);
        const double loss = nn::mse_loss(zhat.data(), zs.data(), dz.data(), L_);
        enc_.backward(dz.data(), 1);
        opt.step();
        check_finite(loss, "HA-GAN encoder");
        sum += loss;
      }
      log_epoch(2 * config_.epochs + epoch,
                {{"encoder_mse", sum / double(dataset.size())}});
    }
  }

  std::size_t N_ = 0, P_ = 0;
  int E_ = 0, L_ = 0;
  mutable nn::Mlp gen_low_, dis_low_, up_emb_, enc_;
  nn::Diag up_diag_;
};

}  // namespace

// ---------------------------------------------------------------------------
// factories

std::unique_ptr<Model> create_model(const ModelConfig& config) {
  config.validate();
  switch (config.family) {
    case ModelFamily::VAE:
      return std::make_unique<VaeModel>(config);
    case ModelFamily::HVAE:
      return std::make_unique<HvaeModel>(config);
    case ModelFamily::VAE_GLM:
      return std::make_unique<VaeGlmModel>(config);
    case ModelFamily::GAN:
    case ModelFamily::GAN_FT:
      return std::make_unique<GanModel>(config);
    case ModelFamily::HA_GAN:
      return std::make_unique<HaGanModel>(config);
    case ModelFamily::Identity: {
      ModelConfig c = config;
      return std::make_unique<IdentityModel>(std::move(c));
    }
  }
  throw std::invalid_argument("unsupported model family");
}

std::unique_ptr<Model> train_model(const ModelConfig& config, const Dataset& dataset) {
  std::unique_ptr<Model> m = create_model(config);
  m->train(dataset);
  return m;
}

std::unique_ptr<Model> finetune_encoder_cyclic(const Model& gan, const Dataset& dataset) {
  if (gan.config().family != ModelFamily::GAN &&
      gan.config().family != ModelFamily::GAN_FT)
    throw FamilyMismatch("cyclic finetuning requires a GAN checkpoint");
  ModelConfig cfg = gan.config();
  cfg.family = ModelFamily::GAN_FT;
  auto clone = std::make_unique<GanModel>(cfg);
  // Copy weights from the source model.
  const auto src = gan.tensors();
  auto dst = clone->tensors_mut();
  if (src.size() != dst.size()) throw ShapeMismatch("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->w.size() != dst[i]->w.size())
      throw ShapeMismatch("checkpoint tensor size mismatch");
    dst[i]->w = src[i]->w;
  }
  clone->set_normalizer(gan.normalizer());

  const std::uint64_t before = clone->generator_hash();
  clone->finetune_cyclic(dataset);
  if (clone->generator_hash() != before)
    throw std::logic_error("generator weights changed during encoder finetuning");
  return clone;
}

}  // namespace cfbench
