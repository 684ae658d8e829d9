#pragma once

// Six conditional generative model families behind one encode/decode
// (abduction/prediction) interface, plus the identity test double used by
// the acceptance suite.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfbench/attributes.hpp"
#include "cfbench/nn.hpp"
#include "cfbench/volume.hpp"

namespace cfbench {

enum class ModelFamily { VAE, HVAE, VAE_GLM, GAN, GAN_FT, HA_GAN, Identity };

const char* family_name(ModelFamily f);
ModelFamily family_from_name(const std::string& name);

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FamilyMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  ModelFamily family = ModelFamily::VAE;
  int resolution = 32;
  // VAE/GAN: one entry. HVAE: latent grid edge lengths per level (>= 2).
  std::vector<int> latent_dims = {16};
  // One band for the trained families: higher bands oscillate inside the
  // normalized attribute range and the decoder's volume response becomes
  // non-monotone between training values (the raw embedding op keeps
  // kDefaultFourierBands as its own default).
  int fourier_bands = 1;
  int hidden = 256;

  double lr = 1e-3;
  int epochs = 240;
  int batch = 16;
  std::uint64_t seed = 1234;

  // Loss weights (family-specific ones ignored elsewhere).
  double recon_weight = 1.0;
  double kl_weight = 0.15;
  double mismatch_weight = 0.5;   // matching-aware discriminator term
  // Weight of the soft-volume consistency term: decodes under a sampled
  // intervention are penalized when a differentiable prototype-softmax
  // volume measurement disagrees with the commanded value. This is what
  // makes the conditioning effective rather than decorative (VAE and GAN).
  double volume_weight = 3e-4;
  // Weight of the latent-independence penalty (squared batch covariance of
  // the posterior means against the attributes). Forcing z to be
  // uninformative about the causal parents leaves the conditioning pathway
  // as the only source of volume information, which is what makes
  // interventions take effect at decode time.
  double indep_weight = 200.0;
  // Prototype-sharpness prior on counterfactual decodes: mean squared
  // distance of each voxel to its nearest intensity prototype. Counterfactual
  // outputs have no pixel target, and blurred boundary intensities (e.g.
  // halfway between tissue and a cortical prototype) are exactly what the
  // oracle segmenter misreads.
  double sharp_weight = 0.05;
  // GAN only: weight of the adversarial gradient into the generator, and
  // number of leading epochs where the generator trains on the pixel term
  // alone. The pixel term anchors the conditional structure; the (small)
  // adversarial term then sharpens region boundaries that the oracle
  // segmenter would otherwise misread as blur.
  double adv_weight = 0.01;
  int warmup_epochs = 120;
  double latent_prior_weight = 1e-3;

  int encoder_epochs = 20;        // post-hoc GAN inversion encoder
  int finetune_epochs = 10;       // GAN_FT cyclic refinement
  double image_cycle_weight = 1.0;
  double latent_cycle_weight = 0.1;

  int low_res = 16;               // HA_GAN stage-1 edge length

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  // Tuned per-family training hyperparameters at the default 32^3 scale.
  static ModelConfig defaults_for(ModelFamily family);
};

// Family-tagged latent payload plus the factual attributes from abduction.
struct LatentState {
  ModelFamily family = ModelFamily::VAE;
  std::vector<nn::Vec> payload;
  AttributeVector attrs;
};

struct TrainItem {
  Volume3D vol;
  AttributeVector attrs;  // normalized
};
using Dataset = std::vector<TrainItem>;

struct TrainLogRow {
  int epoch = 0;
  std::map<std::string, double> losses;
};

class Model {
 public:
  virtual ~Model() = default;

  const ModelConfig& config() const { return config_; }
  const Normalizer& normalizer() const { return normalizer_; }
  void set_normalizer(const Normalizer& n) { normalizer_ = n; }

  // Deterministic abduction (posterior mean / encoder output, no sampling).
  virtual LatentState encode(const Volume3D& vol,
                             const AttributeVector& attrs) const = 0;
  // Deterministic prediction; output clamped to [0,1] at config resolution.
  virtual Volume3D decode(const LatentState& z, const AttributeVector& attrs) const = 0;

  virtual void train(const Dataset& dataset) = 0;

  virtual std::vector<const nn::Tensor*> tensors() const = 0;
  virtual std::vector<nn::Tensor*> tensors_mut() = 0;

  // Hash of the generator/decoder weights alone: the GAN_FT freeze contract.
  virtual std::uint64_t generator_hash() const;

  std::uint64_t weights_hash() const;
  const std::vector<TrainLogRow>& train_log() const { return log_; }

  void save(const std::string& dir) const;
  static std::unique_ptr<Model> load(const std::string& dir);

 protected:
  explicit Model(ModelConfig cfg) : config_(std::move(cfg)) {}

  void check_dims(const Volume3D& vol) const;
  void check_latent(const LatentState& z) const;
  void log_epoch(int epoch, std::map<std::string, double> losses);

  ModelConfig config_;
  Normalizer normalizer_;
  std::vector<TrainLogRow> log_;
};

// Fresh model with seeded initial weights, not trained.
std::unique_ptr<Model> create_model(const ModelConfig& config);

// create + train. Throws on empty dataset or non-finite loss.
std::unique_ptr<Model> train_model(const ModelConfig& config, const Dataset& dataset);

// Cyclic-cost encoder refinement of a trained GAN; generator and
// discriminator weights are untouched (hash-equal before/after).
std::unique_ptr<Model> finetune_encoder_cyclic(const Model& gan, const Dataset& dataset);

// Identity test double: encode stores the image, decode returns it bitwise.
std::unique_ptr<Model> make_identity_double(int resolution);

}  // namespace cfbench
