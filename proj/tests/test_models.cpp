#include <cmath>
#include <filesystem>

#include <doctest.h>

#include "cfbench/models.hpp"
#include "cfbench/phantom.hpp"
#include "cfbench/rng.hpp"

using namespace cfbench;
namespace fs = std::filesystem;

namespace {

// Small shared fixture: 16^3 phantoms with normalized attributes.
struct TinyData {
  Dataset items;
  Normalizer norm;
};

const TinyData& tiny_data() {
  static const TinyData data = [] {
    TinyData d;
    std::vector<RawVolumes> pool;
    std::vector<std::pair<Volume3D, RawVolumes>> scans;
    for (int i = 0; i < 10; ++i) {
      const auto [vol, labels] =
          render_phantom(sample_subject(CohortId::A, 4000 + i), {16, 16, 16});
      const RawVolumes rv = region_volumes(labels);
      pool.push_back(rv);
      scans.emplace_back(vol, rv);
    }
    d.norm = Normalizer::fit(pool);
    for (auto& [vol, rv] : scans)
      d.items.push_back({vol, d.norm.normalize(AttributeVector::from_raw(rv))});
    return d;
  }();
  return data;
}

ModelConfig tiny_config(ModelFamily family) {
  ModelConfig c;
  c.family = family;
  c.resolution = 16;
  c.low_res = 8;
  c.hidden = 64;
  c.epochs = 4;
  c.encoder_epochs = 3;
  c.finetune_epochs = 2;
  c.batch = 4;
  c.seed = 11;
  switch (family) {
    case ModelFamily::HVAE:
      c.latent_dims = {4, 8};
      break;
    case ModelFamily::GAN:
    case ModelFamily::GAN_FT:
    case ModelFamily::HA_GAN:
      c.latent_dims = {8};
      break;
    default:
      c.latent_dims = {8};
  }
  return c;
}

double first_logged(const Model& m, const std::string& key) {
  for (const TrainLogRow& row : m.train_log()) {
    const auto it = row.losses.find(key);
    if (it != row.losses.end()) return it->second;
  }
  FAIL("missing train log key ", key);
  return 0.0;
}

double last_logged(const Model& m, const std::string& key) {
  for (auto it = m.train_log().rbegin(); it != m.train_log().rend(); ++it) {
    const auto jt = it->losses.find(key);
    if (jt != it->losses.end()) return jt->second;
  }
  FAIL("missing train log key ", key);
  return 0.0;
}

// Mean of the first/last k logged values of a key; smooths out the per-epoch
// noise from resampled training targets.
std::pair<double, double> head_tail_mean(const Model& m, const std::string& key,
                                         std::size_t k) {
  std::vector<double> vals;
  for (const TrainLogRow& row : m.train_log()) {
    const auto it = row.losses.find(key);
    if (it != row.losses.end()) vals.push_back(it->second);
  }
  REQUIRE(vals.size() >= 2 * k);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    head += vals[i];
    tail += vals[vals.size() - 1 - i];
  }
  return {head / double(k), tail / double(k)};
}

}  // namespace

TEST_CASE("model config json round trip and validation") {
  ModelConfig c = tiny_config(ModelFamily::HVAE);
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.family == c.family);
  CHECK(back.latent_dims == c.latent_dims);
  CHECK(back.epochs == c.epochs);
  CHECK(back.seed == c.seed);

  ModelConfig bad = c;
  bad.latent_dims = {4};  // HVAE needs >= 2 levels
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.resolution = 20;  // not a power of two
  CHECK_THROWS(bad.validate());
  bad = tiny_config(ModelFamily::HA_GAN);
  bad.low_res = 16;  // must be < resolution
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(family_from_name("NOPE"));
}

TEST_CASE("fresh models are deterministic in the seed") {
  for (ModelFamily f : {ModelFamily::VAE, ModelFamily::HVAE, ModelFamily::VAE_GLM,
                        ModelFamily::GAN, ModelFamily::HA_GAN}) {
    CAPTURE(family_name(f));
    const ModelConfig c = tiny_config(f);
    const auto a = create_model(c);
    const auto b = create_model(c);
    CHECK(a->weights_hash() == b->weights_hash());
    ModelConfig c2 = c;
    c2.seed = 12;
    CHECK(create_model(c2)->weights_hash() != a->weights_hash());
  }
}

TEST_CASE("encode/decode contracts: shapes, range, mismatch errors") {
  const TinyData& d = tiny_data();
  for (ModelFamily f : {ModelFamily::VAE, ModelFamily::HVAE, ModelFamily::VAE_GLM,
                        ModelFamily::GAN, ModelFamily::HA_GAN}) {
    CAPTURE(family_name(f));
    const auto m = create_model(tiny_config(f));
    const LatentState z = m->encode(d.items[0].vol, d.items[0].attrs);
    CHECK(z.family == f);
    const Volume3D out = m->decode(z, d.items[0].attrs);
    CHECK(out.dims() == Dims{16, 16, 16});
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out.data()[i] >= 0.0f);
      CHECK(out.data()[i] <= 1.0f);
    }
    CHECK_THROWS_AS(m->encode(Volume3D({8, 8, 8}), d.items[0].attrs), ShapeMismatch);
  }

  // cross-family latent is rejected
  const auto vae = create_model(tiny_config(ModelFamily::VAE));
  const auto gan = create_model(tiny_config(ModelFamily::GAN));
  const LatentState zv = vae->encode(d.items[0].vol, d.items[0].attrs);
  CHECK_THROWS_AS(gan->decode(zv, d.items[0].attrs), FamilyMismatch);
}

TEST_CASE("training reduces the logged objective") {
  const TinyData& d = tiny_data();

  SUBCASE("VAE recon decreases") {
    ModelConfig c = tiny_config(ModelFamily::VAE);
    c.epochs = 8;
    const auto m = train_model(c, d.items);
    CHECK(last_logged(*m, "recon_l1") < first_logged(*m, "recon_l1"));
  }
  SUBCASE("HVAE recon decreases") {
    ModelConfig c = tiny_config(ModelFamily::HVAE);
    c.epochs = 6;
    const auto m = train_model(c, d.items);
    CHECK(last_logged(*m, "recon_l1") < first_logged(*m, "recon_l1"));
  }
  SUBCASE("VAE-GLM recon decreases") {
    ModelConfig c = tiny_config(ModelFamily::VAE_GLM);
    c.epochs = 8;
    const auto m = train_model(c, d.items);
    CHECK(last_logged(*m, "recon_l1") < first_logged(*m, "recon_l1"));
  }
  SUBCASE("GAN pixel term and encoder objective decrease") {
    ModelConfig c = tiny_config(ModelFamily::GAN);
    c.epochs = 6;
    c.encoder_epochs = 30;  // z targets are resampled, so average the noise out
    const auto m = train_model(c, d.items);
    CHECK(last_logged(*m, "g_pixel_l1") < first_logged(*m, "g_pixel_l1"));
    const auto [head, tail] = head_tail_mean(*m, "encoder_mse", 5);
    CHECK(tail < head);
  }
  SUBCASE("HA-GAN upsampler objective decreases") {
    ModelConfig c = tiny_config(ModelFamily::HA_GAN);
    c.epochs = 5;
    const auto m = train_model(c, d.items);
    CHECK(last_logged(*m, "upsampler_l1") < first_logged(*m, "upsampler_l1"));
  }

  CHECK_THROWS(train_model(tiny_config(ModelFamily::VAE), Dataset{}));
}

TEST_CASE("training is deterministic") {
  const TinyData& d = tiny_data();
  ModelConfig c = tiny_config(ModelFamily::VAE);
  c.epochs = 3;
  const auto a = train_model(c, d.items);
  const auto b = train_model(c, d.items);
  CHECK(a->weights_hash() == b->weights_hash());
  const Volume3D oa = a->decode(a->encode(d.items[1].vol, d.items[1].attrs),
                                d.items[1].attrs);
  const Volume3D ob = b->decode(b->encode(d.items[1].vol, d.items[1].attrs),
                                d.items[1].attrs);
  CHECK(oa == ob);
}

TEST_CASE("checkpoint save/load round trip") {
  const TinyData& d = tiny_data();
  const fs::path dir = fs::temp_directory_path() / "cfbench_test_ckpt";
  fs::remove_all(dir);

  for (ModelFamily f : {ModelFamily::VAE, ModelFamily::HVAE, ModelFamily::VAE_GLM,
                        ModelFamily::GAN, ModelFamily::HA_GAN}) {
    CAPTURE(family_name(f));
    ModelConfig c = tiny_config(f);
    c.epochs = 2;
    c.encoder_epochs = 1;
    const auto m = train_model(c, d.items);
    m->set_normalizer(d.norm);
    const fs::path mdir = dir / family_name(f);
    m->save(mdir.string());

    const auto back = Model::load(mdir.string());
    CHECK(back->weights_hash() == m->weights_hash());
    CHECK(back->normalizer() == d.norm);
    CHECK(back->config().family == f);
    const Volume3D o1 = m->decode(m->encode(d.items[0].vol, d.items[0].attrs),
                                  d.items[0].attrs);
    const Volume3D o2 = back->decode(back->encode(d.items[0].vol, d.items[0].attrs),
                                     d.items[0].attrs);
    CHECK(o1 == o2);
    CHECK(fs::exists(mdir / "config.json"));
    CHECK(fs::exists(mdir / "normalizer.json"));
    CHECK(fs::exists(mdir / "weights.bin"));
    CHECK(fs::exists(mdir / "train_log.csv"));
  }
  fs::remove_all(dir);
}

TEST_CASE("GAN finetuning freezes the generator and lowers the cycle loss") {
  const TinyData& d = tiny_data();
  ModelConfig c = tiny_config(ModelFamily::GAN);
  c.epochs = 6;
  c.encoder_epochs = 4;
  c.finetune_epochs = 6;
  const auto gan = train_model(c, d.items);
  gan->set_normalizer(d.norm);

  const auto cycle = [&](const Model& m) {
    double total = 0.0;
    for (const TrainItem& item : d.items) {
      const Volume3D recon =
          m.decode(m.encode(item.vol, item.attrs), item.attrs);
      double s = 0.0;
      for (std::size_t i = 0; i < recon.size(); ++i)
        s += std::abs(double(recon.data()[i]) - double(item.vol.data()[i]));
      total += s / double(recon.size());
    }
    return total / double(d.items.size());
  };

  const double before = cycle(*gan);
  const std::uint64_t gen_before = gan->generator_hash();
  const auto ft = finetune_encoder_cyclic(*gan, d.items);

  CHECK(ft->config().family == ModelFamily::GAN_FT);
  CHECK(ft->generator_hash() == gen_before);        // frozen G and D
  CHECK(ft->weights_hash() != gan->weights_hash()); // encoder moved
  CHECK(cycle(*ft) <= before);                      // cyclic cost improved

  // finetuning a non-GAN family is rejected
  CHECK_THROWS_AS(finetune_encoder_cyclic(*create_model(tiny_config(ModelFamily::VAE)),
                                          d.items),
                  FamilyMismatch);
}

TEST_CASE("conditioning sensitivity: decode changes when attributes change") {
  const TinyData& d = tiny_data();
  for (ModelFamily f : {ModelFamily::VAE, ModelFamily::HVAE, ModelFamily::GAN,
                        ModelFamily::HA_GAN, ModelFamily::VAE_GLM}) {
    CAPTURE(family_name(f));
    ModelConfig c = tiny_config(f);
    c.epochs = 3;
    const auto m = train_model(c, d.items);
    const LatentState z = m->encode(d.items[0].vol, d.items[0].attrs);
    AttributeVector shifted = d.items[0].attrs;
    shifted[RegionId::Ven] = shifted[RegionId::Ven] > 0.0 ? -1.0 : 1.0;
    CHECK(m->decode(z, d.items[0].attrs) != m->decode(z, shifted));
  }
}

TEST_CASE("identity double is a bitwise passthrough") {
  const TinyData& d = tiny_data();
  const auto id = make_identity_double(16);
  const LatentState z = id->encode(d.items[0].vol, d.items[0].attrs);
  AttributeVector other = d.items[1].attrs;
  CHECK(id->decode(z, d.items[0].attrs) == d.items[0].vol);
  CHECK(id->decode(z, other) == d.items[0].vol);
  CHECK(id->tensors().empty());
}
