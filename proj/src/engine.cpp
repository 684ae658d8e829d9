#include "cfbench/engine.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cfbench/rng.hpp"

namespace cfbench {

namespace fs = std::filesystem;
using nlohmann::json;

Volume3D counterfactual(const CounterfactualRequest& req) {
  if (req.model == nullptr) throw std::invalid_argument("counterfactual: null model");
  const LatentState z = req.model->encode(req.vol, req.attrs);
  const AttributeVector conditioning =
      req.intervention ? apply_do(req.attrs, *req.intervention) : req.attrs;
  return req.model->decode(z, conditioning);
}

std::vector<Volume3D> null_pass_chain(const Model& model, const Volume3D& vol,
                                      const AttributeVector& attrs, int k) {
  if (k < 1) throw std::invalid_argument("null_pass_chain: k must be >= 1");
  std::vector<Volume3D> outputs;
  outputs.reserve(std::size_t(k));
  const Volume3D* current = &vol;
  for (int i = 0; i < k; ++i) {
    outputs.push_back(counterfactual({&model, *current, attrs, std::nullopt}));
    current = &outputs.back();
  }
  return outputs;
}

CycleTrace reversibility_chain(const Model& model, const Volume3D& vol,
                               const AttributeVector& attrs, RegionId target,
                               int cycles, std::uint64_t rng_seed) {
  if (cycles < 1) throw std::invalid_argument("reversibility_chain: cycles >= 1");
  Rng rng(rng_seed);
  CycleTrace trace;
  trace.target = target;
  trace.seed = rng_seed;

  const double original = attrs[target];
  Volume3D current = vol;
  for (int c = 0; c < cycles; ++c) {
    const Intervention forward = sample_intervention(target, rng);
    trace.sampled_values.push_back(forward.value);
    current = counterfactual({&model, current, attrs, forward});
    trace.steps.push_back({forward, current});

    const Intervention reverse{target, original};
    current = counterfactual({&model, current, attrs, reverse});
    trace.steps.push_back({reverse, current});
  }
  return trace;
}

void save_trace(const CycleTrace& trace, const std::string& dir) {
  fs::create_directories(dir);
  json j;
  j["target"] = region_name(trace.target);
  j["seed"] = trace.seed;
  j["sampled_values"] = trace.sampled_values;
  const Dims d = trace.steps.empty() ? Dims{0, 0, 0} : trace.steps.front().vol.dims();
  j["dims"] = {d.x, d.y, d.z};
  json steps = json::array();
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const CycleStep& s = trace.steps[i];
    const std::string file = "step_" + std::to_string(i) + ".f32";
    steps.push_back({{"target", region_name(s.intervention.target)},
                     {"value", s.intervention.value},
                     {"file", file}});
    std::ofstream vf(fs::path(dir) / file, std::ios::binary);
    vf.write(reinterpret_cast<const char*>(s.vol.data()),
             std::streamsize(s.vol.size() * sizeof(float)));
  }
  j["steps"] = steps;
  std::ofstream(fs::path(dir) / "meta.json") << j.dump(2) << "\n";
}

CycleTrace load_trace(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "meta.json");
  if (!mf) throw std::runtime_error("missing trace meta.json in " + dir);
  std::stringstream ss;
  ss << mf.rdbuf();
  const json j = json::parse(ss.str());

  CycleTrace trace;
  trace.target = region_from_name(j.at("target").get<std::string>());
  trace.seed = j.at("seed").get<std::uint64_t>();
  trace.sampled_values = j.at("sampled_values").get<std::vector<double>>();
  const Dims d{j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(),
               j.at("dims")[2].get<int>()};
  for (const json& js : j.at("steps")) {
    CycleStep step;
    step.intervention.target = region_from_name(js.at("target").get<std::string>());
    step.intervention.value = js.at("value").get<double>();
    std::ifstream vf(fs::path(dir) / js.at("file").get<std::string>(),
                     std::ios::binary);
    if (!vf) throw std::runtime_error("missing trace step volume in " + dir);
    std::vector<float> data(std::size_t(d.x) * d.y * d.z);
    vf.read(reinterpret_cast<char*>(data.data()),
            std::streamsize(data.size() * sizeof(float)));
    if (!vf) throw std::runtime_error("truncated trace step volume in " + dir);
    step.vol = Volume3D(d, std::move(data));
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

}  // namespace cfbench
