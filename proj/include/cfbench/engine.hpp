#pragma once

// Counterfactual abduction-action-prediction loop: single requests,
// null-intervention pass chains, and forward/reverse intervention cycles.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfbench/attributes.hpp"
#include "cfbench/models.hpp"
#include "cfbench/phantom.hpp"
#include "cfbench/volume.hpp"

namespace cfbench {

struct CounterfactualRequest {
  const Model* model = nullptr;
  Volume3D vol;
  AttributeVector attrs;  // normalized, factual
  std::optional<Intervention> intervention;  // absent = null intervention
};

// z = encode(vol, attrs); a' = do(attrs, iv) if present; decode(z, a').
Volume3D counterfactual(const CounterfactualRequest& req);

// k successive null-intervention passes; pass i+1 re-encodes the output of
// pass i with the unchanged factual attributes. Returns all k outputs.
std::vector<Volume3D> null_pass_chain(const Model& model, const Volume3D& vol,
                                      const AttributeVector& attrs, int k);

struct CycleStep {
  Intervention intervention;  // conditioning applied on this pass
  Volume3D vol;               // resulting image
};

struct CycleTrace {
  RegionId target = RegionId::Fro;
  std::uint64_t seed = 0;               // provenance of the sampled values
  std::vector<double> sampled_values;   // one forward value per cycle
  std::vector<CycleStep> steps;         // 2 per cycle: forward then reverse
};

// Each cycle: do(target <- Uniform[-1,1] sample) on the current image, then
// do(target <- original value); abduction re-runs on every intermediate
// image, non-target attributes stay factual. rng_seed is recorded in the
// trace so the chain is replayable.
CycleTrace reversibility_chain(const Model& model, const Volume3D& vol,
                               const AttributeVector& attrs, RegionId target,
                               int cycles, std::uint64_t rng_seed);

// Disk round-trip: meta.json plus one step_<i>.f32 file per pass.
void save_trace(const CycleTrace& trace, const std::string& dir);
CycleTrace load_trace(const std::string& dir);

}  // namespace cfbench
