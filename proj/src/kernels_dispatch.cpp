#include "cfbench/kernels.hpp"

namespace cfbench::kernels {

namespace {

struct Active {
  const Ops* ops;
  std::string name;
};

Active detect() {
#ifdef CFBENCH_HAVE_AVX2_BUILD
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    return {&avx2::ops(), "avx2"};
  }
#endif
  return {&scalar::ops(), "scalar"};
}

Active& state() {
  static Active a = detect();
  return a;
}

}  // namespace

const Ops& active() { return *state().ops; }
const std::string& active_name() { return state().name; }

bool set_active(const std::string& name) {
  if (name == "scalar") {
    state() = {&scalar::ops(), "scalar"};
    return true;
  }
#ifdef CFBENCH_HAVE_AVX2_BUILD
  if (name == "avx2" && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    state() = {&avx2::ops(), "avx2"};
    return true;
  }
#endif
  return false;
}

}  // namespace cfbench::kernels
