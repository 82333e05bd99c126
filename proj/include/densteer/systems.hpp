#pragma once

#include "densteer/lie.hpp"

namespace densteer {

// A named dynamics + admissible-output pair, ready for build_tuple.
struct BuiltinSystem {
  std::string name;
  ControlAffineSystem sys;
  ScalarField lambda;
};

// Registered systems: "vdp2d" (planar oscillator with state-dependent
// damping), "flat3d" (three-state system linearizable on x2 > -1, where the
// decoupling term 1 + x2 stays positive), "brunovsky2d" (double integrator,
// already in chain form).  Unknown names raise ConfigError.
BuiltinSystem builtin_system(const std::string& name);
std::vector<std::string> builtin_system_names();

}  // namespace densteer
