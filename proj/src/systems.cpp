#include "densteer/systems.hpp"

namespace densteer {

namespace {

BuiltinSystem make_vdp2d() {
  BuiltinSystem b;
  b.name = "vdp2d";
  b.sys.n = 2;
  b.sys.f.n = 2;
  b.sys.f.value = [](const Vector& x) {
    Vector v(2);
    v << x[1], -x[0] + 0.5 * (1.0 - x[0] * x[0]) * x[1];
    return v;
  };
  b.sys.f.jacobian = [](const Vector& x) {
    Matrix J(2, 2);
    J << 0.0, 1.0, -1.0 - x[0] * x[1], 0.5 * (1.0 - x[0] * x[0]);
    return J;
  };
  b.sys.g.n = 2;
  b.sys.g.value = [](const Vector&) {
    Vector v(2);
    v << 0.0, 1.0;
    return v;
  };
  b.sys.g.jacobian = [](const Vector&) { return Matrix::Zero(2, 2); };
  b.sys.domain = [](const Vector&) { return true; };
  b.lambda.n = 2;
  b.lambda.value = [](const Vector& x) { return x[0]; };
  b.lambda.gradient = [](const Vector&) {
    Vector g(2);
    g << 1.0, 0.0;
    return g;
  };
  return b;
}

BuiltinSystem make_flat3d() {
  BuiltinSystem b;
  b.name = "flat3d";
  b.sys.n = 3;
  b.sys.f.n = 3;
  b.sys.f.value = [](const Vector& x) {
    Vector v(3);
    v << x[2], -x[1], -x[0] + x[1] - 2.0 * x[1] * x[1];
    return v;
  };
  b.sys.f.jacobian = [](const Vector& x) {
    Matrix J(3, 3);
    J << 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 1.0 - 4.0 * x[1], 0.0;
    return J;
  };
  b.sys.g.n = 3;
  b.sys.g.value = [](const Vector& x) {
    Vector v(3);
    v << -x[1], 1.0, 2.0 * x[1];
    return v;
  };
  b.sys.g.jacobian = [](const Vector&) {
    Matrix J(3, 3);
    J << 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0;
    return J;
  };
  b.sys.domain = [](const Vector& x) { return x[1] > -1.0; };
  b.lambda.n = 3;
  b.lambda.value = [](const Vector& x) { return x[0] + 0.5 * x[1] * x[1]; };
  b.lambda.gradient = [](const Vector& x) {
    Vector g(3);
    g << 1.0, x[1], 0.0;
    return g;
  };
  return b;
}

BuiltinSystem make_brunovsky2d() {
  BuiltinSystem b;
  b.name = "brunovsky2d";
  b.sys.n = 2;
  b.sys.f.n = 2;
  b.sys.f.value = [](const Vector& x) {
    Vector v(2);
    v << x[1], 0.0;
    return v;
  };
  b.sys.f.jacobian = [](const Vector&) {
    Matrix J(2, 2);
    J << 0.0, 1.0, 0.0, 0.0;
    return J;
  };
  b.sys.g.n = 2;
  b.sys.g.value = [](const Vector&) {
    Vector v(2);
    v << 0.0, 1.0;
    return v;
  };
  b.sys.g.jacobian = [](const Vector&) { return Matrix::Zero(2, 2); };
  b.sys.domain = [](const Vector&) { return true; };
  b.lambda.n = 2;
  b.lambda.value = [](const Vector& x) { return x[0]; };
  b.lambda.gradient = [](const Vector&) {
    Vector g(2);
    g << 1.0, 0.0;
    return g;
  };
  return b;
}

}  // namespace

BuiltinSystem builtin_system(const std::string& name) {
  if (name == "vdp2d") return make_vdp2d();
  if (name == "flat3d") return make_flat3d();
  if (name == "brunovsky2d") return make_brunovsky2d();
  std::string known;
  for (const auto& k : builtin_system_names())
    known += (known.empty() ? "" : ", ") + k;
  throw ConfigError("unknown builtin system '" + name + "' (known: " + known +
                    ")");
}

std::vector<std::string> builtin_system_names() {
  return {"vdp2d", "flat3d", "brunovsky2d"};
}

}  // namespace densteer
