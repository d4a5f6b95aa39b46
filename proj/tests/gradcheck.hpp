#pragma once

// Central finite-difference oracle for tape-recorded functions, in double precision.

#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "cfw/autodiff.hpp"

namespace testsupport {

using Td = cfw::Tensor<double>;
using Vd = cfw::ad::Var<double>;
using BuildFn = std::function<Vd(cfw::ad::Tape<double>&, const std::vector<Vd>&)>;

inline Td random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        double min_abs = 0.0) {
  Td t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) {
    do v = u(rng);
    while (std::abs(v) < min_abs);
  }
  return t;
}

struct GradCheck {
  std::size_t checked = 0;     // coordinates with |g| above the floor
  std::size_t failures = 0;
  std::size_t nonsmooth = 0;   // stencil straddles a ReLU kink; FD is no oracle there
  double worst = 0.0;          // largest relative error seen
};

/// Central difference at h, or nullopt when the h and h/2 stencils disagree by more than tol/2
/// relative to g, which for piecewise-smooth networks means a kink lies inside [x-h, x+h].
template <class F>
std::optional<double> smooth_fd(F&& f, double x, double g, double h, double tol) {
  const double d1 = (f(x + h) - f(x - h)) / (2 * h);
  const double d2 = (f(x + h / 2) - f(x - h / 2)) / h;
  if (std::abs(d1 - d2) > 0.5 * tol * std::max(std::abs(g), 1e-12)) return std::nullopt;
  return d1;
}

/// Compares reverse-mode gradients of sum(out * R) with central differences over every input
/// coordinate. Coordinates with |g| <= floor are skipped.
inline GradCheck gradcheck(const std::vector<Td>& inputs, const BuildFn& build, std::uint64_t seed = 1, double h = 1e-3,
                           double tol = 1e-2, double floor = 1e-4) {
  std::mt19937_64 rng(seed);
  Td weights;
  auto objective = [&](const std::vector<Td>& xs, std::vector<Td>* grads) {
    cfw::ad::Tape<double> tape;
    std::vector<Vd> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    auto out = build(tape, vars);
    if (weights.data.empty()) weights = random_tensor(out.shape(), rng);
    auto scalar = cfw::ad::sum(cfw::ad::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(scalar);
      for (auto v : vars) grads->push_back(tape.grad(v));
    }
    return scalar.value()[0];
  };
  std::vector<Td> grads;
  objective(inputs, &grads);
  GradCheck r;
  auto xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double g = grads[k][i];
      if (std::abs(g) <= floor) continue;
      const double orig = xs[k][i];
      auto at = [&](double v) {
        xs[k][i] = v;
        return objective(xs, nullptr);
      };
      auto fd_opt = smooth_fd(at, orig, g, h, tol);
      xs[k][i] = orig;
      if (!fd_opt) {
        ++r.nonsmooth;
        continue;
      }
      const double fd = *fd_opt;
      ++r.checked;
      const double rel = std::abs(g - fd) / std::abs(g);
      r.worst = std::max(r.worst, rel);
      if (rel > tol) ++r.failures;
    }
  }
  return r;
}

}  // namespace testsupport
