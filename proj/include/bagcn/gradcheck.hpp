#pragma once

#include "bagcn/init.hpp"
#include "bagcn/tape.hpp"

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace bagcn {

/// One checkable computation: `loss` rebuilds the forward pass from the
/// current parameter values on a fresh tape; `storage` keeps whatever the
/// closure captured alive.
struct GradCheckCase {
  std::string name;
  std::vector<Parameter*> params;
  std::function<Var(Tape&)> loss;
  std::shared_ptr<void> storage;
};

struct GradCheckReport {
  std::string name;
  Index probes = 0;
  Scalar max_rel_err = 0.0;
  std::string worst_param;
  bool pass = false;
};

/// Central finite differences against the taped gradient on a random probe
/// subset (at least min_probes entries when available). The relative error is
/// |fd - tape| / max(|fd|, |tape|, 1e-4); the floor keeps finite-difference
/// cancellation noise on near-zero gradients from registering as error.
GradCheckReport check_gradients(const GradCheckCase& c, Scalar h, Scalar tolerance,
                                Index min_probes, Rng& rng);

/// The per-layer-type battery at tiny sizes: graph conv with mask, temporal
/// conv, batch norm, focusing (att/avg/max), LSTM cell, bi-CAM, diffusion,
/// classifier, and a full block.
std::vector<GradCheckCase> standard_gradcheck_cases(uint64_t seed);

/// Runs the battery, prints a per-layer table plus an h-sweep for the worst
/// layer; returns 0 on pass, 2 on any failure.
int run_gradcheck(std::ostream& out, uint64_t seed, Scalar tolerance = 1e-4,
                  Scalar h = 1e-6, Index min_probes = 200);

}  // namespace bagcn
