#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "promoe/tape.hpp"

namespace promoe {

struct GradcheckResult {
  std::string name;
  /// Worst per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||).
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 0.0;
  bool pass() const { return max_rel_error < tolerance; }
};

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Central differences with step h on every coordinate of every input.
GradcheckResult check_gradients(const std::string& name, const std::vector<Array<double>>& inputs,
                                const LossBuilder& loss, double tol = 1e-4, double h = 1e-5);

/// Same check for parameters that the loss reads through Tape::leaf.
GradcheckResult check_parameter_gradients(const std::string& name, const std::vector<Parameter<double>*>& params,
                                          const std::function<Var<double>(Tape<double>&)>& loss, double tol = 1e-4,
                                          double h = 1e-5);

/// Every differentiable op, the losses, and composed layers. Scope "ops"
/// skips the composed layer and model checks; "full" runs everything.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, const std::string& scope = "full");

}  // namespace promoe
