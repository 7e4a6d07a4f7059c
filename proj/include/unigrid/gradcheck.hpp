#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unigrid/graph.hpp"
#include "unigrid/tensor.hpp"

namespace unigrid {

// `build` assembles a scalar loss from the leaf holding `point` on the given
// graph. The analytic gradient comes from the tape; the reference comes from
// central differences, so the two paths are independent.
double finite_diff_check(const std::function<GraphD::Var(GraphD&, GraphD::Var)>& build,
                         const TensorD& point, double eps = 1e-5);

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool passed() const { return max_rel_err < tolerance; }
};

// Central-difference suite over every tensor op (random small shapes) plus
// the model forwards and the straight-through Gumbel-Softmax path, all in
// 64-bit mode. `instances` is the number of random probes per op.
std::vector<GradCheckResult> run_gradcheck_suite(uint64_t seed, int instances = 50);

}  // namespace unigrid
