#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lgms/autograd.hpp"

namespace lgms::ad {

struct OpCheck {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Finite-difference verification of every differentiable operation against
// its backward rule: small float64 fixtures (extents <= 8), one line per op,
// worst relative error across the given seeds.
std::vector<OpCheck> gradcheck_battery(std::span<const std::uint64_t> seeds, double step,
                                       double tol);

inline std::vector<std::uint64_t> default_gradcheck_seeds() { return {11, 23, 47}; }

}  // namespace lgms::ad
