#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bsim/graph.hpp"

namespace bsim {

struct GradBlockReport {
    std::string name;
    double max_rel_err = 0.0;
    int64_t worst_coord = -1;
    int64_t kink_coords = 0;   // coordinates excluded as kink-adjacent
};

struct GradReport {
    double epsilon = 0.0;
    double max_rel_err = 0.0;  // over all non-excluded coordinates
    int64_t kink_coords = 0;
    std::vector<GradBlockReport> blocks;

    bool all_below(double tol) const { return max_rel_err < tol; }
};

/// Objective builds a scalar node from parameter leaves (one Var per block,
/// in the order the blocks were given). It must be deterministic in the
/// parameter values; any randomness has to be frozen into the closure.
using Objective = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients against central differences
/// (f(p+eps*e) - f(p-eps*e)) / (2 eps) coordinate by coordinate.
/// Relative error uses denominator max(|g|, |g_fd|, 1e-8).
///
/// A coordinate is excluded (and counted in kink_coords) when the one-sided
/// slopes disagree, i.e. |f+ - 2 f0 + f-| / (2 eps) exceeds
/// 1e-2 * max(1, |central|): central differences are meaningless across a
/// kink such as relu at exactly 0.
///
/// eps must lie in (1e-8, 1e-3).
GradReport grad_check(const Objective& objective,
                      const std::vector<std::pair<std::string, Tensor>>& params,
                      double eps = 1e-5);

}  // namespace bsim
