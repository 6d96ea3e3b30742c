#include "bsim/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace bsim {

namespace {

double eval_scalar(const Objective& f, const std::vector<std::pair<std::string, Tensor>>& params) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& [name, tensor] : params) leaves.push_back(tape.constant(tensor));
    return f(tape, leaves).value().item();
}

}  // namespace

GradReport grad_check(const Objective& objective,
                      const std::vector<std::pair<std::string, Tensor>>& params,
                      double eps) {
    if (!(eps > 1e-8 && eps < 1e-3))
        throw ValidationError("grad_check: eps must lie in (1e-8, 1e-3)");

    // reverse-mode gradients
    std::vector<Tensor> autodiff_grads;
    {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& [name, tensor] : params) leaves.push_back(tape.leaf(tensor, true));
        Var root = objective(tape, leaves);
        tape.backward(root);
        for (const Var& leaf : leaves) autodiff_grads.push_back(leaf.grad());
    }

    const double f0 = eval_scalar(objective, params);

    GradReport report;
    report.epsilon = eps;
    std::vector<std::pair<std::string, Tensor>> probe = params;
    for (size_t b = 0; b < params.size(); ++b) {
        GradBlockReport block;
        block.name = params[b].first;
        Tensor& p = probe[b].second;
        for (int64_t i = 0; i < p.size(); ++i) {
            const double saved = p[i];
            p[i] = saved + eps;
            const double fp = eval_scalar(objective, probe);
            p[i] = saved - eps;
            const double fm = eval_scalar(objective, probe);
            p[i] = saved;

            const double central = (fp - fm) / (2.0 * eps);
            const double slope_jump = std::abs(fp - 2.0 * f0 + fm) / (2.0 * eps);
            if (slope_jump > 1e-2 * std::max(1.0, std::abs(central))) {
                ++block.kink_coords;
                continue;
            }
            const double g = autodiff_grads[b][i];
            const double denom = std::max({std::abs(g), std::abs(central), 1e-8});
            const double rel = std::abs(g - central) / denom;
            if (rel > block.max_rel_err) {
                block.max_rel_err = rel;
                block.worst_coord = i;
            }
        }
        report.kink_coords += block.kink_coords;
        report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
        report.blocks.push_back(std::move(block));
    }
    return report;
}

}  // namespace bsim
