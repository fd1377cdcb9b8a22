#pragma once

#include <algorithm>
#include <vector>

#include "mfuse/penalty.hpp"

namespace testing {

using namespace mfuse;

// Coarse-to-fine grid search over the box between 0 and zeta (every minimizer
// lies there: clamping a coordinate into it lowers both terms).
inline double grid_minimum(const VectorXd& zeta, const PenaltyConfig& c, int points) {
    const Index q = zeta.size();
    VectorXd lo(q), hi(q);
    for (Index r = 0; r < q; ++r) {
        lo[r] = std::min(0.0, zeta[r]);
        hi[r] = std::max(0.0, zeta[r]);
    }
    VectorXd best = VectorXd::Zero(q);
    double best_value = prox_objective(best, zeta, c);
    for (int level = 0; level < 3; ++level) {
        VectorXd step = (hi - lo) / (points - 1);
        VectorXd g(q);
        std::vector<int> idx(static_cast<std::size_t>(q), 0);
        for (;;) {
            for (Index r = 0; r < q; ++r) g[r] = lo[r] + step[r] * idx[static_cast<std::size_t>(r)];
            const double v = prox_objective(g, zeta, c);
            if (v < best_value) {
                best_value = v;
                best = g;
            }
            Index r = 0;
            while (r < q && ++idx[static_cast<std::size_t>(r)] == points) idx[static_cast<std::size_t>(r++)] = 0;
            if (r == q) break;
        }
        for (Index r = 0; r < q; ++r) {
            const double a = std::min(0.0, zeta[r]), b = std::max(0.0, zeta[r]);
            lo[r] = std::max(a, best[r] - 2 * step[r]);
            hi[r] = std::min(b, best[r] + 2 * step[r]);
        }
    }
    return best_value;
}

}  // namespace testing
