#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "ravqa/autodiff.hpp"

namespace ravqa {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;  // number of scalar entries compared
};

using LossBuilder = std::function<Var(Graph&)>;

// Compares reverse-mode gradients against central differences for every
// non-frozen parameter (optionally restricted to names with one of `prefixes`).
// Relative error is |analytic - numeric| / max(1e-6, |analytic|, |numeric|). Below the floor
// the central-difference truncation error (about 1e-11 at step 1e-5) dominates.
inline GradCheckResult grad_check(const LossBuilder& fn, ParamStore& params, double step = 1e-5,
                                  const std::vector<std::string>& prefixes = {}) {
    auto eval = [&]() {
        Graph g(false);
        return fn(g).value()[0];
    };

    params.zero_grad();
    double base = 0.0;
    {
        Graph g(true);
        Var loss = fn(g);
        base = loss.value()[0];
        g.backward(loss);
    }
    const double again = eval();
    if (std::memcmp(&base, &again, sizeof(double)) != 0) {
        throw DeterminismError("loss function is not deterministic: " + std::to_string(base) + " vs " +
                               std::to_string(again));
    }

    auto selected = [&](const std::string& name) {
        if (prefixes.empty()) return true;
        for (const auto& p : prefixes) {
            if (name.compare(0, p.size(), p) == 0) return true;
        }
        return false;
    };

    GradCheckResult res;
    for (auto& [name, p] : params) {
        if (p.frozen || !selected(name)) {
            continue;
        }
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + step;
            const double fp = eval();
            p.value[i] = orig - step;
            const double fm = eval();
            p.value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = p.grad[i];
            const double rel = std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
            ++res.checked;
            if (res.checked == 1 || rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
                res.worst_index = i;
                res.worst_analytic = analytic;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace ravqa
