#pragma once

#include "spc/common.hpp"

namespace spc {

// Triangular (cyclic) learning-rate schedule: eta_min at step 0, rising
// linearly to eta_max at total_steps/2, falling back to eta_min at
// total_steps.  One triangle spans the whole training run.
struct CyclicLrSchedule {
    double eta_min = 0.0;
    double eta_max = 0.05;
    long long total_steps = 1;
};

inline double cyclic_lr(const CyclicLrSchedule& s, long long step) {
    if (s.eta_min < 0.0 || !(s.eta_max > s.eta_min))
        throw ConfigError("cyclic_lr: need 0 <= eta_min < eta_max");
    if (s.total_steps <= 0) throw ConfigError("cyclic_lr: total_steps must be positive");
    if (step < 0 || step > s.total_steps)
        throw ConfigError("cyclic_lr: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(s.total_steps) + "]");
    const double half = static_cast<double>(s.total_steps) / 2.0;
    const double t = static_cast<double>(step);
    const double frac = t <= half ? t / half : (static_cast<double>(s.total_steps) - t) / half;
    return s.eta_min + (s.eta_max - s.eta_min) * frac;
}

}  // namespace spc
