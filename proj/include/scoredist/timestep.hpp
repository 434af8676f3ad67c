#pragma once

// Annealed sliding window over timesteps. During a warmup of W steps both
// window bounds decrease linearly from the upper range to the lower range;
// afterwards draws come from the lower range only.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "scoredist/schedule.hpp"

namespace scoredist {

struct TimestepWindow {
    double t_min_up = 0.22;
    double t_max_up = 0.98;
    double t_min_low = 0.02;
    double t_max_low = 0.78;
    int warmup_steps = 1;
    int total_steps = 1;

    void validate() const {
        auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
        if (!in01(t_min_up) || !in01(t_max_up) || !in01(t_min_low) || !in01(t_max_low)) {
            throw std::invalid_argument("window bounds must lie in (0,1)");
        }
        if (!(t_min_up < t_max_up) || !(t_min_low < t_max_low)) {
            throw std::invalid_argument("window requires t_min < t_max");
        }
        if (t_min_low > t_min_up || t_max_low > t_max_up) {
            throw std::invalid_argument("lower window must not exceed upper window");
        }
        if (warmup_steps < 1 || total_steps < 1) {
            throw std::invalid_argument("window step counts must be positive");
        }
    }

    // warmup = ceil(total / denom); the default denom of 3 gives W_{1/3}
    static TimestepWindow with_warmup_fraction(int total_steps, double fraction) {
        if (total_steps < 1) throw std::invalid_argument("total_steps must be positive");
        if (!(fraction > 0.0 && fraction <= 1.0)) {
            throw std::invalid_argument("warmup fraction must lie in (0,1]");
        }
        TimestepWindow w;
        w.total_steps = total_steps;
        w.warmup_steps = std::max(1, static_cast<int>(std::ceil(total_steps * fraction)));
        return w;
    }

    // constant window [lo, hi] for runs without annealing
    static TimestepWindow constant(double lo, double hi, int total_steps) {
        TimestepWindow w;
        w.t_min_up = w.t_min_low = lo;
        w.t_max_up = w.t_max_low = hi;
        w.total_steps = total_steps;
        w.warmup_steps = 1;
        w.validate();
        return w;
    }
};

// Active bounds at a given optimization step. Linear interpolation of both
// bounds during warmup, the lower window exactly from step W on.
inline std::pair<double, double> window_at(int step, const TimestepWindow& w) {
    w.validate();
    if (step < 0 || step > w.total_steps) throw std::out_of_range("window_at: step out of range");
    if (step >= w.warmup_steps) return {w.t_min_low, w.t_max_low};
    const double f = double(step) / double(w.warmup_steps);
    return {w.t_min_up + f * (w.t_min_low - w.t_min_up),
            w.t_max_up + f * (w.t_max_low - w.t_max_up)};
}

// Draw an integer timestep: u ~ U(window_at(step)), t = round(u * T), clamped
// to [1, T].
template <typename Rng>
int sample_t(int step, const TimestepWindow& w, Rng& rng, const DiffusionSchedule& schedule) {
    const auto [lo, hi] = window_at(step, w);
    std::uniform_real_distribution<double> dist(lo, hi);
    const double u = dist(rng);
    const int t = static_cast<int>(std::floor(u * schedule.horizon() + 0.5));
    return std::clamp(t, 1, schedule.horizon());
}

}  // namespace scoredist
