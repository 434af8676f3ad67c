#pragma once

// Deterministic multi-step noising by DDIM inversion. A clean sample is
// lifted to a target timestep along a ladder of rungs whose first gap is the
// residual (target mod interval) and whose later gaps equal the interval.
// Each rung applies
//   x_{s_{j+1}} = sqrt(ab_{s_{j+1}}) x0_est(x_{s_j})
//                 + sqrt(1 - ab_{s_{j+1}}) eps(x_{s_j}, s_j, null)
// with the unconditional prediction evaluated at the source rung. The whole
// map is a deterministic function of (x0, denoiser).

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoredist/denoiser.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct InversionError : std::runtime_error {
    int rung_index;
    InversionError(const std::string& what, int rung)
        : std::runtime_error(what + " (rung " + std::to_string(rung) + ")"), rung_index(rung) {}
};

struct InversionPlan {
    int target_t = 0;
    int delta_t = 0;
    int residual = 0;            // first gap, in [1, delta_t]
    int steps = 0;               // rung count k
    std::vector<int> ladder;     // s_1 .. s_k, s_k == target_t

    void validate() const {
        if (steps <= 0 || static_cast<int>(ladder.size()) != steps) {
            throw std::logic_error("inversion plan: inconsistent step count");
        }
        if (residual < 1 || residual > delta_t) {
            throw std::logic_error("inversion plan: residual outside [1, delta_t]");
        }
        if (ladder.front() != residual || ladder.back() != target_t) {
            throw std::logic_error("inversion plan: ladder endpoints wrong");
        }
        for (std::size_t j = 1; j < ladder.size(); ++j) {
            if (ladder[j] - ladder[j - 1] != delta_t) {
                throw std::logic_error("inversion plan: non-uniform interior gap");
            }
        }
    }
};

inline InversionPlan plan_inversion(int target_t, int delta_t, const DiffusionSchedule& schedule) {
    if (target_t < 1 || target_t > schedule.horizon()) {
        throw std::out_of_range("plan_inversion: target_t out of range");
    }
    if (delta_t < 1 || delta_t > schedule.horizon()) {
        throw std::out_of_range("plan_inversion: delta_t out of range");
    }
    InversionPlan plan;
    plan.target_t = target_t;
    plan.delta_t = delta_t;
    const int rem = target_t % delta_t;
    if (rem == 0) {
        plan.steps = target_t / delta_t;
        plan.residual = delta_t;
    } else {
        plan.steps = target_t / delta_t + 1;
        plan.residual = rem;
    }
    plan.ladder.reserve(static_cast<std::size_t>(plan.steps));
    int s = plan.residual;
    for (int j = 0; j < plan.steps; ++j, s += delta_t) plan.ladder.push_back(s);
    plan.validate();
    return plan;
}

// Unconditional noise prediction used by inversion; (tensor, timestep) in,
// same-shape prediction out.
using UnconditionalPredictor = std::function<Tensor(const Tensor&, int)>;

// Per-rung trace row for drift debugging.
struct InversionTraceRow {
    int s = 0;
    double x_norm = 0.0;
    double eps_norm = 0.0;
};

inline NoisyLatent invert(const NoisyLatent& x0, const InversionPlan& plan,
                          const UnconditionalPredictor& denoiser,
                          const DiffusionSchedule& schedule,
                          std::vector<InversionTraceRow>* trace = nullptr) {
    if (x0.t != 0) throw std::invalid_argument("invert: input must be at t=0");
    plan.validate();
    if (plan.target_t > schedule.horizon()) {
        throw std::out_of_range("invert: plan exceeds schedule horizon");
    }
    Tensor x = x0.data;
    int s_prev = 0;
    for (int j = 0; j < plan.steps; ++j) {
        const int s_next = plan.ladder[static_cast<std::size_t>(j)];
        const Tensor eps = denoiser(x, s_prev);
        if (!eps.same_shape(x)) {
            throw InversionError("invert: denoiser output shape mismatch", j);
        }
        const double ab_prev = schedule.alpha_bar(s_prev);
        const double ab_next = schedule.alpha_bar(s_next);
        const double cs_prev = std::sqrt(ab_prev);
        const double cn_prev = std::sqrt(1.0 - ab_prev);
        const double cs_next = std::sqrt(ab_next);
        const double cn_next = std::sqrt(1.0 - ab_next);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double x0_est = (x[i] - cn_prev * eps[i]) / cs_prev;
            x[i] = cs_next * x0_est + cn_next * eps[i];
        }
        if (!x.all_finite()) {
            throw InversionError("invert: non-finite state", j);
        }
        if (trace) trace->push_back({s_next, norm(x), norm(eps)});
        s_prev = s_next;
    }
    return NoisyLatent(std::move(x), plan.target_t);
}

// Adapts a Denoiser to the unconditional predictor used by inversion. The
// null condition is used throughout; a conditional variant exists behind an
// explicit opt-in. Backends whose schedule rejects t = 0 are queried at t = 1.
inline UnconditionalPredictor unconditional_predictor(const Denoiser& backend,
                                                      double fusion_scale = 0.0,
                                                      std::optional<ConditionSet> conditional =
                                                          std::nullopt) {
    ConditionSet cond = conditional ? *conditional : ConditionSet::none();
    if (!conditional) cond.fusion_scale = fusion_scale;
    return [&backend, cond](const Tensor& x, int t) {
        DenoiserQuery q{x, t, cond, false};
        return predict(q, backend);
    };
}

// Deterministic DDIM reverse over the same ladder, from target down to 0.
inline NoisyLatent reverse_over_ladder(const NoisyLatent& xt, const InversionPlan& plan,
                                       const UnconditionalPredictor& denoiser,
                                       const DiffusionSchedule& schedule) {
    if (xt.t != plan.target_t) {
        throw std::invalid_argument("reverse_over_ladder: latent not at plan target");
    }
    NoisyLatent cur = xt;
    for (int j = plan.steps - 1; j >= 0; --j) {
        const int s_prev = (j == 0) ? 0 : plan.ladder[static_cast<std::size_t>(j) - 1];
        const Tensor eps = denoiser(cur.data, cur.t);
        cur = ddim_reverse_step(cur, eps, s_prev, DDIMStepConfig{}, schedule);
    }
    return cur;
}

}  // namespace scoredist
