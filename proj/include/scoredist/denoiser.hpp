#pragma once

// The denoiser abstraction: conditional noise prediction behind a uniform
// interface, so losses and inversion run unchanged against the trainable toy
// network, the closed-form mixture denoiser, or an external adapter.

#include <memory>
#include <stdexcept>
#include <string>

#include "scoredist/conditioning.hpp"
#include "scoredist/guidance.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct DenoiserCapabilities {
    bool supports_visual_condition = false;
    bool supports_perturbed_attention = false;
    bool concurrent_queries = true;
    std::vector<std::size_t> latent_shape;
    int horizon = 0;
};

struct DenoiserQuery {
    Tensor x;
    int t = 0;
    ConditionSet conditions;
    bool perturb_attention = false;
};

class Denoiser {
public:
    virtual ~Denoiser() = default;

    // Same-shape noise prediction; must be deterministic for fixed weights.
    virtual Tensor predict(const DenoiserQuery& query) const = 0;

    virtual DenoiserCapabilities capabilities() const = 0;

    virtual std::string id() const = 0;
};

// Capability-checked prediction entry point.
inline Tensor predict(const DenoiserQuery& query, const Denoiser& backend) {
    const DenoiserCapabilities caps = backend.capabilities();
    if (query.x.shape() != caps.latent_shape) {
        throw std::invalid_argument("predict: query shape " + shape_to_string(query.x.shape()) +
                                    " does not match backend latent shape " +
                                    shape_to_string(caps.latent_shape));
    }
    if (query.t < 0 || query.t > caps.horizon) {
        throw std::out_of_range("predict: timestep outside [0, T]");
    }
    if (query.perturb_attention && !caps.supports_perturbed_attention) {
        throw std::invalid_argument("predict: backend has no perturbed-attention hook");
    }
    if (query.conditions.visual && !caps.supports_visual_condition) {
        throw std::invalid_argument("predict: backend does not accept visual conditions");
    }
    query.conditions.validate();
    Tensor out = backend.predict(query);
    if (out.shape() != query.x.shape()) {
        throw std::runtime_error("predict: backend returned mismatched shape");
    }
    return out;
}

// Evaluates the conditional, unconditional and (optionally) perturbed
// predictions at one latent and derives the Tweedie x0 estimates from them.
// The unconditional branch nulls both condition slots.
inline PredictionBundle make_bundle(const NoisyLatent& xt, const ConditionSet& conditions,
                                    const Denoiser& backend, const DiffusionSchedule& schedule,
                                    bool need_perturbed = false) {
    DenoiserQuery q_cond{xt.data, xt.t, conditions, false};
    DenoiserQuery q_uncond{xt.data, xt.t, conditions.nulled(), false};
    PredictionBundle bundle;
    bundle.eps_cond = predict(q_cond, backend);
    bundle.eps_uncond = predict(q_uncond, backend);
    if (need_perturbed) {
        DenoiserQuery q_pert{xt.data, xt.t, conditions, true};
        bundle.eps_perturbed = predict(q_pert, backend);
    }
    bundle.x0_cond = tweedie_x0(xt, bundle.eps_cond, schedule);
    bundle.x0_uncond = tweedie_x0(xt, bundle.eps_uncond, schedule);
    return bundle;
}

}  // namespace scoredist
