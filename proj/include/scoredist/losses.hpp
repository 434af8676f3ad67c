#pragma once

// The score-distillation gradient family over rendered images:
//
//   sds       omega(t) * (cfg(eps_cond, eps_uncond) - eps)   stochastic noising
//   dif_only  omega(t) * (eps_cond - eps)                    difference term alone
//   cfg_only  omega(t) * lambda * (eps_cond - eps_uncond)    guidance term alone
//   csm       cfg_only evaluated at the DDIM-inverted latent (deterministic)
//   vpcsm     csm with visual-prompt conditioning plus a perturbed-attention
//             guidance term from a third backend evaluation
//
// All modes emit gradients in noise-prediction scale; the x0-space forms
// divided by sqrt(SNR) are used only as reporting terms and by the
// independent consistency oracle. No derivative propagates through the
// backend; pushing the gradient through the renderer is the caller's job.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "scoredist/denoiser.hpp"
#include "scoredist/guidance.hpp"
#include "scoredist/inversion.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

enum class LossMode { Sds, CfgOnly, DifOnly, Csm, Vpcsm };

inline LossMode loss_mode_from_string(const std::string& s) {
    if (s == "sds") return LossMode::Sds;
    if (s == "cfg_only") return LossMode::CfgOnly;
    if (s == "dif_only") return LossMode::DifOnly;
    if (s == "csm") return LossMode::Csm;
    if (s == "vpcsm") return LossMode::Vpcsm;
    throw std::invalid_argument("unknown loss mode: " + s);
}

inline std::string to_string(LossMode m) {
    switch (m) {
        case LossMode::Sds: return "sds";
        case LossMode::CfgOnly: return "cfg_only";
        case LossMode::DifOnly: return "dif_only";
        case LossMode::Csm: return "csm";
        case LossMode::Vpcsm: return "vpcsm";
    }
    return "?";
}

enum class OmegaWeighting { One, OneMinusAlphaBar };

inline OmegaWeighting omega_from_string(const std::string& s) {
    if (s == "one") return OmegaWeighting::One;
    if (s == "one_minus_alpha_bar") return OmegaWeighting::OneMinusAlphaBar;
    throw std::invalid_argument("unknown omega weighting: " + s);
}

inline std::string to_string(OmegaWeighting w) {
    return w == OmegaWeighting::One ? "one" : "one_minus_alpha_bar";
}

inline double omega(OmegaWeighting w, int t, const DiffusionSchedule& schedule) {
    return w == OmegaWeighting::One ? 1.0 : 1.0 - schedule.alpha_bar(t);
}

struct LossConfig {
    LossMode mode = LossMode::Sds;
    OmegaWeighting weighting = OmegaWeighting::One;
    GuidanceConfig guidance;
    int delta_t = 50;  // inversion interval for csm/vpcsm

    void validate() const {
        guidance.validate();
        if ((mode == LossMode::Csm || mode == LossMode::Vpcsm) && delta_t < 1) {
            throw std::invalid_argument("inversion-based losses require delta_t >= 1");
        }
    }
};

// Gradient in the rendered-image shape plus named diagnostic norms. The
// delta terms are reported in x0 space, the pag term in noise space.
struct GradientReport {
    Tensor grad;
    std::map<std::string, double> terms;
    int t_used = 0;
    LossMode mode = LossMode::Sds;

    // Tweedie snapshots from the bundle that produced the gradient
    Tensor x0_cond;
    Tensor x0_uncond;
};

namespace detail {

inline void record_delta_terms(GradientReport& report, const PredictionBundle& bundle,
                               const Tensor& x0) {
    report.terms["delta_dif"] = norm(bundle.delta_dif(x0));
    report.terms["delta_cfg"] = norm(bundle.delta_cfg());
    report.x0_cond = bundle.x0_cond;
    report.x0_uncond = bundle.x0_uncond;
}

inline void check_finite(const GradientReport& report) {
    if (!report.grad.all_finite()) {
        throw std::runtime_error("loss gradient is non-finite at t=" +
                                 std::to_string(report.t_used));
    }
}

}  // namespace detail

// Stochastic-noising gradient: eps must be drawn fresh per call by the
// caller (seeded in the harness).
inline GradientReport sds_gradient(const Tensor& x0, int t, const ConditionSet& conditions,
                                   const Tensor& eps, const Denoiser& backend,
                                   const LossConfig& cfg, const DiffusionSchedule& schedule) {
    cfg.validate();
    const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);
    const PredictionBundle bundle = make_bundle(xt, conditions, backend, schedule);
    const double w = omega(cfg.weighting, t, schedule);

    GradientReport report;
    report.mode = LossMode::Sds;
    report.t_used = t;
    report.grad = apply_cfg(bundle, cfg.guidance);
    report.grad -= eps;
    report.grad *= w;
    detail::record_delta_terms(report, bundle, x0);
    detail::check_finite(report);
    return report;
}

// The two halves of the stochastic gradient, on the same noise-space scale,
// so that sds == dif_only + cfg_only at matched (eps, t).
inline GradientReport decomposed_gradient(const Tensor& x0, int t, const ConditionSet& conditions,
                                          const Tensor& eps, const Denoiser& backend,
                                          const LossConfig& cfg,
                                          const DiffusionSchedule& schedule) {
    cfg.validate();
    if (cfg.mode != LossMode::CfgOnly && cfg.mode != LossMode::DifOnly) {
        throw std::invalid_argument("decomposed_gradient: mode must be cfg_only or dif_only");
    }
    const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);
    const PredictionBundle bundle = make_bundle(xt, conditions, backend, schedule);
    const double w = omega(cfg.weighting, t, schedule);

    GradientReport report;
    report.mode = cfg.mode;
    report.t_used = t;
    report.grad = Tensor::zeros_like(x0);
    if (cfg.mode == LossMode::DifOnly) {
        for (std::size_t i = 0; i < report.grad.size(); ++i) {
            report.grad[i] = w * (bundle.eps_cond[i] - eps[i]);
        }
    } else {
        const double l = cfg.guidance.cfg_scale;
        for (std::size_t i = 0; i < report.grad.size(); ++i) {
            report.grad[i] = w * l * (bundle.eps_cond[i] - bundle.eps_uncond[i]);
        }
    }
    detail::record_delta_terms(report, bundle, x0);
    detail::check_finite(report);
    return report;
}

// Classifier score matching: deterministic DDIM inversion to t, then the
// guidance term alone. A pure function of (x0, t, backend).
inline GradientReport csm_gradient(const Tensor& x0, int t, const ConditionSet& conditions,
                                   const Denoiser& backend, const LossConfig& cfg,
                                   const DiffusionSchedule& schedule) {
    cfg.validate();
    const InversionPlan plan = plan_inversion(t, cfg.delta_t, schedule);
    const NoisyLatent x_inv =
        invert(NoisyLatent(x0, 0), plan,
               unconditional_predictor(backend, conditions.fusion_scale), schedule);
    const PredictionBundle bundle = make_bundle(x_inv, conditions, backend, schedule);
    const double w = omega(cfg.weighting, t, schedule);
    const double l = cfg.guidance.cfg_scale;

    GradientReport report;
    report.mode = LossMode::Csm;
    report.t_used = t;
    report.grad = Tensor::zeros_like(x0);
    for (std::size_t i = 0; i < report.grad.size(); ++i) {
        report.grad[i] = w * l * (bundle.eps_cond[i] - bundle.eps_uncond[i]);
    }
    detail::record_delta_terms(report, bundle, x0);
    detail::check_finite(report);
    return report;
}

// Visual-prompt CSM: the guidance term with (text, visual) conditioning
// against the fully nulled pair, plus a perturbed-attention term, all three
// predictions sharing one inverted latent. With pag_scale = 0 the perturbed
// evaluation is skipped and the computation path equals csm_gradient exactly.
inline GradientReport vpcsm_gradient(const Tensor& x0, int t, const ConditionSet& conditions,
                                     const Denoiser& backend, const LossConfig& cfg,
                                     const DiffusionSchedule& schedule) {
    cfg.validate();
    const double s = cfg.guidance.pag_scale;
    if (s > 0.0 && !backend.capabilities().supports_perturbed_attention) {
        throw std::invalid_argument("vpcsm: pag_scale > 0 needs a perturbation-capable backend");
    }
    const InversionPlan plan = plan_inversion(t, cfg.delta_t, schedule);
    const NoisyLatent x_inv =
        invert(NoisyLatent(x0, 0), plan,
               unconditional_predictor(backend, conditions.fusion_scale), schedule);
    const PredictionBundle bundle =
        make_bundle(x_inv, conditions, backend, schedule, /*need_perturbed=*/s > 0.0);
    const double w = omega(cfg.weighting, t, schedule);
    const double l = cfg.guidance.cfg_scale;

    GradientReport report;
    report.mode = LossMode::Vpcsm;
    report.t_used = t;
    report.grad = Tensor::zeros_like(x0);
    for (std::size_t i = 0; i < report.grad.size(); ++i) {
        report.grad[i] = w * l * (bundle.eps_cond[i] - bundle.eps_uncond[i]);
    }
    detail::record_delta_terms(report, bundle, x0);
    if (s > 0.0) {
        Tensor pag_term = Tensor::zeros_like(x0);
        for (std::size_t i = 0; i < pag_term.size(); ++i) {
            pag_term[i] = s * (bundle.eps_cond[i] - (*bundle.eps_perturbed)[i]);
        }
        report.terms["pag_term"] = norm(pag_term);
        Tensor scaled = pag_term * w;
        report.grad += scaled;
    }
    detail::check_finite(report);
    return report;
}

// Uniform dispatch used by the experiment harness. eps is consulted only by
// the stochastic modes.
inline GradientReport loss_gradient(const Tensor& x0, int t, const ConditionSet& conditions,
                                    const Tensor& eps, const Denoiser& backend,
                                    const LossConfig& cfg, const DiffusionSchedule& schedule) {
    switch (cfg.mode) {
        case LossMode::Sds:
            return sds_gradient(x0, t, conditions, eps, backend, cfg, schedule);
        case LossMode::CfgOnly:
        case LossMode::DifOnly:
            return decomposed_gradient(x0, t, conditions, eps, backend, cfg, schedule);
        case LossMode::Csm:
            return csm_gradient(x0, t, conditions, backend, cfg, schedule);
        case LossMode::Vpcsm:
            return vpcsm_gradient(x0, t, conditions, backend, cfg, schedule);
    }
    throw std::logic_error("loss_gradient: unreachable");
}

}  // namespace scoredist
