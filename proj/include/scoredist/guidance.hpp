#pragma once

// Classifier-free guidance and perturbed-attention guidance
// (https://arxiv.org/abs/2403.17377) over denoiser predictions.

#include <cmath>
#include <optional>
#include <stdexcept>

#include "scoredist/tensor.hpp"

namespace scoredist {

struct GuidanceConfig {
    double cfg_scale = 7.5;  // lambda
    double pag_scale = 1.0;  // s

    void validate() const {
        if (!std::isfinite(cfg_scale) || cfg_scale < 0.0) {
            throw std::invalid_argument("cfg_scale must be finite and >= 0");
        }
        if (!std::isfinite(pag_scale) || pag_scale < 0.0) {
            throw std::invalid_argument("pag_scale must be finite and >= 0");
        }
    }
};

// Conditional/unconditional predictions for one latent plus the x0 estimates
// they imply. Constructed via make_bundle (denoiser.hpp) so the x0 fields are
// always the Tweedie images of the stored predictions.
struct PredictionBundle {
    Tensor eps_cond;
    Tensor eps_uncond;
    std::optional<Tensor> eps_perturbed;
    Tensor x0_cond;
    Tensor x0_uncond;

    // x0-space guidance term: x0_uncond - x0_cond
    Tensor delta_cfg() const { return x0_uncond - x0_cond; }
    // x0-space difference term against a clean image: x0 - x0_cond
    Tensor delta_dif(const Tensor& x0) const { return x0 - x0_cond; }
};

// (1 + lambda) eps_cond - lambda eps_uncond
inline Tensor apply_cfg(const PredictionBundle& bundle, const GuidanceConfig& cfg) {
    cfg.validate();
    if (!bundle.eps_cond.same_shape(bundle.eps_uncond)) {
        throw std::invalid_argument("apply_cfg: prediction shape mismatch");
    }
    const double l = cfg.cfg_scale;
    Tensor out = Tensor::zeros_like(bundle.eps_cond);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (1.0 + l) * bundle.eps_cond[i] - l * bundle.eps_uncond[i];
    }
    return out;
}

// eps_cond + s (eps_cond - eps_perturbed); s = 0 returns eps_cond even when
// no perturbed prediction is present.
inline Tensor apply_pag(const PredictionBundle& bundle, const GuidanceConfig& cfg) {
    cfg.validate();
    const double s = cfg.pag_scale;
    if (s == 0.0) return bundle.eps_cond;
    if (!bundle.eps_perturbed) {
        throw std::invalid_argument("apply_pag: pag_scale > 0 requires a perturbed prediction");
    }
    if (!bundle.eps_cond.same_shape(*bundle.eps_perturbed)) {
        throw std::invalid_argument("apply_pag: prediction shape mismatch");
    }
    Tensor out = Tensor::zeros_like(bundle.eps_cond);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = bundle.eps_cond[i] + s * (bundle.eps_cond[i] - (*bundle.eps_perturbed)[i]);
    }
    return out;
}

// Perturbed self-attention: the attention map is replaced by the identity, so
// the output is the value matrix. Q and K are consulted only for shape checks.
inline Tensor perturb_self_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw std::invalid_argument("perturb_self_attention: rank-2 tensors required");
    }
    if (q.shape()[0] != v.shape()[0] || k.shape()[0] != v.shape()[0]) {
        throw std::invalid_argument("perturb_self_attention: row count mismatch");
    }
    return v;
}

// Plain softmax self-attention, the unperturbed counterpart.
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t head_dim) {
    if (head_dim == 0) throw std::invalid_argument("self_attention: head_dim must be > 0");
    Tensor scores = matmul_bt(q, k);
    scores *= 1.0 / std::sqrt(double(head_dim));
    return matmul(softmax_rows(scores), v);
}

}  // namespace scoredist
