#pragma once

// Independent ground-truth machinery for tests and acceptance gates:
//   - the closed-form optimal denoiser of an isotropic Gaussian mixture
//   - a central-difference gradient checker
//   - the two-route consistency check for the guided-noise gradient and its
//     x0-space decomposition into difference and guidance terms
// Everything here runs in double precision and stays independent of the
// production gradient paths it is used to verify.

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "scoredist/denoiser.hpp"
#include "scoredist/guidance.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct MixtureSpec {
    std::vector<Tensor> modes;  // mean vectors, shared shape
    double sigma = 0.05;        // shared isotropic standard deviation
    std::vector<double> weights;

    void validate() const {
        if (modes.empty()) throw std::invalid_argument("mixture needs at least one mode");
        if (weights.size() != modes.size()) {
            throw std::invalid_argument("mixture weights/modes size mismatch");
        }
        double sum = 0.0;
        for (double w : weights) {
            if (!(w > 0.0)) throw std::invalid_argument("mixture weights must be positive");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12) {
            throw std::invalid_argument("mixture weights must sum to 1");
        }
        for (const auto& m : modes) {
            if (!m.same_shape(modes.front())) {
                throw std::invalid_argument("mixture modes must share one shape");
            }
        }
        if (!(sigma > 0.0)) throw std::invalid_argument("mixture sigma must be positive");
    }

    std::size_t dim() const { return modes.front().size(); }

    template <typename Rng>
    std::pair<Tensor, int> draw(Rng& rng) const {
        std::discrete_distribution<int> pick(weights.begin(), weights.end());
        const int k = pick(rng);
        Tensor x = modes[static_cast<std::size_t>(k)];
        std::normal_distribution<double> n(0.0, sigma);
        for (auto& v : x) v += n(rng);
        return {std::move(x), k};
    }
};

// Four modes at (+-1, +-1) with sigma 0.05, the standard desk-scale dataset.
// Mode order: (1,1), (-1,1), (-1,-1), (1,-1).
inline MixtureSpec standard_mixture2d() {
    MixtureSpec m;
    m.modes = {Tensor({2}, {1.0, 1.0}), Tensor({2}, {-1.0, 1.0}), Tensor({2}, {-1.0, -1.0}),
               Tensor({2}, {1.0, -1.0})};
    m.sigma = 0.05;
    m.weights = {0.25, 0.25, 0.25, 0.25};
    return m;
}

// Exact noise prediction implied by the mixture posterior mean under the
// forward process x_t = sqrt(ab) x0 + sqrt(1-ab) eps. Per component k,
//   eps_k(x) = (x - sqrt(ab) mu_k) * sqrt(1-ab) / (ab sigma^2 + 1 - ab)
// and the full prediction is the responsibility-weighted sum. The form above
// is finite for every t including t = 0, where it vanishes.
// An optional component restriction gives the class-conditional denoiser.
inline Tensor optimal_denoiser(const Tensor& x, int t, const MixtureSpec& mixture,
                               const DiffusionSchedule& schedule,
                               std::optional<int> component = std::nullopt) {
    mixture.validate();
    if (x.size() != mixture.dim()) throw std::invalid_argument("optimal_denoiser: dim mismatch");
    const double ab = schedule.alpha_bar(t);
    const double var = ab * mixture.sigma * mixture.sigma + (1.0 - ab);
    const double sqrt_ab = std::sqrt(ab);
    const double coeff = std::sqrt(1.0 - ab) / var;

    const std::size_t n_modes = mixture.modes.size();
    std::vector<double> resp(n_modes, 0.0);
    if (component) {
        const std::size_t k = static_cast<std::size_t>(*component);
        if (k >= n_modes) throw std::invalid_argument("optimal_denoiser: bad component");
        resp[k] = 1.0;
    } else {
        // log-sum-exp over component likelihoods
        std::vector<double> logp(n_modes);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n_modes; ++k) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = x[i] - sqrt_ab * mixture.modes[k][i];
                d2 += d * d;
            }
            logp[k] = std::log(mixture.weights[k]) - 0.5 * d2 / var;
            mx = std::max(mx, logp[k]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < n_modes; ++k) z += std::exp(logp[k] - mx);
        for (std::size_t k = 0; k < n_modes; ++k) resp[k] = std::exp(logp[k] - mx) / z;
    }

    Tensor out = Tensor::zeros_like(x);
    for (std::size_t k = 0; k < n_modes; ++k) {
        if (resp[k] == 0.0) continue;
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] += resp[k] * coeff * (x[i] - sqrt_ab * mixture.modes[k][i]);
        }
    }
    return out;
}

// The mixture oracle behind the Denoiser interface. Text label k selects the
// class-conditional component; the null condition uses the full mixture.
class OptimalMixtureDenoiser : public Denoiser {
public:
    OptimalMixtureDenoiser(MixtureSpec mixture, DiffusionSchedule schedule)
        : mixture_(std::move(mixture)), schedule_(std::move(schedule)) {
        mixture_.validate();
    }

    Tensor predict(const DenoiserQuery& query) const override {
        std::optional<int> component;
        if (query.conditions.text) {
            component = *query.conditions.text;
        }
        return optimal_denoiser(query.x, query.t, mixture_, schedule_, component);
    }

    DenoiserCapabilities capabilities() const override {
        DenoiserCapabilities caps;
        caps.supports_visual_condition = false;
        caps.supports_perturbed_attention = false;
        caps.concurrent_queries = true;
        caps.latent_shape = mixture_.modes.front().shape();
        caps.horizon = schedule_.horizon();
        return caps;
    }

    std::string id() const override { return "optimal-mixture"; }

    const MixtureSpec& mixture() const { return mixture_; }

private:
    MixtureSpec mixture_;
    DiffusionSchedule schedule_;
};

// Central-difference gradient of a scalar function.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& fn,
                                     const Tensor& x, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be positive");
    Tensor grad = Tensor::zeros_like(x);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double fp = fn(probe);
        probe[i] = x[i] - h;
        const double fm = fn(probe);
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_difference_grad: non-finite evaluation");
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

struct DecompositionReport {
    int trials = 0;
    double max_rel_deviation = 0.0;
};

// Two independent routes to the guided noise residual:
//   route A: ((1+lambda) eps_cond - lambda eps_uncond) - eps
//   route B: sqrt(SNR(t)) * ((x0 - x0_cond) + lambda (x0_uncond - x0_cond))
// where route B derives every term through Tweedie estimates, with
// x0 = (x_t - sqrt(1-ab) eps) / sqrt(ab). Algebraically identical; the report
// carries the worst relative deviation observed over random draws.
inline DecompositionReport check_sds_decomposition(const Tensor& x0, int t,
                                                   const Denoiser& backend,
                                                   const DiffusionSchedule& schedule, int trials,
                                                   const GuidanceConfig& guidance,
                                                   const ConditionSet& conditions,
                                                   uint64_t seed = 1234) {
    if (trials < 1) throw std::invalid_argument("check_sds_decomposition: trials >= 1");
    std::mt19937_64 rng(seed);
    DecompositionReport report;
    report.trials = trials;
    const double lambda = guidance.cfg_scale;
    for (int trial = 0; trial < trials; ++trial) {
        const Tensor eps = random_normal<double>(x0.shape(), rng);
        const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);
        const PredictionBundle bundle = make_bundle(xt, conditions, backend, schedule);

        Tensor route_a = apply_cfg(bundle, guidance);
        route_a -= eps;

        const Tensor x0_back = tweedie_x0(xt, eps, schedule);
        Tensor combo = bundle.delta_dif(x0_back);
        axpy(lambda, bundle.delta_cfg(), combo);
        Tensor route_b = combo * std::sqrt(schedule.snr(t));

        const double denom = std::max(norm(route_a), 1e-300);
        report.max_rel_deviation =
            std::max(report.max_rel_deviation, norm(route_a - route_b) / denom);
    }
    return report;
}

}  // namespace scoredist
