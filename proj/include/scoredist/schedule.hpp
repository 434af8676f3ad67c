#pragma once

// Discrete diffusion schedule, forward noising, the posterior-mean (Tweedie)
// estimate of the clean sample, and the deterministic DDIM reverse step
// (https://arxiv.org/abs/2010.02502).
//
// Conventions used throughout the library:
//   - timesteps are integers t in [0, T]; t = 0 is clean data
//   - alpha_bar(0) == 1 exactly, so t_prev = 0 is a valid reverse target
//   - schedule arrays are computed and stored in double precision

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoredist/tensor.hpp"

namespace scoredist {

enum class ScheduleFamily { Linear, ScaledLinear, Cosine };

inline ScheduleFamily schedule_family_from_string(const std::string& s) {
    if (s == "linear") return ScheduleFamily::Linear;
    if (s == "scaled-linear" || s == "scaled_linear") return ScheduleFamily::ScaledLinear;
    if (s == "cosine") return ScheduleFamily::Cosine;
    throw std::invalid_argument("unknown schedule family: " + s);
}

inline std::string to_string(ScheduleFamily f) {
    switch (f) {
        case ScheduleFamily::Linear: return "linear";
        case ScheduleFamily::ScaledLinear: return "scaled-linear";
        case ScheduleFamily::Cosine: return "cosine";
    }
    return "?";
}

struct ScheduleParams {
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    double cosine_offset = 8e-3;  // cosine family only
};

// β_t and ᾱ_t for t in [1, T]. ᾱ_t is strictly decreasing and confined to
// (0, 1); ᾱ_0 is defined as exactly 1.
class DiffusionSchedule {
public:
    DiffusionSchedule(std::vector<double> beta)
        : beta_(std::move(beta)) {
        if (beta_.size() < 2) throw std::invalid_argument("schedule horizon must be >= 2");
        alpha_bar_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) {
                throw std::invalid_argument("beta out of (0,1) at t=" + std::to_string(i + 1));
            }
            prod *= 1.0 - beta_[i];
            alpha_bar_[i] = prod;
            if (!(alpha_bar_[i] > 0.0 && alpha_bar_[i] < 1.0)) {
                throw std::invalid_argument("alpha_bar left (0,1) at t=" + std::to_string(i + 1));
            }
        }
    }

    int horizon() const { return static_cast<int>(beta_.size()); }

    double beta(int t) const {
        check_t_(t, 1);
        return beta_[static_cast<std::size_t>(t) - 1];
    }

    // valid for t in [0, T]; alpha_bar(0) == 1
    double alpha_bar(int t) const {
        check_t_(t, 0);
        return t == 0 ? 1.0 : alpha_bar_[static_cast<std::size_t>(t) - 1];
    }

    double snr(int t) const {
        check_t_(t, 1);
        const double ab = alpha_bar(t);
        return ab / (1.0 - ab);
    }

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    void check_t_(int t, int lo) const {
        if (t < lo || t > horizon()) {
            throw std::out_of_range("timestep " + std::to_string(t) + " outside [" +
                                    std::to_string(lo) + ", " + std::to_string(horizon()) + "]");
        }
    }

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

inline DiffusionSchedule make_schedule(int horizon, ScheduleFamily family,
                                       const ScheduleParams& params = {}) {
    if (horizon < 2) throw std::invalid_argument("schedule horizon must be >= 2");
    const std::size_t n = static_cast<std::size_t>(horizon);
    std::vector<double> beta(n);
    switch (family) {
        case ScheduleFamily::Linear: {
            for (std::size_t i = 0; i < n; ++i) {
                beta[i] = params.beta_start +
                          (params.beta_end - params.beta_start) * double(i) / double(n - 1);
            }
            break;
        }
        case ScheduleFamily::ScaledLinear: {
            // linear in sqrt(beta) space, the convention of latent-diffusion schedules
            const double s0 = std::sqrt(params.beta_start);
            const double s1 = std::sqrt(params.beta_end);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = s0 + (s1 - s0) * double(i) / double(n - 1);
                beta[i] = s * s;
            }
            break;
        }
        case ScheduleFamily::Cosine: {
            const double off = params.cosine_offset;
            auto f = [&](double u) {
                const double v = std::cos((u + off) / (1.0 + off) * M_PI / 2.0);
                return v * v;
            };
            const double f0 = f(0.0);
            double prev = 1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double ab = f(double(i + 1) / double(n)) / f0;
                beta[i] = std::min(1.0 - ab / prev, 0.999);
                prev = ab;
            }
            break;
        }
    }
    return DiffusionSchedule(std::move(beta));
}

// A latent (or pixel-space) tensor paired with its timestep. t = 0 is clean
// data; construction rejects non-finite payloads.
struct NoisyLatent {
    Tensor data;
    int t = 0;

    NoisyLatent() = default;
    NoisyLatent(Tensor d, int timestep) : data(std::move(d)), t(timestep) {
        if (t < 0) throw std::invalid_argument("NoisyLatent: negative timestep");
        if (!data.all_finite()) throw std::invalid_argument("NoisyLatent: non-finite data");
    }
};

struct DDIMStepConfig {
    double eta = 0.0;  // 0 => fully deterministic step
};

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps
inline NoisyLatent forward_noise(const NoisyLatent& x0, int t, const Tensor& eps,
                                 const DiffusionSchedule& schedule) {
    if (x0.t != 0) throw std::invalid_argument("forward_noise: input must be at t=0");
    if (t < 1 || t > schedule.horizon()) throw std::out_of_range("forward_noise: t out of range");
    if (!eps.same_shape(x0.data)) throw std::invalid_argument("forward_noise: eps shape mismatch");
    const double ab = schedule.alpha_bar(t);
    const double cs = std::sqrt(ab);
    const double cn = std::sqrt(1.0 - ab);
    Tensor out = Tensor::zeros_like(x0.data);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = cs * x0.data[i] + cn * eps[i];
    return NoisyLatent(std::move(out), t);
}

// x0 estimate implied by a noise prediction at timestep t:
//   (x_t - sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_bar_t)
inline Tensor tweedie_x0(const NoisyLatent& xt, const Tensor& eps_pred,
                         const DiffusionSchedule& schedule) {
    if (xt.t < 1 || xt.t > schedule.horizon()) {
        throw std::out_of_range("tweedie_x0: timestep out of range");
    }
    if (!eps_pred.same_shape(xt.data)) throw std::invalid_argument("tweedie_x0: shape mismatch");
    if (!eps_pred.all_finite()) throw std::invalid_argument("tweedie_x0: non-finite prediction");
    const double ab = schedule.alpha_bar(xt.t);
    const double cs = std::sqrt(ab);
    const double cn = std::sqrt(1.0 - ab);
    Tensor out = Tensor::zeros_like(xt.data);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (xt.data[i] - cn * eps_pred[i]) / cs;
    return out;
}

// Deterministic DDIM update toward t_prev < t:
//   x_prev = sqrt(alpha_bar_prev) x0_est + sqrt(1 - alpha_bar_prev - eta^2 beta_t^2) eps_pred
//            + eta beta_t noise
// With eta = 0 the step is a pure function of (x_t, eps_pred).
inline NoisyLatent ddim_reverse_step(const NoisyLatent& xt, const Tensor& eps_pred, int t_prev,
                                     const DDIMStepConfig& cfg, const DiffusionSchedule& schedule,
                                     const Tensor* noise = nullptr) {
    if (t_prev < 0 || t_prev >= xt.t) {
        throw std::invalid_argument("ddim_reverse_step: require 0 <= t_prev < t");
    }
    const Tensor x0_est = tweedie_x0(xt, eps_pred, schedule);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double cs = std::sqrt(ab_prev);
    double var = 1.0 - ab_prev;
    double noise_scale = 0.0;
    if (cfg.eta > 0.0) {
        const double eb = cfg.eta * schedule.beta(xt.t);
        var -= eb * eb;
        if (var < 0.0) throw std::invalid_argument("ddim_reverse_step: eta too large for step");
        if (noise == nullptr) {
            throw std::invalid_argument("ddim_reverse_step: eta > 0 requires a noise tensor");
        }
        noise_scale = eb;
    }
    const double cn = std::sqrt(var);
    Tensor out = Tensor::zeros_like(xt.data);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = cs * x0_est[i] + cn * eps_pred[i];
        if (noise_scale != 0.0) out[i] += noise_scale * (*noise)[i];
    }
    return NoisyLatent(std::move(out), t_prev);
}

inline double snr(int t, const DiffusionSchedule& schedule) { return schedule.snr(t); }

// ---------------------------------------------------------------------------
// flat numeric serialization (one row per t: t, beta_t, alpha_bar_t), used for
// cross-checking schedules against external backends

inline void save_schedule_csv(const DiffusionSchedule& schedule, std::ostream& os) {
    os << "t,beta,alpha_bar\n";
    char buf[96];
    for (int t = 1; t <= schedule.horizon(); ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", t, schedule.beta(t),
                      schedule.alpha_bar(t));
        os << buf;
    }
}

inline void save_schedule_csv(const DiffusionSchedule& schedule, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    save_schedule_csv(schedule, os);
}

inline DiffusionSchedule load_schedule_csv(std::istream& is) {
    std::string line;
    std::getline(is, line);  // header
    std::vector<double> beta;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        std::getline(ls, cell, ',');
        beta.push_back(std::stod(cell));
        // alpha_bar column is derived; the constructor recomputes and checks it
    }
    return DiffusionSchedule(std::move(beta));
}

inline DiffusionSchedule load_schedule_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return load_schedule_csv(is);
}

}  // namespace scoredist
