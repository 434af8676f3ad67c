#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "scoredist/experiment.hpp"
#include "scoredist/inversion.hpp"
#include "scoredist/losses.hpp"
#include "scoredist/oracles.hpp"
#include "support/fixtures.hpp"

using namespace scoredist;

namespace {

// backend returning a fixed tensor regardless of query
class ConstDenoiser : public Denoiser {
public:
    ConstDenoiser(Tensor value, int horizon) : value_(std::move(value)), horizon_(horizon) {}
    Tensor predict(const DenoiserQuery&) const override { return value_; }
    DenoiserCapabilities capabilities() const override {
        return {true, true, true, value_.shape(), horizon_};
    }
    std::string id() const override { return "const"; }

private:
    Tensor value_;
    int horizon_;
};

// wraps another backend and records every (x, t) query it sees
class RecordingDenoiser : public Denoiser {
public:
    explicit RecordingDenoiser(const Denoiser& inner) : inner_(inner) {}
    Tensor predict(const DenoiserQuery& q) const override {
        log_.push_back({q.x, q.t});
        return inner_.predict(q);
    }
    DenoiserCapabilities capabilities() const override { return inner_.capabilities(); }
    std::string id() const override { return "recording"; }
    mutable std::vector<std::pair<Tensor, int>> log_;

private:
    const Denoiser& inner_;
};

}  // namespace

TEST_CASE("inversion plans follow the residual-then-interval ladder") {
    const auto& s = testsup::schedule1000();
    const auto even = plan_inversion(500, 100, s);
    REQUIRE(even.residual == 100);
    REQUIRE(even.steps == 5);
    REQUIRE(even.ladder == std::vector<int>{100, 200, 300, 400, 500});

    const auto ragged = plan_inversion(530, 100, s);
    REQUIRE(ragged.residual == 30);
    REQUIRE(ragged.steps == 6);
    REQUIRE(ragged.ladder == std::vector<int>{30, 130, 230, 330, 430, 530});

    const auto single = plan_inversion(50, 50, s);
    REQUIRE(single.residual == 50);
    REQUIRE(single.steps == 1);
    REQUIRE(single.ladder == std::vector<int>{50});

    REQUIRE_THROWS_AS(plan_inversion(0, 50, s), std::out_of_range);
    REQUIRE_THROWS_AS(plan_inversion(1001, 50, s), std::out_of_range);
    REQUIRE_THROWS_AS(plan_inversion(500, 0, s), std::out_of_range);
}

TEST_CASE("zero denoiser inverts by pure signal decay") {
    const auto& s = testsup::schedule1000();
    const Tensor x0({2}, {0.8, -0.4});
    const auto plan = plan_inversion(430, 100, s);
    std::vector<InversionTraceRow> trace;
    const auto out = invert(
        NoisyLatent(x0, 0), plan, [](const Tensor& x, int) { return Tensor::zeros_like(x); }, s,
        &trace);
    REQUIRE(out.t == 430);
    REQUIRE(rel_l2(out.data, x0 * std::sqrt(s.alpha_bar(430))) < 1e-12);
    REQUIRE(trace.size() == 5);
    for (std::size_t j = 0; j < trace.size(); ++j) {
        REQUIRE(trace[j].s == plan.ladder[j]);
        REQUIRE(trace[j].x_norm ==
                Catch::Approx(std::sqrt(s.alpha_bar(plan.ladder[j])) * norm(x0)).epsilon(1e-10));
        REQUIRE(trace[j].eps_norm == 0.0);
    }
}

TEST_CASE("single-rung plan collapses to one update") {
    const auto& s = testsup::schedule1000();
    const OptimalMixtureDenoiser backend(testsup::mixture(), s);
    const Tensor x0({2}, {1.02, 0.97});
    const auto plan = plan_inversion(50, 50, s);
    const auto uncond = unconditional_predictor(backend);
    const auto out = invert(NoisyLatent(x0, 0), plan, uncond, s);
    const Tensor eps0 = uncond(x0, 0);
    Tensor expect = Tensor::zeros_like(x0);
    const double cs = std::sqrt(s.alpha_bar(50));
    const double cn = std::sqrt(1.0 - s.alpha_bar(50));
    for (std::size_t i = 0; i < 2; ++i) expect[i] = cs * x0[i] + cn * eps0[i];
    REQUIRE(rel_l2(out.data, expect) < 1e-14);
}

TEST_CASE("inversion is deterministic and its ladder states are reproducible prefixes") {
    const auto& s = testsup::schedule1000();
    const OptimalMixtureDenoiser backend(testsup::mixture(), s);
    const Tensor x0({2}, {0.93, 1.08});

    const auto plan_long = plan_inversion(230, 100, s);   // ladder 30, 130, 230
    const auto plan_short = plan_inversion(130, 100, s);  // ladder 30, 130

    RecordingDenoiser rec_long(backend), rec_short(backend);
    const auto a = invert(NoisyLatent(x0, 0), plan_long,
                          unconditional_predictor(rec_long), s);
    const auto b = invert(NoisyLatent(x0, 0), plan_long,
                          unconditional_predictor(rec_long), s);
    REQUIRE(a.data == b.data);  // bit-identical repeat

    invert(NoisyLatent(x0, 0), plan_short, unconditional_predictor(rec_short), s);
    // the short run's query sequence is a prefix of the long run's
    REQUIRE(rec_short.log_.size() == 2);
    for (std::size_t i = 0; i < rec_short.log_.size(); ++i) {
        REQUIRE(rec_short.log_[i].second == rec_long.log_[i].second);
        REQUIRE(rec_short.log_[i].first == rec_long.log_[i].first);
    }
}

TEST_CASE("inversion reports the failing rung on non-finite states") {
    const auto& s = testsup::schedule1000();
    const Tensor x0({2}, {0.5, 0.5});
    const auto plan = plan_inversion(300, 100, s);
    int calls = 0;
    auto broken = [&calls](const Tensor& x, int) {
        ++calls;
        Tensor out = Tensor::zeros_like(x);
        if (calls == 3) out[0] = std::numeric_limits<double>::quiet_NaN();
        return out;
    };
    try {
        invert(NoisyLatent(x0, 0), plan, broken, s);
        FAIL("expected InversionError");
    } catch (const InversionError& e) {
        REQUIRE(e.rung_index == 2);
    }
    auto misshapen = [](const Tensor&, int) { return Tensor({3}); };
    REQUIRE_THROWS_AS(invert(NoisyLatent(x0, 0), plan, misshapen, s), InversionError);
}

TEST_CASE("inversion is unconditional by default with a conditional opt-in") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const Tensor x0({2}, {0.9, 1.1});
    const auto plan = plan_inversion(200, 50, s);
    const auto null_path = invert(NoisyLatent(x0, 0), plan, unconditional_predictor(net), s);
    const auto cond_path = invert(
        NoisyLatent(x0, 0), plan,
        unconditional_predictor(net, 0.5, ConditionSet::text_only(0)), s);
    REQUIRE(max_abs_diff(null_path.data, cond_path.data) > 1e-9);
    // the default path really is the fully nulled condition
    const auto explicit_null = invert(
        NoisyLatent(x0, 0), plan,
        unconditional_predictor(net, 0.0, ConditionSet::none()), s);
    REQUIRE(null_path.data == explicit_null.data);
}

TEST_CASE("matched noising round-trips far better than stochastic noising") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const auto summary =
        run_inversion_roundtrip(net, testsup::mixture(), s, 500, 50, 200, 99);
    REQUIRE(summary.median_rel_err < 0.2);
    REQUIRE(summary.median_rel_err < summary.control_median_rel_err / 3.0);
    REQUIRE(summary.invert_better_fraction >= 0.9);
}

// -- distillation losses ------------------------------------------------------

TEST_CASE("sds gradient vanishes when the backend predicts the injected noise") {
    const auto& s = testsup::schedule1000();
    std::mt19937_64 rng(21);
    const Tensor x0 = random_normal<double>({2}, rng);
    const Tensor eps = random_normal<double>({2}, rng);
    const ConstDenoiser backend(eps, s.horizon());
    LossConfig cfg;
    cfg.guidance.cfg_scale = 7.5;
    const auto rep = sds_gradient(x0, 500, ConditionSet::text_only(0), eps, backend, cfg, s);
    REQUIRE(norm(rep.grad) < 1e-12);
    REQUIRE(rep.terms.at("delta_dif") < 1e-12);  // tweedie round trip is exact
    REQUIRE(rep.terms.at("delta_cfg") < 1e-12);
}

TEST_CASE("the two decomposition routes agree to tight tolerance") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    std::mt19937_64 rng(22);
    std::uniform_int_distribution<int> t_dist(20, 980);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        auto [x0, label] = testsup::mixture().draw(rng);
        const auto rep = check_sds_decomposition(x0, t_dist(rng), net, s, 1, GuidanceConfig{},
                                                 ConditionSet::text_only(label), rng());
        worst = std::max(worst, rep.max_rel_deviation);
    }
    REQUIRE(worst < 1e-5);

    // backend-independent identity: same bound on the closed-form oracle
    const OptimalMixtureDenoiser optimal(testsup::mixture(), s);
    const auto rep = check_sds_decomposition(testsup::mixture().modes[0], 500, optimal, s, 50,
                                             GuidanceConfig{}, ConditionSet::text_only(0), 7);
    REQUIRE(rep.max_rel_deviation < 1e-5);

    // lambda = 0 reduces to the dif-only comparison and still holds
    const auto rep0 = check_sds_decomposition(testsup::mixture().modes[1], 300, optimal, s, 20,
                                              GuidanceConfig{0.0, 0.0},
                                              ConditionSet::text_only(1), 8);
    REQUIRE(rep0.max_rel_deviation < 1e-5);
}

TEST_CASE("sds equals dif_only plus cfg_only at matched draws") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<int> t_dist(20, 980);
    for (int i = 0; i < 100; ++i) {
        auto [x0, label] = testsup::mixture().draw(rng);
        const int t = t_dist(rng);
        const Tensor eps = random_normal<double>({2}, rng);
        const ConditionSet cond = ConditionSet::text_only(label);
        LossConfig cfg;
        const auto full = sds_gradient(x0, t, cond, eps, net, cfg, s);
        cfg.mode = LossMode::DifOnly;
        const auto dif = decomposed_gradient(x0, t, cond, eps, net, cfg, s);
        cfg.mode = LossMode::CfgOnly;
        const auto guid = decomposed_gradient(x0, t, cond, eps, net, cfg, s);
        REQUIRE(rel_l2(dif.grad + guid.grad, full.grad) < 1e-6);
    }
}

TEST_CASE("cfg_only gradient vanishes when conditions do not matter") {
    const auto& s = testsup::schedule1000();
    std::mt19937_64 rng(24);
    const Tensor fixed = random_normal<double>({2}, rng);
    const ConstDenoiser backend(fixed, s.horizon());
    LossConfig cfg;
    cfg.mode = LossMode::CfgOnly;
    const Tensor x0 = random_normal<double>({2}, rng);
    const Tensor eps = random_normal<double>({2}, rng);
    const auto rep = decomposed_gradient(x0, 321, ConditionSet::text_only(2), eps, backend, cfg, s);
    REQUIRE(norm(rep.grad) < 1e-12);
    REQUIRE(rep.terms.at("delta_cfg") < 1e-12);
}

TEST_CASE("csm is a deterministic function of its inputs, sds is not") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const Tensor x0({2}, {0.2, -0.4});
    const ConditionSet cond = ConditionSet::text_only(1);
    LossConfig cfg;
    cfg.mode = LossMode::Csm;
    cfg.delta_t = 50;
    const auto a = csm_gradient(x0, 500, cond, net, cfg, s);
    const auto b = csm_gradient(x0, 500, cond, net, cfg, s);
    REQUIRE(a.grad == b.grad);

    std::mt19937_64 rng(25);
    cfg.mode = LossMode::Sds;
    const auto s1 = sds_gradient(x0, 500, cond, random_normal<double>({2}, rng), net, cfg, s);
    const auto s2 = sds_gradient(x0, 500, cond, random_normal<double>({2}, rng), net, cfg, s);
    REQUIRE(max_abs_diff(s1.grad, s2.grad) > 1e-9);
}

TEST_CASE("csm gradient vanishes for condition-blind backends") {
    const auto& s = testsup::schedule1000();
    std::mt19937_64 rng(26);
    const ConstDenoiser backend(random_normal<double>({2}, rng), s.horizon());
    LossConfig cfg;
    cfg.mode = LossMode::Csm;
    const auto rep = csm_gradient(Tensor({2}, {0.1, 0.1}), 400, ConditionSet::text_only(0),
                                  backend, cfg, s);
    REQUIRE(norm(rep.grad) < 1e-12);
}

TEST_CASE("vpcsm reduces to csm bit-exact when pag is off and visual is null") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const Tensor x0({2}, {0.35, 0.6});
    LossConfig cfg;
    cfg.delta_t = 50;
    cfg.guidance.pag_scale = 0.0;

    ConditionSet cond = ConditionSet::text_only(2);
    cond.fusion_scale = 0.5;  // null visual, tau irrelevant
    cfg.mode = LossMode::Csm;
    const auto csm = csm_gradient(x0, 530, cond, net, cfg, s);
    cfg.mode = LossMode::Vpcsm;
    const auto vp = vpcsm_gradient(x0, 530, cond, net, cfg, s);
    REQUIRE(vp.grad == csm.grad);

    // text-only conditions with tau = 0 likewise
    ConditionSet plain = ConditionSet::text_only(2);
    cfg.mode = LossMode::Csm;
    const auto csm2 = csm_gradient(x0, 530, plain, net, cfg, s);
    cfg.mode = LossMode::Vpcsm;
    const auto vp2 = vpcsm_gradient(x0, 530, plain, net, cfg, s);
    REQUIRE(vp2.grad == csm2.grad);
}

TEST_CASE("vpcsm includes the pag term and reports it") {
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const Tensor x0({2}, {0.3, 0.2});
    ConditionSet cond = ConditionSet::text_only(0);
    cond.fusion_scale = 0.5;
    cond.visual = net.embed_visual(testsup::mixture().modes[0]);
    LossConfig cfg;
    cfg.mode = LossMode::Vpcsm;
    cfg.delta_t = 50;
    cfg.guidance = {7.5, 1.0};
    const auto rep = vpcsm_gradient(x0, 500, cond, net, cfg, s);
    REQUIRE(rep.terms.count("pag_term") == 1);
    REQUIRE(rep.terms.at("pag_term") > 0.0);
    REQUIRE(rep.grad.all_finite());

    // vpcsm with s = 0 is linear in lambda
    cfg.guidance.pag_scale = 0.0;
    cfg.guidance.cfg_scale = 2.0;
    const auto a = vpcsm_gradient(x0, 500, cond, net, cfg, s);
    cfg.guidance.cfg_scale = 4.0;
    const auto b = vpcsm_gradient(x0, 500, cond, net, cfg, s);
    REQUIRE(rel_l2(b.grad, a.grad * 2.0) < 1e-10);

    // pag on a backend without the hook is rejected
    const OptimalMixtureDenoiser optimal(testsup::mixture(), s);
    cfg.guidance.pag_scale = 1.0;
    ConditionSet text_cond = ConditionSet::text_only(0);
    REQUIRE_THROWS_AS(vpcsm_gradient(x0, 500, text_cond, optimal, cfg, s),
                      std::invalid_argument);
}

TEST_CASE("vpcsm assembles from the guidance primitives") {
    // the gradient equals omega * [(cfg(bundle) - eps_cond) + (pag(bundle) - eps_cond)]
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const Tensor x0({2}, {0.15, -0.25});
    ConditionSet cond = ConditionSet::text_only(3);
    cond.fusion_scale = 0.5;
    cond.visual = net.embed_visual(testsup::mixture().modes[3]);
    LossConfig cfg;
    cfg.mode = LossMode::Vpcsm;
    cfg.delta_t = 50;
    cfg.guidance = {7.5, 1.0};
    const auto rep = vpcsm_gradient(x0, 470, cond, net, cfg, s);

    const auto plan = plan_inversion(470, cfg.delta_t, s);
    const auto x_inv = invert(NoisyLatent(x0, 0), plan,
                              unconditional_predictor(net, cond.fusion_scale), s);
    const auto bundle = make_bundle(x_inv, cond, net, s, true);
    Tensor assembled = apply_cfg(bundle, cfg.guidance);
    assembled += apply_pag(bundle, cfg.guidance);
    axpy(-2.0, bundle.eps_cond, assembled);
    REQUIRE(rel_l2(rep.grad, assembled) < 1e-12);
}

TEST_CASE("inversion-based losses require a positive interval") {
    LossConfig cfg;
    cfg.mode = LossMode::Csm;
    cfg.delta_t = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("csm converges closer than sds under an identical budget") {
    // 500 steps of Adam from a shared random init; csm's deterministic
    // inverted latents give it a cleaner signal than stochastic sds
    const auto& s = testsup::schedule1000();
    const auto& net = testsup::trained_mixture_backend();
    const auto& m = testsup::mixture();
    auto run = [&](LossMode mode, uint64_t seed) {
        LossConfig cfg;
        cfg.mode = mode;
        cfg.delta_t = 50;
        TimestepWindow win = TimestepWindow::constant(0.02, 0.98, 500);
        std::mt19937_64 rng_t(seed ^ 1), rng_eps(seed ^ 2), rng_i(seed ^ 3);
        Tensor theta = random_normal<double>({2}, rng_i, 0.1);
        ConditionSet cond = ConditionSet::text_only(0);
        cond.fusion_scale = 0.5;
        cond.visual = net.embed_visual(m.modes[0]);
        AdamOptimizer adam(1e-2);
        for (int step = 0; step < 500; ++step) {
            const int t = sample_t(step, win, rng_t, s);
            const Tensor eps = random_normal<double>({2}, rng_eps);
            const auto rep = loss_gradient(theta, t, cond, eps, net, cfg, s);
            adam.step(theta, rep.grad);
        }
        return norm(theta - m.modes[0]);
    };
    double mean_csm = 0.0, mean_sds = 0.0;
    const int seeds = 10;
    for (int i = 0; i < seeds; ++i) {
        mean_csm += run(LossMode::Csm, 4000 + i) / seeds;
        mean_sds += run(LossMode::Sds, 4000 + i) / seeds;
    }
    REQUIRE(mean_csm < mean_sds);
}
