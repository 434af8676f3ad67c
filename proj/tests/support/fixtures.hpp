#pragma once

// Shared test fixtures. The trained mixture backend is expensive (~1 min), so
// it is trained once and cached on disk under the build tree; training is
// seed-deterministic, so concurrent test binaries racing on the cache all
// produce the same bytes.

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "scoredist/experiment.hpp"
#include "scoredist/oracles.hpp"
#include "scoredist/toy_denoiser.hpp"

namespace testsup {

inline const scoredist::DiffusionSchedule& schedule1000() {
    static const scoredist::DiffusionSchedule s =
        scoredist::make_schedule(1000, scoredist::ScheduleFamily::Linear, {});
    return s;
}

inline const scoredist::MixtureSpec& mixture() {
    static const scoredist::MixtureSpec m = scoredist::standard_mixture2d();
    return m;
}

inline std::string fixture_dir() {
#ifdef SCOREDIST_FIXTURE_DIR
    return SCOREDIST_FIXTURE_DIR;
#else
    return ".";
#endif
}

inline std::string trained_mixture_backend_path() {
    namespace fs = std::filesystem;
    const std::string path = fixture_dir() + "/mixture_toy_seed42_20k.bin";
    if (fs::exists(path)) return path;
    scoredist::MixtureSource source(mixture());
    scoredist::ToyTrainConfig cfg;  // 20k steps, batch 32
    auto net = scoredist::train_toy_denoiser(source, schedule1000(), cfg, 42);
    nlohmann::json meta;
    meta["dataset"] = "mixture2d";
    meta["mixture"] = scoredist::mixture_to_meta(mixture());
    meta["train"] = {{"steps", cfg.steps}, {"batch", cfg.batch}, {"seed", 42}};
    net.set_meta(meta.dump());
    const std::string tmp = path + ".tmp" + std::to_string(::getpid());
    net.save(tmp);
    fs::rename(tmp, path);
    return path;
}

inline const scoredist::ToyDenoiser& trained_mixture_backend() {
    static const scoredist::ToyDenoiser net =
        scoredist::ToyDenoiser::load(trained_mixture_backend_path());
    return net;
}

// quick throwaway net for structural tests; not meaningfully trained
inline scoredist::ToyDenoiser untrained_mixture_backend(uint64_t seed = 7) {
    scoredist::ToyDenoiserConfig cfg;
    cfg.latent_shape = {2};
    return scoredist::ToyDenoiser(cfg, seed);
}

}  // namespace testsup
