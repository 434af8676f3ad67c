#pragma once

// Experiment runner: resolves a flat config into schedule/backend/renderer
// objects, drives the optimization loops for the 2D distillation protocol
// and the toy 3D runs, and emits reproducible run records (metrics CSV,
// snapshots, checkpoints). Identical configs, including the seed, produce
// byte-identical metric files.

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "scoredist/adapter.hpp"
#include "scoredist/denoiser.hpp"
#include "scoredist/io/checkpoint.hpp"
#include "scoredist/io/config.hpp"
#include "scoredist/io/csv.hpp"
#include "scoredist/io/plot.hpp"
#include "scoredist/io/png.hpp"
#include "scoredist/losses.hpp"
#include "scoredist/optimizer.hpp"
#include "scoredist/oracles.hpp"
#include "scoredist/scene.hpp"
#include "scoredist/sgc.hpp"
#include "scoredist/timestep.hpp"
#include "scoredist/toy_denoiser.hpp"

namespace scoredist {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "command",
        "backend",
        "schedule.T", "schedule.family", "schedule.beta_start", "schedule.beta_end",
        "schedule.warmup_fraction",
        "window.annealed", "window.t_min_up", "window.t_max_up", "window.t_min_low",
        "window.t_max_low",
        "loss.mode", "loss.omega", "loss.delta_t",
        "guidance.cfg_scale", "guidance.pag_scale", "guidance.pag_blocks",
        "conditioning.prompt", "conditioning.prompt_text", "conditioning.tau",
        "conditioning.visual_prompt", "conditioning.self_guidance",
        "run.iterations", "run.step_size", "run.seed", "run.out", "run.snapshot_every",
        "run.init_image", "run.init_stddev",
        "renderer.grid", "renderer.pixels",
        "sgc.lambda_geo", "sgc.lambda_sem", "sgc.lambda_ir", "sgc.ir_per_view",
        "sgc.reference", "sgc.reference_scene",
        "sgc.extractors.semantic", "sgc.extractors.depth", "sgc.extractors.normal",
        "sgc.extractors.reward",
    };
    return keys;
}

class ExperimentConfig {
public:
    // Fills command defaults, applies overrides, checks the key registry.
    static ExperimentConfig resolve(const std::string& command, const FlatConfig& overrides) {
        overrides.require_known(known_config_keys());
        FlatConfig c;
        c.set("command", command);
        c.set("schedule.T", 1000);
        c.set("schedule.family", "linear");
        c.set("schedule.beta_start", 1e-4);
        c.set("schedule.beta_end", 2e-2);
        c.set("schedule.warmup_fraction", 1.0 / 3.0);
        c.set("window.t_min_up", 0.22);
        c.set("window.t_max_up", 0.98);
        c.set("window.t_min_low", 0.02);
        c.set("window.t_max_low", 0.78);
        c.set("loss.omega", "one");
        c.set("loss.delta_t", 50);
        c.set("guidance.cfg_scale", 7.5);
        c.set("guidance.pag_scale", 1.0);
        c.set("guidance.pag_blocks", "all");
        c.set("conditioning.tau", 0.5);
        c.set("conditioning.prompt", 0);
        c.set("conditioning.self_guidance", false);
        c.set("run.snapshot_every", 100);
        c.set("run.init_stddev", 0.1);
        if (command == "distill2d") {
            c.set("loss.mode", "sds");
            c.set("window.annealed", false);
            c.set("run.iterations", 500);
            c.set("run.step_size", 1e-3);
        } else if (command == "distill3d-toy") {
            c.set("loss.mode", "vpcsm");
            c.set("window.annealed", true);
            c.set("run.iterations", 2000);
            c.set("run.step_size", 1e-2);
            c.set("run.snapshot_every", 250);
            c.set("renderer.grid", 12);
            c.set("renderer.pixels", 16);
            c.set("sgc.lambda_geo", 1.0);
            c.set("sgc.lambda_sem", 4.0);
            c.set("sgc.lambda_ir", 2.5);
            c.set("sgc.ir_per_view", false);
            c.set("sgc.extractors.semantic", "toy");
            c.set("sgc.extractors.depth", "toy");
            c.set("sgc.extractors.normal", "toy");
            c.set("sgc.extractors.reward", "toy");
        } else {
            throw std::invalid_argument("unknown experiment command " + command);
        }
        for (const auto& [k, v] : overrides.values()) c.set(k, v);

        ExperimentConfig out;
        out.flat_ = std::move(c);
        if (!out.flat_.has("backend")) throw std::invalid_argument("config requires 'backend'");
        if (!out.flat_.has("run.seed")) throw std::invalid_argument("config requires 'run.seed'");
        if (!out.flat_.has("run.out")) throw std::invalid_argument("config requires 'run.out'");
        if (out.iterations() < 1) throw std::invalid_argument("run.iterations must be >= 1");
        if (!(out.step_size() > 0.0)) throw std::invalid_argument("run.step_size must be > 0");
        return out;
    }

    const FlatConfig& flat() const { return flat_; }
    std::string command() const { return flat_.get<std::string>("command"); }

    DiffusionSchedule make_schedule() const {
        ScheduleParams params;
        params.beta_start = flat_.get<double>("schedule.beta_start");
        params.beta_end = flat_.get<double>("schedule.beta_end");
        return scoredist::make_schedule(
            flat_.get<int>("schedule.T"),
            schedule_family_from_string(flat_.get<std::string>("schedule.family")), params);
    }

    LossConfig loss() const {
        LossConfig cfg;
        cfg.mode = loss_mode_from_string(flat_.get<std::string>("loss.mode"));
        cfg.weighting = omega_from_string(flat_.get<std::string>("loss.omega"));
        cfg.delta_t = flat_.get<int>("loss.delta_t");
        cfg.guidance.cfg_scale = flat_.get<double>("guidance.cfg_scale");
        cfg.guidance.pag_scale = flat_.get<double>("guidance.pag_scale");
        cfg.validate();
        return cfg;
    }

    TimestepWindow window() const {
        if (!flat_.get_or<bool>("window.annealed", false)) {
            return TimestepWindow::constant(flat_.get<double>("window.t_min_low"),
                                            flat_.get<double>("window.t_max_up"), iterations());
        }
        TimestepWindow w = TimestepWindow::with_warmup_fraction(
            iterations(), flat_.get<double>("schedule.warmup_fraction"));
        w.t_min_up = flat_.get<double>("window.t_min_up");
        w.t_max_up = flat_.get<double>("window.t_max_up");
        w.t_min_low = flat_.get<double>("window.t_min_low");
        w.t_max_low = flat_.get<double>("window.t_max_low");
        w.validate();
        return w;
    }

    SGCWeights sgc_weights() const {
        SGCWeights w;
        w.lambda_geo = flat_.get_or<double>("sgc.lambda_geo", 1.0);
        w.lambda_sem = flat_.get_or<double>("sgc.lambda_sem", 4.0);
        w.lambda_ir = flat_.get_or<double>("sgc.lambda_ir", 2.5);
        w.validate();
        return w;
    }

    int iterations() const { return flat_.get<int>("run.iterations"); }
    double step_size() const { return flat_.get<double>("run.step_size"); }
    uint64_t seed() const { return flat_.get<uint64_t>("run.seed"); }
    std::string out_dir() const { return flat_.get<std::string>("run.out"); }
    int snapshot_every() const { return flat_.get<int>("run.snapshot_every"); }
    int prompt() const { return flat_.get<int>("conditioning.prompt"); }
    double tau() const { return flat_.get<double>("conditioning.tau"); }

    std::string prompt_text() const {
        return flat_.get_or<std::string>("conditioning.prompt_text",
                                         "label-" + std::to_string(prompt()));
    }

private:
    FlatConfig flat_;
};

// ---------------------------------------------------------------------------
// backend registry

struct BackendHandle {
    std::shared_ptr<const Denoiser> backend;
    std::optional<MixtureSpec> mixture;        // present for mixture-trained backends
    const ToyDenoiser* toy = nullptr;          // non-null when the backend is the toy net
    ToyDenoiser* toy_mutable = nullptr;        // for hook configuration
    const ExternalAdapter* adapter = nullptr;  // non-null for the external seam
};

inline MixtureSpec mixture_from_meta(const nlohmann::json& meta) {
    MixtureSpec spec;
    spec.sigma = meta.at("sigma").get<double>();
    spec.weights = meta.at("weights").get<std::vector<double>>();
    for (const auto& m : meta.at("modes")) {
        const auto vals = m.get<std::vector<double>>();
        spec.modes.push_back(Tensor({vals.size()}, vals));
    }
    spec.validate();
    return spec;
}

inline nlohmann::json mixture_to_meta(const MixtureSpec& spec) {
    nlohmann::json meta;
    meta["sigma"] = spec.sigma;
    meta["weights"] = spec.weights;
    meta["modes"] = nlohmann::json::array();
    for (const auto& m : spec.modes) meta["modes"].push_back(m.raw());
    return meta;
}

// "optimal-mixture", "adapter[:model[:device]]", or a toy weights file path.
inline BackendHandle load_backend(const std::string& id, const DiffusionSchedule& schedule) {
    BackendHandle handle;
    if (id == "optimal-mixture") {
        handle.mixture = standard_mixture2d();
        handle.backend = std::make_shared<OptimalMixtureDenoiser>(*handle.mixture, schedule);
        return handle;
    }
    if (id == "adapter" || id.rfind("adapter:", 0) == 0) {
        std::string model_id = "default", device = "cuda";
        if (id.size() > 8) {
            const std::string rest = id.substr(8);
            const auto colon = rest.find(':');
            model_id = rest.substr(0, colon);
            if (colon != std::string::npos) device = rest.substr(colon + 1);
        }
        auto adapter = std::shared_ptr<const ExternalAdapter>(external_adapter(model_id, device));
        handle.adapter = adapter.get();
        handle.backend = std::move(adapter);
        return handle;
    }
    auto toy = std::make_shared<ToyDenoiser>(ToyDenoiser::load(id));
    if (toy->capabilities().horizon != schedule.horizon()) {
        throw std::invalid_argument("backend horizon " +
                                    std::to_string(toy->capabilities().horizon) +
                                    " does not match schedule.T " +
                                    std::to_string(schedule.horizon()));
    }
    if (!toy->meta().empty()) {
        const auto meta = nlohmann::json::parse(toy->meta());
        if (meta.value("dataset", "") == "mixture2d") {
            handle.mixture = mixture_from_meta(meta.at("mixture"));
        }
    }
    handle.toy = toy.get();
    handle.toy_mutable = toy.get();
    handle.backend = std::move(toy);
    return handle;
}

// guidance.pag_blocks: "all" or a comma-separated block-name subset
inline void apply_pag_blocks(const BackendHandle& handle, const std::string& blocks) {
    if (blocks == "all" || handle.toy_mutable == nullptr) return;
    std::vector<std::string> names;
    std::string cur;
    for (char c : blocks + ",") {
        if (c == ',') {
            if (!cur.empty()) names.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    handle.toy_mutable->set_perturbed_blocks(std::move(names));
}

// ---------------------------------------------------------------------------
// run records

struct RunRecord {
    std::string out_dir;
    std::string config_hash;
    std::string status;  // completed | aborted
    int steps_completed = 0;
    double wall_seconds = 0.0;
    std::string metrics_path;
    std::string checkpoint_path;
    std::vector<std::string> snapshots;
    std::map<std::string, double> final_metrics;

    void save() const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["status"] = status;
        j["steps_completed"] = steps_completed;
        j["wall_seconds"] = wall_seconds;
        j["metrics"] = fs::path(metrics_path).filename().string();
        j["checkpoint"] = fs::path(checkpoint_path).filename().string();
        j["snapshots"] = snapshots;
        j["final_metrics"] = final_metrics;
        std::ofstream os(fs::path(out_dir) / "record.json");
        if (!os) throw std::runtime_error("cannot write run record in " + out_dir);
        os << j.dump(2) << "\n";
    }

    static RunRecord load(const std::string& dir) {
        std::ifstream is(fs::path(dir) / "record.json");
        if (!is) throw std::runtime_error("no record.json in " + dir + "; not a finished run");
        nlohmann::json j;
        is >> j;
        RunRecord r;
        r.out_dir = dir;
        r.config_hash = j.at("config_hash").get<std::string>();
        r.status = j.at("status").get<std::string>();
        r.steps_completed = j.at("steps_completed").get<int>();
        r.wall_seconds = j.at("wall_seconds").get<double>();
        r.metrics_path = (fs::path(dir) / j.at("metrics").get<std::string>()).string();
        r.checkpoint_path = (fs::path(dir) / j.at("checkpoint").get<std::string>()).string();
        r.snapshots = j.value("snapshots", std::vector<std::string>{});
        for (const auto& [k, v] : j.at("final_metrics").items()) {
            r.final_metrics[k] = v.get<double>();
        }
        return r;
    }
};

namespace detail {

// Rank-1 latents (mixture samples) get a fixed affine [-2,2] -> [0,1] so the
// PNG is at least inspectable; image-shaped latents are written as-is.
inline Tensor snapshot_image(const Tensor& t) {
    if (t.rank() == 3 && (t.shape()[0] == 1 || t.shape()[0] == 3)) return t;
    Tensor img({1, 1, t.size()});
    for (std::size_t i = 0; i < t.size(); ++i) img[i] = (t[i] + 2.0) / 4.0;
    return img;
}

inline double distance_to_mode(const Tensor& theta, const MixtureSpec& mixture, int label) {
    if (label < 0 || label >= int(mixture.modes.size())) return std::nan("");
    return norm(theta - mixture.modes[static_cast<std::size_t>(label)]);
}

inline double pearson(const Tensor& a, const Tensor& b) {
    const auto st = scoredist::detail::pearson_stats(a, b);
    const double denom = std::sqrt(st.suu * st.svv);
    if (denom <= 0.0) return 0.0;
    return st.suv / denom;
}

}  // namespace detail

// Resolves a visual-prompt spec ("mode:k", "reference-front", or a PNG path)
// into backend token space.
inline std::optional<Tensor> resolve_visual_tokens(const std::string& spec,
                                                   const BackendHandle& handle,
                                                   const MultiViewReference* reference) {
    if (spec.empty()) return std::nullopt;
    Tensor image;
    if (spec.rfind("mode:", 0) == 0) {
        if (!handle.mixture) {
            throw std::invalid_argument("visual prompt 'mode:k' needs a mixture backend");
        }
        const int k = std::stoi(spec.substr(5));
        if (k < 0 || k >= int(handle.mixture->modes.size())) {
            throw std::invalid_argument("visual prompt mode index out of range");
        }
        image = handle.mixture->modes[static_cast<std::size_t>(k)];
    } else if (spec == "reference-front") {
        if (!reference) {
            throw std::invalid_argument("visual prompt 'reference-front' needs a reference grid");
        }
        image = reference->views[0];
    } else {
        image = load_png(spec);
    }
    if (!handle.toy) {
        throw std::invalid_argument("backend '" + handle.backend->id() +
                                    "' cannot embed visual prompts");
    }
    return handle.toy->embed_visual(image);
}

// ---------------------------------------------------------------------------
// 2D distillation (noise-space optimization with the latent-image renderer)

inline RunRecord run_2d_distillation(const ExperimentConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const DiffusionSchedule schedule = cfg.make_schedule();
    const BackendHandle handle = load_backend(cfg.flat().get<std::string>("backend"), schedule);
    const DenoiserCapabilities caps = handle.backend->capabilities();
    const LossConfig loss_cfg = cfg.loss();
    const TimestepWindow window = cfg.window();

    LatentImageRenderer renderer(caps.latent_shape,
                                 cfg.flat().get<double>("run.init_stddev"));
    const CameraPose pose = CameraPose::canonical(CanonicalView::Front);

    fs::create_directories(cfg.out_dir());
    fs::create_directories(fs::path(cfg.out_dir()) / "snapshots");
    cfg.flat().save((fs::path(cfg.out_dir()) / "config.json").string());

    SceneParameters theta;
    if (cfg.flat().has("run.init_image")) {
        const Tensor img = load_png(cfg.flat().get<std::string>("run.init_image"));
        std::size_t want = 1;
        for (auto s : caps.latent_shape) want *= s;
        if (img.size() != want) {
            throw std::invalid_argument("init image size does not match backend latent shape");
        }
        theta.values = img.reshaped({want});
        theta.layout.slices = {{"image", 0, want}};
    } else {
        theta = renderer.init_parameters(cfg.seed() ^ 0x5eed0001ull);
    }

    ConditionSet cond = ConditionSet::text_only(cfg.prompt());
    cond.fusion_scale = cfg.tau();
    if (cfg.flat().get_or<bool>("conditioning.self_guidance", false)) {
        // self-guidance image generated by the backend itself; adapter only
        if (handle.adapter == nullptr) {
            throw std::invalid_argument(
                "conditioning.self_guidance requires the external adapter backend");
        }
        if (cfg.flat().has("conditioning.visual_prompt")) {
            throw std::invalid_argument(
                "conditioning.self_guidance and conditioning.visual_prompt are exclusive");
        }
        const Tensor image = handle.adapter->generate(cfg.prompt_text(), 50, cfg.seed());
        cond.visual = handle.adapter->embed_visual(image);
    } else {
        cond.visual = resolve_visual_tokens(
            cfg.flat().get_or<std::string>("conditioning.visual_prompt", ""), handle, nullptr);
    }
    apply_pag_blocks(handle, cfg.flat().get_or<std::string>("guidance.pag_blocks", "all"));

    std::mt19937_64 rng_t(cfg.seed() ^ 0x71a3d5c2b4e6f801ull);
    std::mt19937_64 rng_eps(cfg.seed() ^ 0x2c9e4f6a8b0d1e3full);
    AdamOptimizer adam(cfg.step_size());

    RunRecord record;
    record.out_dir = cfg.out_dir();
    record.config_hash = cfg.flat().hash_hex();
    record.metrics_path = (fs::path(cfg.out_dir()) / "metrics.csv").string();
    record.checkpoint_path = (fs::path(cfg.out_dir()) / "checkpoint.json").string();
    MetricsWriter metrics(record.metrics_path,
                          {"step", "t_used", "t_min", "t_max", "grad_norm", "delta_dif",
                           "delta_cfg", "pag_term", "dist_mode", "theta_norm"});

    SceneParameters last_good = theta;
    const GuidanceConfig snapshot_guidance{loss_cfg.guidance.cfg_scale, 0.0};
    bool small_latent = theta.values.size() <= 64;
    std::ofstream snap_values;
    if (small_latent) {
        snap_values.open(fs::path(cfg.out_dir()) / "snapshots" / "values.csv");
        snap_values << "step,quantity,index,value\n";
    }

    auto snapshot = [&](int step, const std::string& name, const Tensor& value) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "step_%06d_%s.png", step, name.c_str());
        const std::string rel = (fs::path("snapshots") / buf).string();
        save_png(detail::snapshot_image(value), (fs::path(cfg.out_dir()) / rel).string());
        record.snapshots.push_back(rel);
        if (small_latent) {
            for (std::size_t i = 0; i < value.size(); ++i) {
                snap_values << step << "," << name << "," << i << ","
                            << format_double(value[i]) << "\n";
            }
        }
    };

    int step = 0;
    try {
        for (; step < cfg.iterations(); ++step) {
            const auto [lo, hi] = window_at(step, window);
            const int t = sample_t(step, window, rng_t, schedule);
            const Tensor x0_img = render(theta, pose, renderer);
            const Tensor eps = random_normal<double>(x0_img.shape(), rng_eps);
            const GradientReport rep =
                loss_gradient(x0_img, t, cond, eps, *handle.backend, loss_cfg, schedule);
            const Tensor grad_theta = renderer.render_vjp(theta, pose, rep.grad);

            const double dist =
                handle.mixture
                    ? detail::distance_to_mode(theta.values, *handle.mixture, cfg.prompt())
                    : std::nan("");
            metrics.row({double(step), double(t), lo, hi, norm(grad_theta),
                         rep.terms.count("delta_dif") ? rep.terms.at("delta_dif") : 0.0,
                         rep.terms.count("delta_cfg") ? rep.terms.at("delta_cfg") : 0.0,
                         rep.terms.count("pag_term") ? rep.terms.at("pag_term") : 0.0, dist,
                         norm(theta.values)});

            if (step % cfg.snapshot_every() == 0 || step + 1 == cfg.iterations()) {
                snapshot(step, "x0", x0_img);
                snapshot(step, "x0_cond", rep.x0_cond);
                snapshot(step, "x0_uncond", rep.x0_uncond);
                // the guided Tweedie estimate x0_cond + lambda (x0_cond - x0_uncond)
                Tensor guided = rep.x0_cond;
                axpy(snapshot_guidance.cfg_scale, rep.x0_cond - rep.x0_uncond, guided);
                snapshot(step, "x0_cfg", guided);
            }

            adam.step(theta.values, grad_theta);
            if (!theta.values.all_finite()) {
                throw std::runtime_error("parameters became non-finite at step " +
                                         std::to_string(step));
            }
            last_good = theta;
        }
        record.status = "completed";
        save_scene_checkpoint(theta, renderer.id(), record.checkpoint_path);
    } catch (const std::exception& e) {
        record.status = "aborted";
        record.final_metrics["abort_step"] = step;
        save_scene_checkpoint(last_good, renderer.id(), record.checkpoint_path);
        std::ofstream err(fs::path(cfg.out_dir()) / "error.txt");
        err << e.what() << "\n";
    }
    record.steps_completed = step;
    if (handle.mixture) {
        record.final_metrics["dist_mode"] =
            detail::distance_to_mode(last_good.values, *handle.mixture, cfg.prompt());
    }
    record.final_metrics["theta_norm"] = norm(last_good.values);
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.save();
    return record;
}

// ---------------------------------------------------------------------------
// toy 3D runs (voxel renderer, VPCSM per sampled pose plus SGC on the grid)

inline SceneParameters make_target_scene(const VoxelRenderer& renderer) {
    const std::size_t n = renderer.options().grid;
    SceneParameters p;
    p.values = Tensor({2 * n * n * n});
    p.layout.slices = {{"density", 0, n * n * n}, {"color", n * n * n, n * n * n}};
    auto coord = [&](std::size_t i) { return -1.0 + (double(i) + 0.5) * 2.0 / double(n); };
    for (std::size_t ix = 0; ix < n; ++ix) {
        for (std::size_t iy = 0; iy < n; ++iy) {
            for (std::size_t iz = 0; iz < n; ++iz) {
                const double x = coord(ix), y = coord(iy), z = coord(iz);
                const std::size_t idx = (ix * n + iy) * n + iz;
                const double blob = ((x - 0.18) * (x - 0.18)) / (0.55 * 0.55) +
                                    ((y + 0.12) * (y + 0.12)) / (0.42 * 0.42) +
                                    (z - 0.05) * (z - 0.05) / (0.5 * 0.5);
                const bool bar = std::abs(y - 0.55) < 0.25 && std::abs(z) < 0.2 && x > 0.0;
                p.values[idx] = (blob < 1.0 || bar) ? 2.5 : -6.0;
                p.values[n * n * n + idx] = 1.6 * x;  // color gradient along world x
            }
        }
    }
    return p;
}

// Training dataset of renders from a fixed scene at random azimuths, with a
// little pixel noise so the denoiser sees a neighbourhood of the render
// manifold. Single-class.
class RenderSource : public SampleSource {
public:
    RenderSource(std::shared_ptr<const Renderer> renderer, SceneParameters scene,
                 double elevation_deg = 15.0, double pixel_noise = 0.01)
        : renderer_(std::move(renderer)), scene_(std::move(scene)),
          elevation_(elevation_deg), pixel_noise_(pixel_noise) {
        scene_.validate();
    }

    std::pair<Tensor, int> draw(std::mt19937_64& rng) const override {
        std::uniform_real_distribution<double> azim(0.0, 360.0);
        const CameraPose pose{azim(rng), elevation_, std::nullopt};
        Tensor img = renderer_->render(scene_, pose);
        if (pixel_noise_ > 0.0) {
            std::normal_distribution<double> n(0.0, pixel_noise_);
            for (auto& v : img) v += n(rng);
        }
        return {std::move(img), 0};
    }

    std::vector<std::size_t> sample_shape() const override { return renderer_->image_shape(); }
    int num_classes() const override { return 1; }

private:
    std::shared_ptr<const Renderer> renderer_;
    SceneParameters scene_;
    double elevation_, pixel_noise_;
};

inline RunRecord run_3d_toy(const ExperimentConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const DiffusionSchedule schedule = cfg.make_schedule();
    const BackendHandle handle = load_backend(cfg.flat().get<std::string>("backend"), schedule);
    const LossConfig loss_cfg = cfg.loss();
    const TimestepWindow window = cfg.window();
    const SGCWeights weights = cfg.sgc_weights();

    VoxelRenderer::Options opt;
    opt.grid = cfg.flat().get<std::size_t>("renderer.grid");
    opt.pixels = cfg.flat().get<std::size_t>("renderer.pixels");
    VoxelRenderer renderer(opt);
    if (handle.backend->capabilities().latent_shape != renderer.image_shape()) {
        throw std::invalid_argument("backend latent shape does not match renderer images");
    }
    for (const auto& kind : {"semantic", "depth", "normal", "reward"}) {
        const std::string v =
            cfg.flat().get_or<std::string>(std::string("sgc.extractors.") + kind, "toy");
        if (v != "toy") {
            throw std::invalid_argument(std::string("sgc extractor '") + kind +
                                        "' = '" + v + "' is not available in this build");
        }
    }

    // reference grids: a directory of views or a scene checkpoint to render
    MultiViewReference reference;
    if (cfg.flat().has("sgc.reference")) {
        reference = load_reference(cfg.flat().get<std::string>("sgc.reference"));
    } else if (cfg.flat().has("sgc.reference_scene")) {
        const std::string src = cfg.flat().get<std::string>("sgc.reference_scene");
        SceneParameters target;
        if (src == "demo") {
            target = make_target_scene(renderer);
        } else {
            auto [scene, renderer_id] = load_scene_checkpoint(src);
            if (renderer_id != renderer.id()) {
                throw std::invalid_argument("reference scene was built for renderer " +
                                            renderer_id);
            }
            target = std::move(scene);
        }
        const ViewGrid grid = render_grid(target, renderer);
        reference.views = grid.views;
        reference.provenance = "rendered:" + src;
    } else {
        throw std::invalid_argument("distill3d-toy requires sgc.reference or sgc.reference_scene");
    }
    for (const auto& v : reference.views) {
        if (v.shape() != renderer.image_shape()) {
            throw std::invalid_argument("reference views do not match renderer image shape");
        }
    }

    const bool ir_per_view = cfg.flat().get_or<bool>("sgc.ir_per_view", false);
    ViewGrid reference_grid;
    reference_grid.views = reference.views;
    for (std::size_t v = 0; v < 4; ++v) {
        reference_grid.cameras[v] = CameraPose::canonical(ViewGrid::order[v]);
    }
    SgcExtractors extractors = make_toy_extractors(
        renderer.image_shape(),
        ir_per_view ? reference.views[0] : compose_grid(reference_grid),
        cfg.seed() ^ 0xec5e7001ull);
    extractors.reward_per_view = ir_per_view;

    ConditionSet cond = ConditionSet::text_only(cfg.prompt());
    cond.fusion_scale = cfg.tau();
    cond.visual = resolve_visual_tokens(
        cfg.flat().get_or<std::string>("conditioning.visual_prompt", "reference-front"), handle,
        &reference);
    apply_pag_blocks(handle, cfg.flat().get_or<std::string>("guidance.pag_blocks", "all"));

    fs::create_directories(cfg.out_dir());
    fs::create_directories(fs::path(cfg.out_dir()) / "snapshots");
    cfg.flat().save((fs::path(cfg.out_dir()) / "config.json").string());

    SceneParameters theta = renderer.init_parameters(cfg.seed() ^ 0x5eed0003ull);
    std::mt19937_64 rng_t(cfg.seed() ^ 0x71a3d5c2b4e6f801ull);
    std::mt19937_64 rng_eps(cfg.seed() ^ 0x2c9e4f6a8b0d1e3full);
    std::mt19937_64 rng_pose(cfg.seed() ^ 0x90b5c4d3e2f1a006ull);
    AdamOptimizer adam(cfg.step_size());
    LuminanceDepth depth_map;

    RunRecord record;
    record.out_dir = cfg.out_dir();
    record.config_hash = cfg.flat().hash_hex();
    record.metrics_path = (fs::path(cfg.out_dir()) / "metrics.csv").string();
    record.checkpoint_path = (fs::path(cfg.out_dir()) / "checkpoint.json").string();
    MetricsWriter metrics(
        record.metrics_path,
        {"step", "t_used", "t_min", "t_max", "loss_grad_norm", "delta_cfg", "pag_term",
         "sgc_total", "sgc_depth", "sgc_normal", "sgc_semantic", "sgc_reward",
         "theta_grad_norm", "pearson_front", "pearson_right", "pearson_left", "pearson_back"});

    auto view_pearsons = [&](const ViewGrid& grid) {
        std::array<double, 4> out{};
        for (std::size_t v = 0; v < 4; ++v) {
            out[v] = detail::pearson(depth_map.depth(grid.views[v]),
                                     depth_map.depth(reference.views[v]));
        }
        return out;
    };

    SceneParameters last_good = theta;
    int step = 0;
    std::array<double, 4> pearsons{};
    try {
        for (; step < cfg.iterations(); ++step) {
            const auto [lo, hi] = window_at(step, window);
            const int t = sample_t(step, window, rng_t, schedule);

            const ViewGrid grid = render_grid(theta, renderer);
            const SgcBreakdown sgc = sgc_loss(grid, reference, cfg.prompt_text(), weights,
                                              extractors);
            Tensor grad_theta = Tensor::zeros_like(theta.values);
            for (std::size_t v = 0; v < 4; ++v) {
                grad_theta += renderer.render_vjp(theta, grid.cameras[v], sgc.grad[v]);
            }

            double loss_grad_norm = 0.0, delta_cfg_norm = 0.0, pag_norm = 0.0;
            std::uniform_real_distribution<double> azim(0.0, 360.0);
            for (int k = 0; k < 4; ++k) {
                const CameraPose pose{azim(rng_pose), 15.0, std::nullopt};
                const Tensor x0_img = render(theta, pose, renderer);
                const Tensor eps = random_normal<double>(x0_img.shape(), rng_eps);
                const GradientReport rep =
                    loss_gradient(x0_img, t, cond, eps, *handle.backend, loss_cfg, schedule);
                axpy(0.25, renderer.render_vjp(theta, pose, rep.grad), grad_theta);
                loss_grad_norm += norm(rep.grad) / 4.0;
                delta_cfg_norm += rep.terms.at("delta_cfg") / 4.0;
                if (rep.terms.count("pag_term")) pag_norm += rep.terms.at("pag_term") / 4.0;
            }

            pearsons = view_pearsons(grid);
            metrics.row({double(step), double(t), lo, hi, loss_grad_norm, delta_cfg_norm,
                         pag_norm, sgc.total, sgc.depth, sgc.normal, sgc.semantic, sgc.reward,
                         norm(grad_theta), pearsons[0], pearsons[1], pearsons[2], pearsons[3]});

            if (step % cfg.snapshot_every() == 0 || step + 1 == cfg.iterations()) {
                for (std::size_t v = 0; v < 4; ++v) {
                    char buf[64];
                    std::snprintf(buf, sizeof(buf), "step_%06d_%s.png", step,
                                  to_string(ViewGrid::order[v]));
                    const std::string rel = (fs::path("snapshots") / buf).string();
                    save_png(grid.views[v], (fs::path(cfg.out_dir()) / rel).string());
                    record.snapshots.push_back(rel);
                }
            }

            adam.step(theta.values, grad_theta);
            if (!theta.values.all_finite()) {
                throw std::runtime_error("parameters became non-finite at step " +
                                         std::to_string(step));
            }
            last_good = theta;
        }
        record.status = "completed";
        save_scene_checkpoint(theta, renderer.id(), record.checkpoint_path);
    } catch (const std::exception& e) {
        record.status = "aborted";
        record.final_metrics["abort_step"] = step;
        save_scene_checkpoint(last_good, renderer.id(), record.checkpoint_path);
        std::ofstream err(fs::path(cfg.out_dir()) / "error.txt");
        err << e.what() << "\n";
    }
    record.steps_completed = step;
    {
        const ViewGrid final_grid = render_grid(last_good, renderer);
        const auto p = view_pearsons(final_grid);
        record.final_metrics["pearson_front"] = p[0];
        record.final_metrics["pearson_right"] = p[1];
        record.final_metrics["pearson_left"] = p[2];
        record.final_metrics["pearson_back"] = p[3];
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.save();
    return record;
}

// ---------------------------------------------------------------------------
// standalone inversion round-trip tool

struct RoundTripSummary {
    int samples = 0;
    double median_rel_err = 0.0;
    double control_median_rel_err = 0.0;
    double invert_better_fraction = 0.0;
};

// Per sample: invert to t over the plan ladder and reverse back, versus the
// stochastic control (forward_noise with fresh eps, then the same reverse).
inline RoundTripSummary run_inversion_roundtrip(const Denoiser& backend,
                                                const MixtureSpec& mixture,
                                                const DiffusionSchedule& schedule, int t,
                                                int delta_t, int samples, uint64_t seed,
                                                const std::string& trace_csv = "") {
    const InversionPlan plan = plan_inversion(t, delta_t, schedule);
    const auto uncond = unconditional_predictor(backend);
    std::mt19937_64 rng(seed);
    std::vector<double> errs, control_errs;
    int invert_better = 0;
    for (int i = 0; i < samples; ++i) {
        const auto [x0, label] = mixture.draw(rng);
        (void)label;
        std::vector<InversionTraceRow> trace;
        const NoisyLatent inv =
            invert(NoisyLatent(x0, 0), plan, uncond, schedule,
                   (i == 0 && !trace_csv.empty()) ? &trace : nullptr);
        const NoisyLatent rec = reverse_over_ladder(inv, plan, uncond, schedule);
        const double err = rel_l2(rec.data, x0);

        const Tensor eps = random_normal<double>(x0.shape(), rng);
        const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);
        const NoisyLatent rec_control = reverse_over_ladder(xt, plan, uncond, schedule);
        const double err_control = rel_l2(rec_control.data, x0);

        errs.push_back(err);
        control_errs.push_back(err_control);
        if (err < err_control) ++invert_better;

        if (i == 0 && !trace_csv.empty()) {
            std::ofstream os(trace_csv);
            os << "s,x_norm,eps_norm\n";
            for (const auto& row : trace) {
                os << row.s << "," << format_double(row.x_norm) << ","
                   << format_double(row.eps_norm) << "\n";
            }
        }
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    RoundTripSummary summary;
    summary.samples = samples;
    summary.median_rel_err = median(errs);
    summary.control_median_rel_err = median(control_errs);
    summary.invert_better_fraction = double(invert_better) / double(samples);
    return summary;
}

// ---------------------------------------------------------------------------
// report generation

// Writes metric curves, a snapshot grid (rows = quantities, columns = steps)
// and a summary table for one or two finished runs.
inline std::vector<std::string> report(const std::vector<std::string>& run_dirs,
                                       const std::string& out_dir) {
    if (run_dirs.empty()) throw std::invalid_argument("report: no run directories given");
    std::vector<RunRecord> records;
    std::vector<CsvTable> tables;
    for (const auto& dir : run_dirs) {
        records.push_back(RunRecord::load(dir));
        tables.push_back(load_csv(records.back().metrics_path));
    }
    fs::create_directories(out_dir);
    std::vector<std::string> outputs;

    // summary table
    {
        std::ofstream os(fs::path(out_dir) / "summary.csv");
        os << "run,config_hash,status,steps,final_metric,value\n";
        for (std::size_t r = 0; r < records.size(); ++r) {
            for (const auto& [k, v] : records[r].final_metrics) {
                os << run_dirs[r] << "," << records[r].config_hash << "," << records[r].status
                   << "," << records[r].steps_completed << "," << k << "," << format_double(v)
                   << "\n";
            }
        }
        outputs.push_back((fs::path(out_dir) / "summary.csv").string());
    }

    // metric curves with config-hash captions
    const std::vector<std::string> preferred = {"dist_mode", "grad_norm", "theta_grad_norm",
                                                "sgc_total", "pearson_front", "loss_grad_norm"};
    for (const auto& col : preferred) {
        std::vector<std::vector<double>> series;
        std::vector<std::string> captions;
        for (std::size_t r = 0; r < tables.size(); ++r) {
            bool has = false;
            for (const auto& c : tables[r].columns) has |= (c == col);
            if (!has) continue;
            series.push_back(tables[r].column(col));
            captions.push_back("run" + std::to_string(r) + ": " + records[r].config_hash);
        }
        if (series.empty()) continue;
        const Canvas canvas = plot_curves(series, captions);
        const std::string path = (fs::path(out_dir) / ("curve_" + col + ".png")).string();
        save_png(canvas.image(), path);
        outputs.push_back(path);
    }

    // snapshot grid for the first run: rows = quantities, columns = steps
    std::vector<std::string> missing;
    {
        const RunRecord& rec = records.front();
        std::map<std::string, std::map<int, std::string>> by_quantity;
        for (const auto& rel : rec.snapshots) {
            const std::string name = fs::path(rel).filename().string();
            // step_XXXXXX_<quantity>.png
            if (name.rfind("step_", 0) != 0) continue;
            const auto second = name.find('_', 5);
            if (second == std::string::npos) continue;
            const int step = std::stoi(name.substr(5, second - 5));
            const std::string quantity =
                name.substr(second + 1, name.size() - second - 5);
            const std::string full = (fs::path(rec.out_dir) / rel).string();
            if (fs::exists(full)) {
                by_quantity[quantity][step] = full;
            } else {
                missing.push_back(rel);
            }
        }
        if (!by_quantity.empty()) {
            std::set<int> steps;
            for (const auto& [q, m] : by_quantity) {
                for (const auto& [s, p] : m) steps.insert(s);
            }
            Tensor sample = load_png(by_quantity.begin()->second.begin()->second);
            std::size_t tile_h = sample.shape()[1], tile_w = sample.shape()[2];
            std::size_t factor = 1;
            while (tile_h * factor < 48) ++factor;
            tile_h *= factor;
            tile_w *= factor;
            const std::size_t pad = 4, label_w = 80;
            Canvas canvas(label_w + steps.size() * (tile_w + pad) + pad,
                          16 + by_quantity.size() * (tile_h + pad) + pad);
            std::size_t row = 0;
            for (const auto& [quantity, files] : by_quantity) {
                canvas.text(4, 18 + row * (tile_h + pad) + tile_h / 2, quantity, {0, 0, 0});
                std::size_t col = 0;
                for (int s : steps) {
                    const auto it = files.find(s);
                    if (it != files.end()) {
                        canvas.blit(label_w + col * (tile_w + pad),
                                    16 + row * (tile_h + pad),
                                    upscale(load_png(it->second), factor));
                    }
                    if (row == 0) {
                        canvas.text(label_w + col * (tile_w + pad), 2, std::to_string(s),
                                    {0, 0, 0});
                    }
                    ++col;
                }
                ++row;
            }
            const std::string path = (fs::path(out_dir) / "snapshot_grid.png").string();
            save_png(canvas.image(), path);
            outputs.push_back(path);
        }
    }
    if (!missing.empty()) {
        std::ofstream os(fs::path(out_dir) / "missing_snapshots.txt");
        for (const auto& m : missing) os << m << "\n";
    }
    return outputs;
}

}  // namespace scoredist
