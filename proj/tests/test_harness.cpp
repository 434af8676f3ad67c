#include <catch2/catch_amalgamated.hpp>

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "scoredist/adapter.hpp"
#include "scoredist/experiment.hpp"
#include "scoredist/io/png.hpp"
#include "support/fixtures.hpp"

using namespace scoredist;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "scoredist_harness" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig make_2d_config(const std::string& out, uint64_t seed,
                                const std::string& mode, int iters,
                                const std::string& backend) {
    FlatConfig flat;
    flat.set("backend", backend);
    flat.set("loss.mode", mode);
    flat.set("run.iterations", iters);
    flat.set("run.snapshot_every", std::max(1, iters / 2));
    flat.set("run.seed", seed);
    flat.set("run.out", out);
    flat.set("conditioning.prompt", 0);
    return ExperimentConfig::resolve("distill2d", flat);
}

}  // namespace

TEST_CASE("flat config rejects unknown keys and non-scalar values") {
    FlatConfig c;
    c.set("loss.mode", "csm");
    c.require_known(known_config_keys());
    c.set("loss.modes", "csm");
    REQUIRE_THROWS_AS(c.require_known(known_config_keys()), std::invalid_argument);

    REQUIRE_THROWS_AS(FlatConfig::from_json(nlohmann::json{{"a", nlohmann::json::array()}}),
                      std::invalid_argument);
}

TEST_CASE("config resolution fills command defaults and validates") {
    FlatConfig flat;
    flat.set("backend", "optimal-mixture");
    flat.set("run.seed", 1);
    flat.set("run.out", "/tmp/x");
    const auto cfg = ExperimentConfig::resolve("distill2d", flat);
    REQUIRE(cfg.iterations() == 500);
    REQUIRE(cfg.step_size() == 1e-3);
    REQUIRE(cfg.loss().mode == LossMode::Sds);
    REQUIRE(cfg.loss().guidance.cfg_scale == 7.5);
    REQUIRE(cfg.tau() == 0.5);
    const auto w = cfg.window();
    REQUIRE(window_at(0, w) == std::pair{0.02, 0.98});

    FlatConfig missing;
    missing.set("backend", "optimal-mixture");
    REQUIRE_THROWS_AS(ExperimentConfig::resolve("distill2d", missing), std::invalid_argument);

    // hash covers every resolved key including the seed
    FlatConfig other = flat;
    other.set("run.seed", 2);
    REQUIRE(ExperimentConfig::resolve("distill2d", flat).flat().hash_hex() !=
            ExperimentConfig::resolve("distill2d", other).flat().hash_hex());
}

TEST_CASE("2d distillation runs to completion and writes a full record") {
    const auto out = fresh_dir("run2d");
    const auto cfg = make_2d_config(out.string(), 11, "csm", 20, "optimal-mixture");
    const auto record = run_2d_distillation(cfg);
    REQUIRE(record.status == "completed");
    REQUIRE(record.steps_completed == 20);
    REQUIRE(fs::exists(out / "metrics.csv"));
    REQUIRE(fs::exists(out / "checkpoint.json"));
    REQUIRE(fs::exists(out / "config.json"));
    REQUIRE(fs::exists(out / "record.json"));
    REQUIRE(!record.snapshots.empty());
    for (const auto& snap : record.snapshots) REQUIRE(fs::exists(out / snap));

    const auto table = load_csv((out / "metrics.csv").string());
    REQUIRE(table.rows.size() == 20);
    REQUIRE(table.column("t_used").size() == 20);
    // window bounds recorded every step and respecting the scheduler contract
    for (const auto& row : table.rows) {
        REQUIRE(row[table.column_index("t_min")] == 0.02);
        REQUIRE(row[table.column_index("t_max")] == 0.98);
    }
    const auto loaded = RunRecord::load(out.string());
    REQUIRE(loaded.config_hash == record.config_hash);
}

TEST_CASE("deterministic losses reproduce metric files byte for byte") {
    const auto out_a = fresh_dir("det_a");
    const auto out_b = fresh_dir("det_b");
    const std::string backend = testsup::trained_mixture_backend_path();
    run_2d_distillation(make_2d_config(out_a.string(), 77, "csm", 25, backend));
    run_2d_distillation(make_2d_config(out_b.string(), 77, "csm", 25, backend));
    REQUIRE(read_file((out_a / "metrics.csv").string()) ==
            read_file((out_b / "metrics.csv").string()));
    // snapshots identical too
    REQUIRE(read_file((out_a / "snapshots" / "values.csv").string()) ==
            read_file((out_b / "snapshots" / "values.csv").string()));
}

TEST_CASE("aborted runs keep the last good checkpoint") {
    // weights poisoned with a NaN make the first prediction non-finite
    auto net = testsup::untrained_mixture_backend(3);
    net.parameters()[ToyDenoiser::kWOut][0] = std::nan("");
    nlohmann::json meta;
    meta["dataset"] = "mixture2d";
    meta["mixture"] = mixture_to_meta(testsup::mixture());
    net.set_meta(meta.dump());
    const auto dir = fresh_dir("abort");
    const auto weights = (dir / "broken.bin").string();
    net.save(weights);

    const auto out = fresh_dir("abort_run");
    const auto record = run_2d_distillation(make_2d_config(out.string(), 5, "sds", 10, weights));
    REQUIRE(record.status == "aborted");
    REQUIRE(record.steps_completed == 0);
    REQUIRE(fs::exists(out / "checkpoint.json"));
    REQUIRE(fs::exists(out / "error.txt"));
    const auto [theta, renderer_id] = load_scene_checkpoint((out / "checkpoint.json").string());
    REQUIRE(theta.values.all_finite());
}

TEST_CASE("visual prompts resolve from mixture modes and reject bad specs") {
    const auto& schedule = testsup::schedule1000();
    const auto handle = load_backend(testsup::trained_mixture_backend_path(), schedule);
    REQUIRE(handle.mixture.has_value());
    REQUIRE(handle.toy != nullptr);
    const auto tokens = resolve_visual_tokens("mode:1", handle, nullptr);
    REQUIRE(tokens.has_value());
    REQUIRE(tokens->shape() == std::vector<std::size_t>{4, 16});
    REQUIRE(!resolve_visual_tokens("", handle, nullptr).has_value());
    REQUIRE_THROWS_AS(resolve_visual_tokens("mode:9", handle, nullptr), std::invalid_argument);
    REQUIRE_THROWS_AS(resolve_visual_tokens("reference-front", handle, nullptr),
                      std::invalid_argument);

    const auto opt_handle = load_backend("optimal-mixture", schedule);
    REQUIRE_THROWS_AS(resolve_visual_tokens("mode:0", opt_handle, nullptr),
                      std::invalid_argument);
}

TEST_CASE("backend horizon must match the schedule") {
    const auto schedule = make_schedule(500, ScheduleFamily::Linear, {});
    REQUIRE_THROWS_AS(load_backend(testsup::trained_mixture_backend_path(), schedule),
                      std::invalid_argument);
}

TEST_CASE("toy 3d run converges toward the demo target") {
    // short run; the acceptance suite exercises the full 2000-step contract
    const auto& schedule = testsup::schedule1000();
    VoxelRenderer renderer;
    const auto target = make_target_scene(renderer);
    RenderSource source(std::make_shared<VoxelRenderer>(renderer), target);
    ToyTrainConfig tc;
    tc.steps = 1500;
    tc.batch = 8;
    auto net = train_toy_denoiser(source, schedule, tc, 31);
    net.set_meta("{\"dataset\":\"renders\"}");
    const auto dir = fresh_dir("run3d");
    const auto weights = (dir / "image_toy.bin").string();
    net.save(weights);

    FlatConfig flat;
    flat.set("backend", weights);
    flat.set("sgc.reference_scene", "demo");
    flat.set("run.iterations", 250);
    flat.set("run.snapshot_every", 200);
    flat.set("run.seed", 9);
    flat.set("run.out", (dir / "out").string());
    const auto cfg = ExperimentConfig::resolve("distill3d-toy", flat);
    const auto record = run_3d_toy(cfg);
    REQUIRE(record.status == "completed");
    REQUIRE(record.final_metrics.at("pearson_front") > 0.6);
    REQUIRE(record.final_metrics.at("pearson_back") > 0.6);
    const auto table = load_csv(record.metrics_path);
    REQUIRE(table.rows.size() == 250);
    // sgc component columns present and finite
    for (const auto& col : {"sgc_depth", "sgc_normal", "sgc_semantic", "sgc_reward"}) {
        for (double v : table.column(col)) REQUIRE(std::isfinite(v));
    }
    // window annealing column collapses after the warmup third
    const auto t_max = table.column("t_max");
    REQUIRE(t_max.front() == Catch::Approx(0.98));
    REQUIRE(t_max.back() == Catch::Approx(0.78));
}

TEST_CASE("report renders summaries, curves and the snapshot grid") {
    const auto out = fresh_dir("report_run");
    const auto cfg = make_2d_config(out.string(), 3, "csm", 12, "optimal-mixture");
    run_2d_distillation(cfg);
    const auto report_dir = fresh_dir("report_out");
    const auto outputs = report({out.string()}, report_dir.string());
    REQUIRE(fs::exists(report_dir / "summary.csv"));
    bool has_curve = false, has_grid = false;
    for (const auto& o : outputs) {
        has_curve |= o.find("curve_") != std::string::npos;
        has_grid |= o.find("snapshot_grid") != std::string::npos;
    }
    REQUIRE(has_curve);
    REQUIRE(has_grid);

    REQUIRE_THROWS(report({(fs::temp_directory_path() / "no_such_run").string()},
                          report_dir.string()));
    REQUIRE_THROWS_AS(report({}, report_dir.string()), std::invalid_argument);
}

TEST_CASE("png codec round trips quantized images") {
    std::mt19937_64 rng(41);
    for (auto shape : {std::vector<std::size_t>{3, 5, 7}, std::vector<std::size_t>{1, 6, 4}}) {
        Tensor img(shape);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& v : img) v = u(rng);
        const auto bytes = encode_png(img);
        const Tensor back = decode_png(bytes);
        REQUIRE(back.shape() == shape);
        REQUIRE(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
    }
    REQUIRE_THROWS(decode_png({1, 2, 3}));
}

// -- external adapter seam ----------------------------------------------------

namespace {

// serves the adapter protocol backed by the closed-form mixture denoiser
class MockAdapterServer {
public:
    MockAdapterServer()
        : schedule_(make_schedule(1000, ScheduleFamily::ScaledLinear, {8.5e-4, 1.2e-2})),
          backend_(standard_mixture2d(), schedule_) {
        server_.Get("/capabilities", [&](const httplib::Request&, httplib::Response& res) {
            nlohmann::json j;
            j["latent_shape"] = std::vector<std::size_t>{2};
            j["horizon"] = 1000;
            j["supports_visual_condition"] = false;
            j["supports_perturbed_attention"] = false;
            j["concurrent_queries"] = true;
            res.set_content(j.dump(), "application/json");
        });
        server_.Get("/schedule", [&](const httplib::Request&, httplib::Response& res) {
            nlohmann::json j;
            j["beta"] = schedule_.betas();
            j["alpha_bar"] = schedule_.alpha_bars();
            res.set_content(j.dump(), "application/json");
        });
        server_.Post("/predict", [&](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            DenoiserQuery q;
            q.x = Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                         j.at("x").get<std::vector<double>>());
            q.t = j.at("t").get<int>();
            if (!j.at("text").is_null()) q.conditions.text = j.at("text").get<int>();
            nlohmann::json out;
            out["eps"] = backend_.predict(q).raw();
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/embed_visual", [&](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            const auto img = j.at("image").get<std::vector<double>>();
            // mean token stub: 4 tokens of width 2
            double mean = 0.0;
            for (double v : img) mean += v / double(img.size());
            nlohmann::json out;
            out["shape"] = std::vector<std::size_t>{4, 2};
            out["tokens"] = std::vector<double>(8, mean);
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            std::mt19937_64 rng(j.at("seed").get<uint64_t>());
            std::uniform_real_distribution<double> u(0.0, 1.0);
            nlohmann::json out;
            out["shape"] = std::vector<std::size_t>{2};
            out["image"] = std::vector<double>{u(rng), u(rng)};
            res.set_content(out.dump(), "application/json");
        });
        // identity latent codec
        server_.Post("/encode", [&](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            nlohmann::json out;
            out["latent"] = j.at("image");
            out["shape"] = j.at("shape");
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/decode", [&](const httplib::Request& req, httplib::Response& res) {
            const auto j = nlohmann::json::parse(req.body);
            nlohmann::json out;
            out["image"] = j.at("latent");
            out["shape"] = j.at("shape");
            res.set_content(out.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~MockAdapterServer() {
        server_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    const DiffusionSchedule& schedule() const { return schedule_; }
    const OptimalMixtureDenoiser& backend() const { return backend_; }

private:
    DiffusionSchedule schedule_;
    OptimalMixtureDenoiser backend_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace

TEST_CASE("external adapter requires the environment opt-in") {
    ::unsetenv(kAdapterUrlEnv);
    REQUIRE_THROWS_AS(external_adapter("sd15", "cpu"), BackendUnavailable);
    ::setenv(kAdapterUrlEnv, "http://127.0.0.1:1", 1);  // nothing listens there
    REQUIRE_THROWS_AS(external_adapter("sd15", "cpu"), BackendUnavailable);
    ::unsetenv(kAdapterUrlEnv);
}

TEST_CASE("adapter speaks the wire protocol and matches the local backend") {
    MockAdapterServer mock;
    const ExternalAdapter adapter(mock.url(), "sd15", "cpu");

    const auto caps = adapter.capabilities();
    REQUIRE(caps.latent_shape == std::vector<std::size_t>{2});
    REQUIRE(caps.horizon == 1000);

    // schedule arrays match the locally constructed scaled-linear schedule
    const auto remote = adapter.schedule();
    const auto local = make_schedule(1000, ScheduleFamily::ScaledLinear, {8.5e-4, 1.2e-2});
    for (int t = 1; t <= 1000; ++t) {
        REQUIRE(std::abs(remote.alpha_bar(t) - local.alpha_bar(t)) < 1e-6);
    }

    // predictions round trip through JSON exactly
    std::mt19937_64 rng(51);
    const DenoiserQuery q{random_normal<double>({2}, rng), 444, ConditionSet::text_only(1),
                          false};
    const Tensor via_http = adapter.predict(q);
    const Tensor direct = mock.backend().predict(q);
    REQUIRE(max_abs_diff(via_http, direct) < 1e-12);

    // interface substitutability: the same loss path runs on the adapter
    LossConfig cfg;
    cfg.mode = LossMode::Csm;
    cfg.delta_t = 50;
    const Tensor x0({2}, {0.4, 0.1});
    const auto through_adapter =
        csm_gradient(x0, 250, ConditionSet::text_only(1), adapter, cfg, mock.schedule());
    const auto local_grad =
        csm_gradient(x0, 250, ConditionSet::text_only(1), mock.backend(), cfg, mock.schedule());
    REQUIRE(rel_l2(through_adapter.grad, local_grad.grad) < 1e-12);

    // identity codec
    const Tensor img({2}, {0.25, 0.75});
    REQUIRE(adapter.decode(adapter.encode(img)) == img);

    // self-guidance seam: generation and visual embedding round the wire
    const Tensor generated = adapter.generate("a prompt", 50, 7);
    REQUIRE(generated.shape() == std::vector<std::size_t>{2});
    REQUIRE(generated.all_finite());
    const Tensor tokens = adapter.embed_visual(generated);
    REQUIRE(tokens.shape() == std::vector<std::size_t>{4, 2});
}
