#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "scoredist/io/checkpoint.hpp"
#include "scoredist/oracles.hpp"
#include "scoredist/scene.hpp"
#include "scoredist/sgc.hpp"

using namespace scoredist;

namespace {

VoxelRenderer small_renderer() {
    VoxelRenderer::Options opt;
    opt.grid = 4;
    opt.pixels = 6;
    opt.ray_samples = 10;
    return VoxelRenderer(opt);
}

ViewGrid grid_from(const std::array<Tensor, 4>& views) {
    ViewGrid g;
    g.views = views;
    for (std::size_t v = 0; v < 4; ++v) g.cameras[v] = CameraPose::canonical(ViewGrid::order[v]);
    return g;
}

Tensor smooth_image(std::size_t h, std::size_t w, uint64_t seed, double offset = 0.0) {
    Tensor img({1, h, w});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            img[y * w + x] = offset + 0.4 * std::sin(0.7 * double(x) + 0.3 * double(y)) + u(rng);
        }
    }
    return img;
}

// functional stubs for the extractor-level identity tests
class IdentityDepth : public DepthExtractor {
public:
    Tensor depth(const Tensor& image) const override {
        return image.reshaped({image.shape()[1], image.shape()[2]});
    }
    Tensor vjp(const Tensor& image, const Tensor& g) const override {
        return g.reshaped(image.shape());
    }
};

class IdentityNormals : public NormalExtractor {
public:
    Tensor normals(const Tensor& image) const override { return image; }
    Tensor vjp(const Tensor&, const Tensor& g) const override { return g; }
};

}  // namespace

TEST_CASE("latent image renderer is the identity map") {
    LatentImageRenderer renderer({1, 4, 4});
    auto theta = renderer.init_parameters(5);
    const auto img = render(theta, CameraPose::canonical(CanonicalView::Front), renderer);
    REQUIRE(img.shape() == std::vector<std::size_t>{1, 4, 4});
    REQUIRE(img.raw() == theta.values.raw());
    // pose independent
    const auto img2 = render(theta, CameraPose{123.0, 45.0, std::nullopt}, renderer);
    REQUIRE(img == img2);
    // vjp is the identity as well
    std::mt19937_64 rng(6);
    const Tensor g = random_normal<double>({1, 4, 4}, rng);
    REQUIRE(renderer.render_vjp(theta, CameraPose{}, g).raw() == g.raw());
}

TEST_CASE("empty voxel grid renders the white background") {
    const auto renderer = small_renderer();
    SceneParameters theta;
    theta.values = Tensor({2 * renderer.cells()}, -40.0);
    theta.layout.slices = {{"density", 0, renderer.cells()},
                           {"color", renderer.cells(), renderer.cells()}};
    const auto img = render(theta, CameraPose::canonical(CanonicalView::Front), renderer);
    for (double v : img) REQUIRE(v == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("voxel renders are pure functions of pose and parameters") {
    const auto renderer = small_renderer();
    const auto theta = renderer.init_parameters(7);
    const CameraPose pose{73.0, 21.0, std::nullopt};
    REQUIRE(renderer.render(theta, pose) == renderer.render(theta, pose));
}

TEST_CASE("voxel gradient matches central differences") {
    const auto renderer = small_renderer();
    auto theta = renderer.init_parameters(8);
    // make some cells meaningfully occupied so gradients are non-trivial
    for (std::size_t i = 0; i < renderer.cells(); i += 7) theta.values[i] = 1.0;
    const CameraPose pose{30.0, 15.0, std::nullopt};

    std::mt19937_64 rng(9);
    const Tensor weights = random_normal<double>(renderer.image_shape(), rng);
    auto objective = [&](const SceneParameters& p) {
        return dot(renderer.render(p, pose), weights);
    };
    const Tensor analytic = renderer.render_vjp(theta, pose, weights);

    std::uniform_int_distribution<std::size_t> pick(0, theta.values.size() - 1);
    const double h = 1e-5;
    int checked = 0;
    while (checked < 10) {
        const std::size_t i = pick(rng);
        if (std::abs(analytic[i]) < 1e-12) continue;  // probe informative coordinates
        SceneParameters probe = theta;
        probe.values[i] += h;
        const double fp = objective(probe);
        probe.values[i] = theta.values[i] - h;
        const double fm = objective(probe);
        const double fd = (fp - fm) / (2.0 * h);
        REQUIRE(analytic[i] == Catch::Approx(fd).epsilon(1e-4).margin(1e-10));
        ++checked;
    }
}

TEST_CASE("view grids have the canonical arrangement") {
    LatentImageRenderer flat({1, 3, 3});
    const auto theta = flat.init_parameters(11);
    const auto grid = render_grid(theta, flat);
    for (std::size_t v = 1; v < 4; ++v) REQUIRE(grid.views[v] == grid.views[0]);

    REQUIRE(grid.cameras[0].azimuth_deg == 0.0);
    REQUIRE(grid.cameras[1].azimuth_deg == 90.0);
    REQUIRE(grid.cameras[2].azimuth_deg == 270.0);  // left
    REQUIRE(grid.cameras[3].azimuth_deg == 180.0);  // back
    REQUIRE(grid.cameras[0].tag == CanonicalView::Front);

    const auto renderer = small_renderer();
    auto scene = renderer.init_parameters(12);
    // one-sided occupancy: fill only cells with the largest x index
    const std::size_t n = renderer.options().grid;
    for (std::size_t iy = 0; iy < n; ++iy) {
        for (std::size_t iz = 0; iz < n; ++iz) {
            scene.values[((n - 1) * n + iy) * n + iz] = 4.0;
            scene.values[renderer.cells() + ((n - 1) * n + iy) * n + iz] = -4.0;
        }
    }
    const auto vgrid = render_grid(scene, renderer);
    REQUIRE(max_abs_diff(vgrid.views[0], vgrid.views[3]) > 1e-3);  // front vs back
    // grid views equal independent render calls bit-exact
    const auto front = render(scene, CameraPose::canonical(CanonicalView::Front), renderer);
    REQUIRE(vgrid.views[0] == front);
}

TEST_CASE("grid composition and its gradient split are adjoint") {
    std::mt19937_64 rng(13);
    std::array<Tensor, 4> views;
    for (auto& v : views) v = random_normal<double>({1, 3, 4}, rng);
    const auto grid = grid_from(views);
    const Tensor comp = compose_grid(grid);
    REQUIRE(comp.shape() == std::vector<std::size_t>{1, 6, 8});
    // front occupies the top-left quadrant
    REQUIRE(comp[0] == views[0][0]);
    const auto parts = split_grid_gradient(comp, {1, 3, 4});
    for (std::size_t v = 0; v < 4; ++v) REQUIRE(parts[v] == views[v]);
}

// -- sgc components ---------------------------------------------------------

TEST_CASE("semantic loss vanishes at equality and scales with the difference") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(4, 4, 20 + v);
    const auto grid = grid_from(views);
    MultiViewReference ref;
    ref.views = views;
    const IdentityFeatures identity;
    REQUIRE(semantic_loss(grid, ref, identity).value == 0.0);

    // unit difference with the identity extractor: per-view mean of n
    MultiViewReference shifted = ref;
    for (auto& v : shifted.views) {
        for (auto& x : v) x += 1.0;
    }
    const auto term = semantic_loss(grid, shifted, identity);
    REQUIRE(term.value == Catch::Approx(16.0));
}

TEST_CASE("semantic gradient matches finite differences") {
    const std::vector<std::size_t> shape{1, 4, 4};
    PooledProjectionFeatures extractor(shape, 8, 77);
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(4, 4, 30 + v);
    MultiViewReference ref;
    for (std::size_t v = 0; v < 4; ++v) ref.views[v] = smooth_image(4, 4, 40 + v);

    const auto term = semantic_loss(grid_from(views), ref, extractor);
    auto value_at = [&](const Tensor& v0) {
        auto probe = views;
        probe[0] = v0;
        return semantic_loss(grid_from(probe), ref, extractor).value;
    };
    const Tensor fd = finite_difference_grad(value_at, views[0], 1e-6);
    REQUIRE(rel_l2(term.grad[0], fd) < 1e-4);
}

TEST_CASE("depth loss is the negative pearson correlation with affine invariance") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(5, 5, 50 + v);
    const auto grid = grid_from(views);
    const LuminanceDepth lum;

    MultiViewReference same;
    same.views = views;
    REQUIRE(depth_loss(grid, same, lum).value == Catch::Approx(-1.0).margin(1e-12));

    // positive affine transform of the reference leaves the loss at -1
    MultiViewReference affine;
    for (std::size_t v = 0; v < 4; ++v) {
        affine.views[v] = views[v] * 2.5;
        for (auto& x : affine.views[v]) x += 0.7;
    }
    REQUIRE(depth_loss(grid, affine, lum).value == Catch::Approx(-1.0).margin(1e-10));

    // anti-correlated maps give +1
    MultiViewReference anti;
    for (std::size_t v = 0; v < 4; ++v) anti.views[v] = views[v] * -1.0;
    REQUIRE(depth_loss(grid, anti, lum).value == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("near-constant depth maps are rejected with the view named") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(5, 5, 60 + v);
    MultiViewReference ref;
    ref.views = views;
    auto flat = views;
    flat[2] = Tensor({1, 5, 5}, 0.5);  // left view constant
    const LuminanceDepth lum;
    try {
        depth_loss(grid_from(flat), ref, lum);
        FAIL("expected DegenerateInputError");
    } catch (const DegenerateInputError& e) {
        REQUIRE(std::string(e.what()).find("left") != std::string::npos);
    }
}

TEST_CASE("depth gradient matches finite differences") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(5, 5, 70 + v);
    MultiViewReference ref;
    for (std::size_t v = 0; v < 4; ++v) ref.views[v] = smooth_image(5, 5, 80 + v);
    const LuminanceDepth lum;
    const auto term = depth_loss(grid_from(views), ref, lum);
    auto value_at = [&](const Tensor& v1) {
        auto probe = views;
        probe[1] = v1;
        return depth_loss(grid_from(probe), ref, lum).value;
    };
    const Tensor fd = finite_difference_grad(value_at, views[1], 1e-6);
    REQUIRE(rel_l2(term.grad[1], fd) < 1e-4);
}

TEST_CASE("normal loss covers the cosine identities") {
    // identity extractor over [3,h,w] fields makes the endpoints exact
    const IdentityNormals identity;
    std::array<Tensor, 4> fields;
    std::mt19937_64 rng(90);
    for (auto& f : fields) f = random_normal<double>({3, 2, 2}, rng);
    MultiViewReference ref;
    ref.views = fields;
    REQUIRE(normal_loss(grid_from(fields), ref, identity).value ==
            Catch::Approx(-1.0).margin(1e-12));

    // positive scaling invariance
    auto scaled = fields;
    for (auto& f : scaled) f *= 3.0;
    REQUIRE(normal_loss(grid_from(scaled), ref, identity).value ==
            Catch::Approx(-1.0).margin(1e-12));

    // opposite fields
    auto opposite = fields;
    for (auto& f : opposite) f *= -1.0;
    REQUIRE(normal_loss(grid_from(opposite), ref, identity).value ==
            Catch::Approx(1.0).margin(1e-12));

    // orthogonal fields
    std::array<Tensor, 4> ex, ey;
    for (std::size_t v = 0; v < 4; ++v) {
        ex[v] = Tensor({3, 1, 2}, {1.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        ey[v] = Tensor({3, 1, 2}, {0.0, 0.0, 1.0, 0.0, 0.0, 0.0});
    }
    MultiViewReference ref_x;
    ref_x.views = ex;
    REQUIRE(normal_loss(grid_from(ey), ref_x, identity).value == Catch::Approx(0.0).margin(1e-12));

    // zero fields are rejected
    std::array<Tensor, 4> zero;
    for (auto& f : zero) f = Tensor({3, 1, 2});
    REQUIRE_THROWS_AS(normal_loss(grid_from(zero), ref_x, identity), DegenerateInputError);
}

TEST_CASE("pseudo-normal gradient matches finite differences") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(5, 5, 100 + v);
    MultiViewReference ref;
    for (std::size_t v = 0; v < 4; ++v) ref.views[v] = smooth_image(5, 5, 110 + v);
    const GradientPseudoNormals extractor;
    const auto term = normal_loss(grid_from(views), ref, extractor);
    auto value_at = [&](const Tensor& v3) {
        auto probe = views;
        probe[3] = v3;
        return normal_loss(grid_from(probe), ref, extractor).value;
    };
    const Tensor fd = finite_difference_grad(value_at, views[3], 1e-6);
    REQUIRE(rel_l2(term.grad[3], fd) < 1e-4);
}

TEST_CASE("reward loss with constant scorer ignores the grid") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(4, 4, 120 + v);
    const ConstantReward constant(1.7);
    const RewardToLoss to_loss;
    const auto term = image_reward_loss(grid_from(views), "any", constant, to_loss);
    REQUIRE(term.value == Catch::Approx(to_loss(1.7)).margin(1e-14));
    for (const auto& g : term.grad) REQUIRE(norm(g) == 0.0);
    // per-view variant: mean of four identical values
    const auto pv = image_reward_loss(grid_from(views), "any", constant, to_loss, true);
    REQUIRE(pv.value == Catch::Approx(to_loss(1.7)).margin(1e-14));
}

TEST_CASE("target-distance reward is minimized when the grid matches the target") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(4, 4, 130 + v);
    const auto grid = grid_from(views);
    const TargetDistanceReward reward(compose_grid(grid));
    const RewardToLoss to_loss;
    const double at_target = image_reward_loss(grid, "p", reward, to_loss).value;

    auto perturbed = views;
    for (auto& x : perturbed[0]) x += 0.2;
    const double off_target = image_reward_loss(grid_from(perturbed), "p", reward, to_loss).value;
    REQUIRE(at_target < off_target);

    // prompt changes the reward value but not the gradient
    const double r1 = reward.score(compose_grid(grid), "a");
    const double r2 = reward.score(compose_grid(grid), "b");
    REQUIRE(r1 != r2);
    REQUIRE(reward.score_grad(compose_grid(grid), "a") ==
            reward.score_grad(compose_grid(grid), "b"));
}

TEST_CASE("reward gradient matches finite differences") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(4, 4, 140 + v);
    MultiViewReference ref;
    for (std::size_t v = 0; v < 4; ++v) ref.views[v] = smooth_image(4, 4, 150 + v);
    const auto grid = grid_from(views);
    const TargetDistanceReward reward(compose_grid(grid_from(ref.views)));
    const RewardToLoss to_loss;
    const auto term = image_reward_loss(grid, "p", reward, to_loss);
    auto value_at = [&](const Tensor& v2) {
        auto probe = views;
        probe[2] = v2;
        return image_reward_loss(grid_from(probe), "p", reward, to_loss).value;
    };
    const Tensor fd = finite_difference_grad(value_at, views[2], 1e-6);
    REQUIRE(rel_l2(term.grad[2], fd) < 1e-4);
}

TEST_CASE("combined sgc loss honors weights and reports the breakdown") {
    std::array<Tensor, 4> views;
    for (std::size_t v = 0; v < 4; ++v) views[v] = smooth_image(6, 6, 160 + v);
    const auto grid = grid_from(views);
    MultiViewReference ref;
    ref.views = views;

    SgcExtractors ex = make_toy_extractors({1, 6, 6}, compose_grid(grid), 170);

    SECTION("zero weights give zero") {
        const auto out = sgc_loss(grid, ref, "p", {0.0, 0.0, 0.0}, ex);
        REQUIRE(out.total == 0.0);
        for (const auto& g : out.grad) REQUIRE(norm(g) == 0.0);
    }
    SECTION("defaults are the configured hyperparameters") {
        const SGCWeights w;
        REQUIRE(w.lambda_geo == 1.0);
        REQUIRE(w.lambda_sem == 4.0);
        REQUIRE(w.lambda_ir == 2.5);
    }
    SECTION("identity reference with a constant scorer") {
        ex.reward = std::make_shared<ConstantReward>(0.3);
        const RewardToLoss to_loss;
        const auto out = sgc_loss(grid, ref, "p", {1.0, 4.0, 2.5}, ex);
        REQUIRE(out.semantic == Catch::Approx(0.0).margin(1e-18));
        REQUIRE(out.depth + out.normal == Catch::Approx(-2.0).margin(1e-10));
        REQUIRE(out.total == Catch::Approx(2.5 * to_loss(0.3) - 2.0).margin(1e-9));
    }
    SECTION("linear in each weight") {
        MultiViewReference other;
        for (std::size_t v = 0; v < 4; ++v) other.views[v] = smooth_image(6, 6, 180 + v);
        const auto base = sgc_loss(grid, other, "p", {1.0, 4.0, 2.5}, ex);
        const auto doubled = sgc_loss(grid, other, "p", {2.0, 4.0, 2.5}, ex);
        REQUIRE(doubled.total - base.total ==
                Catch::Approx(base.depth + base.normal).epsilon(1e-9));
    }
    SECTION("component failures carry the component name") {
        auto flat = views;
        flat[0] = Tensor({1, 6, 6}, 0.25);
        try {
            sgc_loss(grid_from(flat), ref, "p", {1.0, 4.0, 2.5}, ex);
            FAIL("expected failure");
        } catch (const std::runtime_error& e) {
            REQUIRE(std::string(e.what()).find("sgc_loss[depth]") != std::string::npos);
        }
    }
}

TEST_CASE("scene checkpoints and reference grids round trip through disk") {
    namespace fs = std::filesystem;
    const auto renderer = small_renderer();
    const auto theta = renderer.init_parameters(200);
    const auto dir = fs::temp_directory_path() / "scoredist_scene_test";
    fs::create_directories(dir);
    const auto ckpt = (dir / "scene.json").string();
    save_scene_checkpoint(theta, renderer.id(), ckpt);
    const auto [loaded, id] = load_scene_checkpoint(ckpt);
    REQUIRE(id == "voxel");
    REQUIRE(loaded.values == theta.values);
    REQUIRE(loaded.layout.slices.size() == 2);
    REQUIRE(loaded.layout.find("color").offset == renderer.cells());

    MultiViewReference ref;
    const auto grid = render_grid(theta, renderer);
    ref.views = grid.views;
    ref.provenance = "test";
    save_reference(ref, (dir / "ref").string());
    const auto back = load_reference((dir / "ref").string());
    REQUIRE(back.provenance == "test");
    for (std::size_t v = 0; v < 4; ++v) {
        REQUIRE(max_abs_diff(back.views[v], ref.views[v]) < 1.0 / 255.0);
    }
    fs::remove_all(dir);
}
