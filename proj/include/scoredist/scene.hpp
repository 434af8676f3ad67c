#pragma once

// Differentiable-renderer abstraction g(theta, c) with two desk-scale
// implementations:
//   - LatentImageRenderer: theta IS the image, pose ignored; used by the 2D
//     distillation experiments and 2D editing
//   - VoxelRenderer: low-resolution orthographic ray marcher over a cubic
//     density/color grid with front-to-back alpha compositing on a white
//     background; exercises genuine pose-dependent structure
// A third-party splatting renderer can plug in behind the same interface:
// render must be a pure deterministic function of (theta, pose) and
// render_vjp must return d(loss)/d(theta) given d(loss)/d(image).

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoredist/tensor.hpp"

namespace scoredist {

struct ParamLayout {
    struct Slice {
        std::string name;
        std::size_t offset = 0;
        std::size_t size = 0;
    };
    std::vector<Slice> slices;

    const Slice& find(const std::string& name) const {
        for (const auto& s : slices) {
            if (s.name == name) return s;
        }
        throw std::invalid_argument("parameter layout has no slice named " + name);
    }

    // slices must be disjoint and cover [0, total)
    void validate(std::size_t total) const {
        std::size_t expect = 0;
        for (const auto& s : slices) {
            if (s.offset != expect) throw std::logic_error("parameter layout has a gap");
            expect += s.size;
        }
        if (expect != total) throw std::logic_error("parameter layout does not cover values");
    }
};

struct SceneParameters {
    Tensor values;  // flat parameter vector theta
    ParamLayout layout;

    void validate() const {
        if (!values.all_finite()) throw std::invalid_argument("scene parameters non-finite");
        layout.validate(values.size());
    }
};

enum class CanonicalView { Front, Right, Back, Left };

inline const char* to_string(CanonicalView v) {
    switch (v) {
        case CanonicalView::Front: return "front";
        case CanonicalView::Right: return "right";
        case CanonicalView::Back: return "back";
        case CanonicalView::Left: return "left";
    }
    return "?";
}

// Canonical tags map to azimuths front=0, right=90, back=180, left=270.
struct CameraPose {
    double azimuth_deg = 0.0;    // in [0, 360)
    double elevation_deg = 0.0;
    std::optional<CanonicalView> tag;

    static CameraPose canonical(CanonicalView v) {
        double az = 0.0;
        switch (v) {
            case CanonicalView::Front: az = 0.0; break;
            case CanonicalView::Right: az = 90.0; break;
            case CanonicalView::Back: az = 180.0; break;
            case CanonicalView::Left: az = 270.0; break;
        }
        return CameraPose{az, 0.0, v};
    }
};

class Renderer {
public:
    virtual ~Renderer() = default;
    virtual Tensor render(const SceneParameters& theta, const CameraPose& pose) const = 0;
    // d(loss)/d(theta) given d(loss)/d(image) at (theta, pose)
    virtual Tensor render_vjp(const SceneParameters& theta, const CameraPose& pose,
                              const Tensor& grad_image) const = 0;
    virtual std::vector<std::size_t> image_shape() const = 0;
    virtual SceneParameters init_parameters(uint64_t seed) const = 0;
    virtual std::string id() const = 0;
};

inline Tensor render(const SceneParameters& theta, const CameraPose& pose,
                     const Renderer& renderer) {
    theta.validate();
    Tensor img = renderer.render(theta, pose);
    if (img.shape() != renderer.image_shape()) {
        throw std::runtime_error("renderer returned unexpected image shape");
    }
    return img;
}

// Four fixed views in the arrangement [[front, right], [left, back]],
// row-major order front, right, left, back.
struct ViewGrid {
    std::array<Tensor, 4> views;
    std::array<CameraPose, 4> cameras;

    static constexpr std::array<CanonicalView, 4> order = {
        CanonicalView::Front, CanonicalView::Right, CanonicalView::Left, CanonicalView::Back};
};

inline ViewGrid render_grid(const SceneParameters& theta, const Renderer& renderer) {
    ViewGrid grid;
    for (std::size_t i = 0; i < 4; ++i) {
        grid.cameras[i] = CameraPose::canonical(ViewGrid::order[i]);
        grid.views[i] = render(theta, grid.cameras[i], renderer);
    }
    return grid;
}

// 2x2 composite of the grid views; expects [c,h,w] views.
inline Tensor compose_grid(const ViewGrid& grid) {
    const auto& shape = grid.views[0].shape();
    if (shape.size() != 3) throw std::invalid_argument("compose_grid: [c,h,w] views required");
    const std::size_t c = shape[0], h = shape[1], w = shape[2];
    Tensor out({c, 2 * h, 2 * w});
    for (std::size_t v = 0; v < 4; ++v) {
        const std::size_t r0 = (v / 2) * h, c0 = (v % 2) * w;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    out[(ch * 2 * h + (r0 + y)) * 2 * w + (c0 + x)] =
                        grid.views[v][(ch * h + y) * w + x];
                }
            }
        }
    }
    return out;
}

// Splits a composite-image gradient back into per-view gradients.
inline std::array<Tensor, 4> split_grid_gradient(const Tensor& grad_composite,
                                                 const std::vector<std::size_t>& view_shape) {
    const std::size_t c = view_shape[0], h = view_shape[1], w = view_shape[2];
    std::array<Tensor, 4> out;
    for (std::size_t v = 0; v < 4; ++v) {
        out[v] = Tensor(view_shape);
        const std::size_t r0 = (v / 2) * h, c0 = (v % 2) * w;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    out[v][(ch * h + y) * w + x] =
                        grad_composite[(ch * 2 * h + (r0 + y)) * 2 * w + (c0 + x)];
                }
            }
        }
    }
    return out;
}

// theta is the image itself; pose independent.
class LatentImageRenderer : public Renderer {
public:
    explicit LatentImageRenderer(std::vector<std::size_t> shape, double init_stddev = 0.1)
        : shape_(std::move(shape)), init_stddev_(init_stddev) {
        if (shape_.empty()) throw std::invalid_argument("latent image shape must be non-empty");
    }

    Tensor render(const SceneParameters& theta, const CameraPose&) const override {
        return theta.values.reshaped(shape_);
    }

    Tensor render_vjp(const SceneParameters& theta, const CameraPose&,
                      const Tensor& grad_image) const override {
        return grad_image.reshaped(theta.values.shape());
    }

    std::vector<std::size_t> image_shape() const override { return shape_; }

    SceneParameters init_parameters(uint64_t seed) const override {
        std::mt19937_64 rng(seed);
        std::size_t n = 1;
        for (auto s : shape_) n *= s;
        SceneParameters p;
        p.values = random_normal<double>({n}, rng, init_stddev_);
        p.layout.slices = {{"image", 0, n}};
        return p;
    }

    std::string id() const override { return "latent-image"; }

private:
    std::vector<std::size_t> shape_;
    double init_stddev_;
};

// Orthographic absorption-emission ray marcher. Parameters are density
// logits and color logits, one of each per cell; per-sample occupancy and
// color come from trilinear interpolation of the sigmoid-squashed grids,
// alpha per sample is 1 - exp(-kappa * occupancy * step), and pixels
// composite front to back over a white background. Everything is smooth in
// theta, so analytic gradients match central differences tightly.
class VoxelRenderer : public Renderer {
public:
    struct Options {
        std::size_t grid = 12;        // cells per axis (<= 32)
        std::size_t pixels = 16;      // image side (<= 64)
        std::size_t ray_samples = 28;
        double kappa = 9.0;           // density scale
        double span = 1.2;            // image half-width in world units
        double march = 1.8;           // ray half-length
        double background = 1.0;      // white
        double init_density_logit = -2.5;
        double init_noise = 0.3;
    };

    VoxelRenderer() : VoxelRenderer(Options()) {}

    explicit VoxelRenderer(Options opt) : opt_(opt) {
        if (opt_.grid < 2 || opt_.grid > 32) throw std::invalid_argument("voxel grid in [2,32]");
        if (opt_.pixels < 2 || opt_.pixels > 64) {
            throw std::invalid_argument("voxel image side in [2,64]");
        }
    }

    const Options& options() const { return opt_; }
    std::size_t cells() const { return opt_.grid * opt_.grid * opt_.grid; }

    Tensor render(const SceneParameters& theta, const CameraPose& pose) const override {
        return run_(theta, pose, nullptr, nullptr);
    }

    Tensor render_vjp(const SceneParameters& theta, const CameraPose& pose,
                      const Tensor& grad_image) const override {
        Tensor grad_theta = Tensor::zeros_like(theta.values);
        run_(theta, pose, &grad_image, &grad_theta);
        return grad_theta;
    }

    std::vector<std::size_t> image_shape() const override {
        return {1, opt_.pixels, opt_.pixels};
    }

    SceneParameters init_parameters(uint64_t seed) const override {
        std::mt19937_64 rng(seed);
        const std::size_t n = cells();
        SceneParameters p;
        p.values = Tensor({2 * n});
        std::normal_distribution<double> noise(0.0, opt_.init_noise);
        for (std::size_t i = 0; i < n; ++i) {
            p.values[i] = opt_.init_density_logit + noise(rng);
        }
        for (std::size_t i = n; i < 2 * n; ++i) p.values[i] = noise(rng);
        p.layout.slices = {{"density", 0, n}, {"color", n, n}};
        return p;
    }

    std::string id() const override { return "voxel"; }

private:
    static double sigmoid_(double v) { return 1.0 / (1.0 + std::exp(-v)); }

    struct Basis {
        double dir[3], right[3], up[3];
    };

    static Basis basis_(const CameraPose& pose) {
        const double az = pose.azimuth_deg * M_PI / 180.0;
        const double el = pose.elevation_deg * M_PI / 180.0;
        Basis b;
        // camera sits at azimuth/elevation looking at the origin
        b.dir[0] = -std::cos(el) * std::cos(az);
        b.dir[1] = -std::cos(el) * std::sin(az);
        b.dir[2] = -std::sin(el);
        b.right[0] = -std::sin(az);
        b.right[1] = std::cos(az);
        b.right[2] = 0.0;
        b.up[0] = b.right[1] * b.dir[2] - b.right[2] * b.dir[1];
        b.up[1] = b.right[2] * b.dir[0] - b.right[0] * b.dir[2];
        b.up[2] = b.right[0] * b.dir[1] - b.right[1] * b.dir[0];
        return b;
    }

    // trilinear sample of a sigmoid-squashed grid; returns value and, when
    // grad is given, accumulates d(value)/d(logit) contributions scaled by gw
    double sample_(const double* grid_vals, const double p[3], double* grad, double gw) const {
        const double n = double(opt_.grid);
        double g[3];
        for (int a = 0; a < 3; ++a) g[a] = (p[a] + 1.0) * 0.5 * n - 0.5;
        int i0[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
            const double fl = std::floor(g[a]);
            i0[a] = static_cast<int>(fl);
            f[a] = g[a] - fl;
        }
        double value = 0.0;
        for (int dx = 0; dx < 2; ++dx) {
            const int ix = i0[0] + dx;
            if (ix < 0 || ix >= int(opt_.grid)) continue;
            const double wx = dx ? f[0] : 1.0 - f[0];
            for (int dy = 0; dy < 2; ++dy) {
                const int iy = i0[1] + dy;
                if (iy < 0 || iy >= int(opt_.grid)) continue;
                const double wy = dy ? f[1] : 1.0 - f[1];
                for (int dz = 0; dz < 2; ++dz) {
                    const int iz = i0[2] + dz;
                    if (iz < 0 || iz >= int(opt_.grid)) continue;
                    const double w = wx * wy * (dz ? f[2] : 1.0 - f[2]);
                    const std::size_t idx =
                        (static_cast<std::size_t>(ix) * opt_.grid + static_cast<std::size_t>(iy)) *
                            opt_.grid +
                        static_cast<std::size_t>(iz);
                    const double s = sigmoid_(grid_vals[idx]);
                    value += w * s;
                    if (grad) grad[idx] += gw * w * s * (1.0 - s);
                }
            }
        }
        return value;
    }

    Tensor run_(const SceneParameters& theta, const CameraPose& pose, const Tensor* grad_image,
                Tensor* grad_theta) const {
        const std::size_t n = cells();
        if (theta.values.size() != 2 * n) {
            throw std::invalid_argument("voxel renderer expects 2*grid^3 parameters");
        }
        const double* density = theta.values.data();
        const double* color = theta.values.data() + n;
        const Basis b = basis_(pose);
        const std::size_t px = opt_.pixels;
        const std::size_t S = opt_.ray_samples;
        const double h = 2.0 * opt_.march / double(S);
        Tensor image({1, px, px});

        std::vector<double> occ(S), col(S), alpha(S), trans(S + 1);
        std::vector<std::array<double, 3>> pts(S);

        for (std::size_t row = 0; row < px; ++row) {
            // row 0 is the top of the image (+up direction)
            const double yo = opt_.span - (double(row) + 0.5) * 2.0 * opt_.span / double(px);
            for (std::size_t colx = 0; colx < px; ++colx) {
                const double xo = -opt_.span + (double(colx) + 0.5) * 2.0 * opt_.span / double(px);
                trans[0] = 1.0;
                double pixel = 0.0;
                for (std::size_t s = 0; s < S; ++s) {
                    const double tau = -opt_.march + (double(s) + 0.5) * h;
                    for (int a = 0; a < 3; ++a) {
                        pts[s][a] = xo * b.right[a] + yo * b.up[a] + tau * b.dir[a];
                    }
                    occ[s] = sample_(density, pts[s].data(), nullptr, 0.0);
                    col[s] = sample_(color, pts[s].data(), nullptr, 0.0);
                    alpha[s] = 1.0 - std::exp(-opt_.kappa * occ[s] * h);
                    pixel += trans[s] * alpha[s] * col[s];
                    trans[s + 1] = trans[s] * (1.0 - alpha[s]);
                }
                pixel += trans[S] * opt_.background;
                image[row * px + colx] = pixel;

                if (grad_image && grad_theta) {
                    const double gpix = (*grad_image)[row * px + colx];
                    if (gpix == 0.0) continue;
                    // suffix[s]: contribution of samples after s plus background
                    double suffix = trans[S] * opt_.background;
                    for (std::size_t si = S; si-- > 0;) {
                        const double g_col = gpix * trans[si] * alpha[si];
                        // d pixel / d alpha_s = T_s c_s - suffix_s / (1 - alpha_s)
                        const double g_alpha =
                            gpix * (trans[si] * col[si] - suffix / (1.0 - alpha[si]));
                        const double g_occ =
                            g_alpha * opt_.kappa * h * std::exp(-opt_.kappa * occ[si] * h);
                        sample_(density, pts[si].data(), grad_theta->data(), g_occ);
                        sample_(color, pts[si].data(), grad_theta->data() + n, g_col);
                        suffix += trans[si] * alpha[si] * col[si];
                    }
                }
            }
        }
        return image;
    }

    Options opt_;
};

}  // namespace scoredist
