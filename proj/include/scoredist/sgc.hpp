#pragma once

// Semantic-geometry calibration losses over a four-view grid: human-feedback
// reward guidance, a semantic feature distance, a depth loss (negative
// Pearson correlation, so it is invariant to positive affine transforms of
// either depth map), and a normal loss (negative cosine similarity of the
// flattened normal fields). Every component returns its value together with
// analytic per-view image gradients; the finite-difference oracle in the test
// suite checks those gradients on random smooth inputs.
//
// Aggregation convention: every component is averaged over the four views.
// The reward loss is evaluated on the 2x2 grid composite by default, with a
// per-view variant behind a flag.

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>

#include "scoredist/scene.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct MultiViewReference {
    std::array<Tensor, 4> views;  // aligned to the canonical camera set
    std::string provenance;
};

struct SGCWeights {
    double lambda_geo = 1.0;  // depth + normal
    double lambda_sem = 4.0;
    double lambda_ir = 2.5;

    void validate() const {
        for (double v : {lambda_geo, lambda_sem, lambda_ir}) {
            if (!std::isfinite(v) || v < 0.0) {
                throw std::invalid_argument("sgc weights must be finite and >= 0");
            }
        }
    }
};

// value plus d(value)/d(view image) for each grid view
struct SgcTerm {
    double value = 0.0;
    std::array<Tensor, 4> grad;
};

// -- extractors -------------------------------------------------------------

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual Tensor features(const Tensor& image) const = 0;
    virtual Tensor vjp(const Tensor& image, const Tensor& grad_features) const = 0;
};

class IdentityFeatures : public FeatureExtractor {
public:
    Tensor features(const Tensor& image) const override { return image; }
    Tensor vjp(const Tensor&, const Tensor& g) const override { return g; }
};

// 2x2 average pooling followed by a fixed seeded random projection.
class PooledProjectionFeatures : public FeatureExtractor {
public:
    PooledProjectionFeatures(std::vector<std::size_t> image_shape, std::size_t feature_dim,
                             uint64_t seed)
        : shape_(std::move(image_shape)) {
        if (shape_.size() != 3) throw std::invalid_argument("extractor expects [c,h,w] images");
        pooled_h_ = shape_[1] / 2;
        pooled_w_ = shape_[2] / 2;
        const std::size_t n = shape_[0] * pooled_h_ * pooled_w_;
        std::mt19937_64 rng(seed);
        proj_ = random_normal<double>({feature_dim, n}, rng, 1.0 / std::sqrt(double(n)));
    }

    Tensor features(const Tensor& image) const override {
        const Tensor pooled = pool_(image);
        Tensor out({proj_.shape()[0]});
        for (std::size_t r = 0; r < out.size(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < pooled.size(); ++c) s += proj_.at(r, c) * pooled[c];
            out[r] = s;
        }
        return out;
    }

    Tensor vjp(const Tensor& image, const Tensor& g) const override {
        Tensor g_pool({shape_[0] * pooled_h_ * pooled_w_});
        for (std::size_t c = 0; c < g_pool.size(); ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < g.size(); ++r) s += proj_.at(r, c) * g[r];
            g_pool[c] = s;
        }
        Tensor g_img = Tensor::zeros_like(image);
        const std::size_t h = shape_[1], w = shape_[2];
        for (std::size_t ch = 0; ch < shape_[0]; ++ch) {
            for (std::size_t y = 0; y < pooled_h_; ++y) {
                for (std::size_t x = 0; x < pooled_w_; ++x) {
                    const double gv = g_pool[(ch * pooled_h_ + y) * pooled_w_ + x] / 4.0;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            g_img[(ch * h + 2 * y + dy) * w + 2 * x + dx] += gv;
                        }
                    }
                }
            }
        }
        return g_img;
    }

private:
    Tensor pool_(const Tensor& image) const {
        if (image.shape() != shape_) throw std::invalid_argument("extractor image shape mismatch");
        Tensor out({shape_[0] * pooled_h_ * pooled_w_});
        const std::size_t h = shape_[1], w = shape_[2];
        for (std::size_t ch = 0; ch < shape_[0]; ++ch) {
            for (std::size_t y = 0; y < pooled_h_; ++y) {
                for (std::size_t x = 0; x < pooled_w_; ++x) {
                    double s = 0.0;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            s += image[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                    out[(ch * pooled_h_ + y) * pooled_w_ + x] = s / 4.0;
                }
            }
        }
        return out;
    }

    std::vector<std::size_t> shape_;
    std::size_t pooled_h_, pooled_w_;
    Tensor proj_;
};

class DepthExtractor {
public:
    virtual ~DepthExtractor() = default;
    virtual Tensor depth(const Tensor& image) const = 0;
    virtual Tensor vjp(const Tensor& image, const Tensor& grad_depth) const = 0;
};

// channel-mean luminance as a stand-in depth map
class LuminanceDepth : public DepthExtractor {
public:
    Tensor depth(const Tensor& image) const override {
        if (image.rank() != 3) throw std::invalid_argument("depth extractor expects [c,h,w]");
        const std::size_t c = image.shape()[0], hw = image.size() / c;
        Tensor out({image.shape()[1], image.shape()[2]});
        for (std::size_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) s += image[ch * hw + i];
            out[i] = s / double(c);
        }
        return out;
    }

    Tensor vjp(const Tensor& image, const Tensor& g) const override {
        const std::size_t c = image.shape()[0], hw = image.size() / c;
        Tensor out = Tensor::zeros_like(image);
        for (std::size_t i = 0; i < hw; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + i] = g[i] / double(c);
        }
        return out;
    }
};

class NormalExtractor {
public:
    virtual ~NormalExtractor() = default;
    virtual Tensor normals(const Tensor& image) const = 0;
    virtual Tensor vjp(const Tensor& image, const Tensor& grad_normals) const = 0;
};

// Pseudo-normals from luminance image gradients: channels are the central
// finite differences along x and y (replicated edges) and a constant one.
class GradientPseudoNormals : public NormalExtractor {
public:
    Tensor normals(const Tensor& image) const override {
        if (image.rank() != 3) throw std::invalid_argument("normal extractor expects [c,h,w]");
        const std::size_t h = image.shape()[1], w = image.shape()[2];
        const Tensor lum = lum_.depth(image);
        Tensor out({3, h, w});
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t xm = x == 0 ? 0 : x - 1;
                const std::size_t xp = x + 1 >= w ? w - 1 : x + 1;
                const std::size_t ym = y == 0 ? 0 : y - 1;
                const std::size_t yp = y + 1 >= h ? h - 1 : y + 1;
                out[0 * h * w + y * w + x] = 0.5 * (lum[y * w + xp] - lum[y * w + xm]);
                out[1 * h * w + y * w + x] = 0.5 * (lum[yp * w + x] - lum[ym * w + x]);
                out[2 * h * w + y * w + x] = 1.0;
            }
        }
        return out;
    }

    Tensor vjp(const Tensor& image, const Tensor& g) const override {
        const std::size_t h = image.shape()[1], w = image.shape()[2];
        Tensor g_lum({h, w});
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t xm = x == 0 ? 0 : x - 1;
                const std::size_t xp = x + 1 >= w ? w - 1 : x + 1;
                const std::size_t ym = y == 0 ? 0 : y - 1;
                const std::size_t yp = y + 1 >= h ? h - 1 : y + 1;
                g_lum[y * w + xp] += 0.5 * g[0 * h * w + y * w + x];
                g_lum[y * w + xm] -= 0.5 * g[0 * h * w + y * w + x];
                g_lum[yp * w + x] += 0.5 * g[1 * h * w + y * w + x];
                g_lum[ym * w + x] -= 0.5 * g[1 * h * w + y * w + x];
                // constant z channel carries no gradient
            }
        }
        return lum_.vjp(image, g_lum);
    }

private:
    LuminanceDepth lum_;
};

class RewardModel {
public:
    virtual ~RewardModel() = default;
    virtual double score(const Tensor& image, const std::string& prompt) const = 0;
    virtual Tensor score_grad(const Tensor& image, const std::string& prompt) const = 0;
};

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Toy scorer: negative squared L2 distance to a target image plus a small
// prompt-dependent offset, so rewards are prompt sensitive but the gradient
// is not. The unnormalized sum keeps reward guidance at a magnitude
// comparable to the distillation terms on small images.
class TargetDistanceReward : public RewardModel {
public:
    explicit TargetDistanceReward(Tensor target) : target_(std::move(target)) {}

    double score(const Tensor& image, const std::string& prompt) const override {
        if (!image.same_shape(target_)) {
            throw std::invalid_argument("reward image/target shape mismatch");
        }
        double s = 0.0;
        for (std::size_t i = 0; i < image.size(); ++i) {
            const double d = image[i] - target_[i];
            s += d * d;
        }
        return -s + 0.1 * double(fnv1a(prompt) % 1009) / 1009.0;
    }

    Tensor score_grad(const Tensor& image, const std::string&) const override {
        Tensor g = Tensor::zeros_like(image);
        for (std::size_t i = 0; i < image.size(); ++i) {
            g[i] = -2.0 * (image[i] - target_[i]);
        }
        return g;
    }

private:
    Tensor target_;
};

class ConstantReward : public RewardModel {
public:
    explicit ConstantReward(double value) : value_(value) {}
    double score(const Tensor&, const std::string&) const override { return value_; }
    Tensor score_grad(const Tensor& image, const std::string&) const override {
        return Tensor::zeros_like(image);
    }

private:
    double value_;
};

// Monotone decreasing reward-to-loss map: softplus(-r).
struct RewardToLoss {
    double operator()(double r) const {
        const double z = -r;
        return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0);
    }
    // d loss / d reward
    double derivative(double r) const { return -1.0 / (1.0 + std::exp(r)); }
};

// -- components --------------------------------------------------------------

inline SgcTerm image_reward_loss(const ViewGrid& grid, const std::string& prompt,
                                 const RewardModel& reward, const RewardToLoss& to_loss,
                                 bool per_view = false) {
    SgcTerm term;
    if (per_view) {
        for (std::size_t v = 0; v < 4; ++v) {
            const double r = reward.score(grid.views[v], prompt);
            term.value += to_loss(r) / 4.0;
            term.grad[v] = reward.score_grad(grid.views[v], prompt);
            term.grad[v] *= to_loss.derivative(r) / 4.0;
        }
    } else {
        const Tensor composite = compose_grid(grid);
        const double r = reward.score(composite, prompt);
        term.value = to_loss(r);
        Tensor g = reward.score_grad(composite, prompt);
        g *= to_loss.derivative(r);
        term.grad = split_grid_gradient(g, grid.views[0].shape());
    }
    return term;
}

inline SgcTerm semantic_loss(const ViewGrid& grid, const MultiViewReference& reference,
                             const FeatureExtractor& extractor) {
    SgcTerm term;
    for (std::size_t v = 0; v < 4; ++v) {
        if (!reference.views[v].same_shape(grid.views[v])) {
            throw std::invalid_argument("semantic_loss: reference/grid shape mismatch");
        }
        const Tensor fm = extractor.features(reference.views[v]);
        const Tensor fs = extractor.features(grid.views[v]);
        if (!fm.same_shape(fs)) throw std::invalid_argument("semantic_loss: feature mismatch");
        Tensor diff = fm - fs;
        term.value += dot(diff, diff) / 4.0;
        diff *= -2.0 / 4.0;  // d/dfs of ||fm - fs||^2 / 4
        term.grad[v] = extractor.vjp(grid.views[v], diff);
    }
    return term;
}

namespace detail {

struct PearsonStats {
    double mean_a = 0.0, mean_b = 0.0, suu = 0.0, svv = 0.0, suv = 0.0;
};

inline PearsonStats pearson_stats(const Tensor& a, const Tensor& b) {
    PearsonStats st;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        st.mean_a += a[i];
        st.mean_b += b[i];
    }
    st.mean_a /= double(n);
    st.mean_b /= double(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = a[i] - st.mean_a;
        const double v = b[i] - st.mean_b;
        st.suu += u * u;
        st.svv += v * v;
        st.suv += u * v;
    }
    return st;
}

}  // namespace detail

// Negative Pearson correlation between reference and grid depth maps,
// averaged over views. Degenerate (near-constant) depth maps are rejected
// with the offending view named.
inline SgcTerm depth_loss(const ViewGrid& grid, const MultiViewReference& reference,
                          const DepthExtractor& extractor, double variance_floor = 1e-8) {
    SgcTerm term;
    for (std::size_t v = 0; v < 4; ++v) {
        const Tensor dm = extractor.depth(reference.views[v]);
        const Tensor ds = extractor.depth(grid.views[v]);
        if (!dm.same_shape(ds)) throw std::invalid_argument("depth_loss: depth map mismatch");
        const std::size_t n = dm.size();
        const auto st = detail::pearson_stats(dm, ds);
        const std::string view = to_string(ViewGrid::order[v]);
        if (st.suu / double(n) < variance_floor) {
            throw DegenerateInputError("depth_loss: reference depth nearly constant in view " +
                                       view);
        }
        if (st.svv / double(n) < variance_floor) {
            throw DegenerateInputError("depth_loss: rendered depth nearly constant in view " +
                                       view);
        }
        const double denom = std::sqrt(st.suu * st.svv);
        const double r = st.suv / denom;
        term.value += -r / 4.0;
        // d(-r)/d ds_j = -(u_j / denom - r v_j / svv), then the 1/4 view mean
        Tensor g_ds(dm.shape());
        for (std::size_t i = 0; i < n; ++i) {
            const double u = dm[i] - st.mean_a;
            const double w = ds[i] - st.mean_b;
            g_ds[i] = -(u / denom - r * w / st.svv) / 4.0;
        }
        term.grad[v] = extractor.vjp(grid.views[v], g_ds);
    }
    return term;
}

// Negative cosine similarity between the flattened normal fields, averaged
// over views.
inline SgcTerm normal_loss(const ViewGrid& grid, const MultiViewReference& reference,
                           const NormalExtractor& extractor, double norm_floor = 1e-12) {
    SgcTerm term;
    for (std::size_t v = 0; v < 4; ++v) {
        const Tensor nm = extractor.normals(reference.views[v]);
        const Tensor ns = extractor.normals(grid.views[v]);
        if (!nm.same_shape(ns)) throw std::invalid_argument("normal_loss: field mismatch");
        const double norm_m = norm(nm);
        const double norm_s = norm(ns);
        const std::string view = to_string(ViewGrid::order[v]);
        if (norm_m < norm_floor) {
            throw DegenerateInputError("normal_loss: zero reference normal field in view " + view);
        }
        if (norm_s < norm_floor) {
            throw DegenerateInputError("normal_loss: zero rendered normal field in view " + view);
        }
        const double c = dot(nm, ns) / (norm_m * norm_s);
        term.value += -c / 4.0;
        // d(-cos)/d ns = -(nm / (|nm||ns|) - cos ns / |ns|^2), then the view mean
        Tensor g_ns = Tensor::zeros_like(ns);
        for (std::size_t i = 0; i < ns.size(); ++i) {
            g_ns[i] = -(nm[i] / (norm_m * norm_s) - c * ns[i] / (norm_s * norm_s)) / 4.0;
        }
        term.grad[v] = extractor.vjp(grid.views[v], g_ns);
    }
    return term;
}

// -- combination --------------------------------------------------------------

struct SgcExtractors {
    std::shared_ptr<FeatureExtractor> semantic;
    std::shared_ptr<DepthExtractor> depth;
    std::shared_ptr<NormalExtractor> normal;
    std::shared_ptr<RewardModel> reward;
    RewardToLoss to_loss;
    bool reward_per_view = false;
};

inline SgcExtractors make_toy_extractors(const std::vector<std::size_t>& view_shape,
                                         Tensor reward_target, uint64_t seed = 7001,
                                         std::size_t feature_dim = 32) {
    SgcExtractors ex;
    ex.semantic = std::make_shared<PooledProjectionFeatures>(view_shape, feature_dim, seed);
    ex.depth = std::make_shared<LuminanceDepth>();
    ex.normal = std::make_shared<GradientPseudoNormals>();
    ex.reward = std::make_shared<TargetDistanceReward>(std::move(reward_target));
    return ex;
}

struct SgcBreakdown {
    double total = 0.0;
    double depth = 0.0;
    double normal = 0.0;
    double semantic = 0.0;
    double reward = 0.0;
    std::array<Tensor, 4> grad;
};

// lambda_geo (depth + normal) + lambda_sem semantic + lambda_ir reward, with
// per-component values in the breakdown. Component failures are rethrown
// with the component named.
inline SgcBreakdown sgc_loss(const ViewGrid& grid, const MultiViewReference& reference,
                             const std::string& prompt, const SGCWeights& weights,
                             const SgcExtractors& extractors) {
    weights.validate();
    SgcBreakdown out;
    for (auto& g : out.grad) g = Tensor::zeros_like(grid.views[0]);

    auto accumulate = [&](const char* name, double weight, auto&& compute) -> double {
        if (weight == 0.0) return 0.0;
        try {
            SgcTerm term = compute();
            for (std::size_t v = 0; v < 4; ++v) axpy(weight, term.grad[v], out.grad[v]);
            return term.value;
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("sgc_loss[") + name + "]: " + e.what());
        }
    };

    out.depth = accumulate("depth", weights.lambda_geo,
                           [&] { return depth_loss(grid, reference, *extractors.depth); });
    out.normal = accumulate("normal", weights.lambda_geo,
                            [&] { return normal_loss(grid, reference, *extractors.normal); });
    out.semantic = accumulate("semantic", weights.lambda_sem,
                              [&] { return semantic_loss(grid, reference, *extractors.semantic); });
    out.reward = accumulate("reward", weights.lambda_ir, [&] {
        return image_reward_loss(grid, prompt, *extractors.reward, extractors.to_loss,
                                 extractors.reward_per_view);
    });
    out.total = weights.lambda_geo * (out.depth + out.normal) +
                weights.lambda_sem * out.semantic + weights.lambda_ir * out.reward;
    return out;
}

}  // namespace scoredist
