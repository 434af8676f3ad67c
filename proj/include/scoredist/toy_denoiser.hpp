#pragma once

// A small trainable conditional noise-prediction network. It is deliberately
// the minimum architecture that exercises every hook the distillation losses
// need: a residual MLP trunk over the flattened input plus a sinusoidal time
// embedding, one self-attention block with a perturbation hook, and one
// cross-attention site where text and visual-prompt tokens are fused with a
// decoupled visual branch.
//
// The text condition is a learned embedding table over a small label
// vocabulary; the last row is a dedicated null embedding trained through
// condition dropout. The null visual condition is an all-zero token sequence,
// which makes the visual branch exactly inert.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoredist/conditioning.hpp"
#include "scoredist/denoiser.hpp"
#include "scoredist/guidance.hpp"
#include "scoredist/optimizer.hpp"
#include "scoredist/oracles.hpp"
#include "scoredist/schedule.hpp"
#include "scoredist/tensor.hpp"

namespace scoredist {

struct TrainingDiverged : std::runtime_error {
    int step;
    explicit TrainingDiverged(int s)
        : std::runtime_error("toy training diverged (non-finite loss) at step " +
                             std::to_string(s)),
          step(s) {}
};

// Yields (sample, class label) pairs for denoiser training.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::pair<Tensor, int> draw(std::mt19937_64& rng) const = 0;
    virtual std::vector<std::size_t> sample_shape() const = 0;
    virtual int num_classes() const = 0;
};

struct ToyDenoiserConfig {
    std::vector<std::size_t> latent_shape = {2};
    std::size_t tokens = 4;       // hidden token count m
    std::size_t token_dim = 16;   // per-token width d; hidden width = m * d
    std::size_t embed_dim = 16;   // condition embedding width e
    std::size_t vocab = 4;        // labels 0..vocab-1; row vocab is the null embedding
    std::size_t visual_tokens = 4;
    std::size_t encoder_bins = 8;
    int horizon = 1000;

    std::size_t input_dim() const {
        std::size_t n = 1;
        for (auto s : latent_shape) n *= s;
        return n;
    }
    std::size_t hidden() const { return tokens * token_dim; }
};

class ToyDenoiser : public Denoiser {
public:
    // parameter indices into params_
    enum Param : std::size_t {
        kWIn, kBIn,
        kM1A, kM1Ab, kM1B, kM1Bb,
        kSaWq, kSaWk, kSaWv, kSaWo,
        kCaWq, kCaWkT, kCaWvT, kCaWkV, kCaWvV, kCaWo,
        kM2A, kM2Ab, kM2B, kM2Bb,
        kWOut, kBOut,
        kTextTable,
        kParamCount
    };

    ToyDenoiser(ToyDenoiserConfig cfg, uint64_t seed)
        : cfg_(std::move(cfg)),
          encoder_(cfg_.encoder_bins),
          projector_(cfg_.encoder_bins, cfg_.visual_tokens, cfg_.embed_dim, seed ^ 0x9e3779b97f4a7c15ull) {
        std::mt19937_64 rng(seed);
        const std::size_t D = cfg_.input_dim(), H = cfg_.hidden(), d = cfg_.token_dim,
                          e = cfg_.embed_dim, V = cfg_.vocab;
        params_.resize(kParamCount);
        auto w = [&](std::vector<std::size_t> shape, std::size_t fan_in) {
            return random_normal<double>(std::move(shape), rng, 1.0 / std::sqrt(double(fan_in)));
        };
        params_[kWIn] = w({H, D}, D);
        params_[kBIn] = Tensor({H});
        params_[kM1A] = w({H, H}, H);
        params_[kM1Ab] = Tensor({H});
        params_[kM1B] = w({H, H}, H);
        params_[kM1Bb] = Tensor({H});
        params_[kSaWq] = w({d, d}, d);
        params_[kSaWk] = w({d, d}, d);
        params_[kSaWv] = w({d, d}, d);
        params_[kSaWo] = w({d, d}, d);
        params_[kCaWq] = w({d, d}, d);
        params_[kCaWkT] = w({d, e}, e);
        params_[kCaWvT] = w({d, e}, e);
        params_[kCaWkV] = w({d, e}, e);
        params_[kCaWvV] = w({d, e}, e);
        params_[kCaWo] = w({d, d}, d);
        params_[kM2A] = w({H, H}, H);
        params_[kM2Ab] = Tensor({H});
        params_[kM2B] = w({H, H}, H);
        params_[kM2Bb] = Tensor({H});
        params_[kWOut] = w({D, H}, H);
        params_[kBOut] = Tensor({D});
        params_[kTextTable] = random_normal<double>({V + 1, e}, rng, 0.5);
    }

    const ToyDenoiserConfig& config() const { return cfg_; }
    const MeanPoolEncoder& visual_encoder() const { return encoder_; }
    const LinearProjector& visual_projector() const { return projector_; }

    // Convenience wrapper: image -> token sequence via the backend's own
    // fixed encoder and projector.
    Tensor embed_visual(const Tensor& image) const {
        return embed_visual_prompt(image, encoder_, projector_).embedding;
    }

    // Perturbation hook coverage; the toy network has one self-attention
    // block named "self_attn_0". An empty list means every block.
    void set_perturbed_blocks(std::vector<std::string> blocks) {
        perturbed_blocks_ = std::move(blocks);
    }
    static constexpr const char* kSelfAttentionBlock = "self_attn_0";

    Tensor predict(const DenoiserQuery& query) const override {
        Cache cache;
        return forward_(query, &cache);
    }

    DenoiserCapabilities capabilities() const override {
        DenoiserCapabilities caps;
        caps.supports_visual_condition = true;
        caps.supports_perturbed_attention = true;
        caps.concurrent_queries = true;
        caps.latent_shape = cfg_.latent_shape;
        caps.horizon = cfg_.horizon;
        return caps;
    }

    std::string id() const override { return "toy"; }

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }

    const std::string& meta() const { return meta_; }
    void set_meta(std::string meta) { meta_ = std::move(meta); }
    uint64_t config_hash() const { return config_hash_; }
    void set_config_hash(uint64_t h) { config_hash_ = h; }

    // -- training ----------------------------------------------------------

    // One training sample's squared-error loss and parameter gradients
    // (accumulated into grads). Returns the per-dimension MSE.
    double accumulate_gradients(const Tensor& x, int t, const ConditionSet& conditions,
                                const Tensor& target, std::vector<Tensor>& grads,
                                double weight) const {
        Cache cache;
        DenoiserQuery q{x, t, conditions, false};
        const Tensor out = forward_(q, &cache);
        const std::size_t D = out.size();
        double mse = 0.0;
        Tensor g_out({1, D});
        for (std::size_t i = 0; i < D; ++i) {
            const double r = out[i] - target[i];
            mse += r * r;
            g_out[i] = weight * 2.0 * r / double(D);
        }
        backward_(cache, g_out, grads);
        return mse / double(D);
    }

    std::vector<Tensor> zero_gradients() const {
        std::vector<Tensor> grads;
        grads.reserve(params_.size());
        for (const auto& p : params_) grads.push_back(Tensor::zeros_like(p));
        return grads;
    }

    // -- serialization -----------------------------------------------------

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open " + path);
        const char magic[8] = {'S', 'C', 'D', 'T', 'O', 'Y', '0', '1'};
        os.write(magic, 8);
        write_u64_(os, config_hash_);
        write_u64_(os, cfg_.latent_shape.size());
        for (auto s : cfg_.latent_shape) write_u64_(os, s);
        write_u64_(os, cfg_.tokens);
        write_u64_(os, cfg_.token_dim);
        write_u64_(os, cfg_.embed_dim);
        write_u64_(os, cfg_.vocab);
        write_u64_(os, cfg_.visual_tokens);
        write_u64_(os, cfg_.encoder_bins);
        write_u64_(os, static_cast<uint64_t>(cfg_.horizon));
        write_u64_(os, meta_.size());
        os.write(meta_.data(), static_cast<std::streamsize>(meta_.size()));
        for (const auto& p : params_) write_tensor_(os, p);
        write_tensor_(os, projector_.weight());
        if (!os) throw std::runtime_error("failed writing " + path);
    }

    static ToyDenoiser load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open " + path);
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, "SCDTOY01", 8) != 0) {
            throw std::runtime_error(path + " is not a toy denoiser weights file");
        }
        const uint64_t hash = read_u64_(is);
        ToyDenoiserConfig cfg;
        cfg.latent_shape.resize(read_u64_(is));
        for (auto& s : cfg.latent_shape) s = read_u64_(is);
        cfg.tokens = read_u64_(is);
        cfg.token_dim = read_u64_(is);
        cfg.embed_dim = read_u64_(is);
        cfg.vocab = read_u64_(is);
        cfg.visual_tokens = read_u64_(is);
        cfg.encoder_bins = read_u64_(is);
        cfg.horizon = static_cast<int>(read_u64_(is));
        std::string meta(read_u64_(is), '\0');
        is.read(meta.data(), static_cast<std::streamsize>(meta.size()));
        ToyDenoiser net(cfg, 0);
        net.config_hash_ = hash;
        net.meta_ = std::move(meta);
        for (auto& p : net.params_) p = read_tensor_(is);
        net.projector_.set_weight(read_tensor_(is));
        if (!is) throw std::runtime_error("truncated weights file " + path);
        return net;
    }

private:
    struct Cache {
        Tensor x_row, te;
        Tensor h0, z1b, a1, h1;        // trunk in
        Tensor u0, q, k, vv, attn, sa, u1;
        bool perturbed = false;
        Tensor text_e, vis, qc, kt, vt, kv, vvs, at, av, fused, u2;
        double tau = 0.0;
        int text_row = 0;
        bool has_visual = false;
        Tensor h2, z2b, a2, h3;        // trunk out
    };

    bool block_perturbed_() const {
        if (perturbed_blocks_.empty()) return true;
        for (const auto& b : perturbed_blocks_) {
            if (b == kSelfAttentionBlock || b == "all") return true;
        }
        return false;
    }

    Tensor time_embedding_(int t) const {
        const std::size_t H = cfg_.hidden();
        Tensor te({1, H});
        const std::size_t half = H / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            te[2 * i] = std::sin(double(t) * freq);
            te[2 * i + 1] = std::cos(double(t) * freq);
        }
        return te;
    }

    static Tensor tanh_(const Tensor& z) {
        Tensor out = z;
        for (auto& v : out) v = std::tanh(v);
        return out;
    }

    // out[1,n] = x[1,k] * W[n,k]^T + b
    static Tensor affine_(const Tensor& x, const Tensor& w, const Tensor& b) {
        Tensor out = matmul_bt(x, w);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
        return out;
    }

    Tensor forward_(const DenoiserQuery& query, Cache* c) const {
        const std::size_t D = cfg_.input_dim(), H = cfg_.hidden(), m = cfg_.tokens,
                          d = cfg_.token_dim, e = cfg_.embed_dim;
        if (query.x.size() != D) {
            throw std::invalid_argument("toy denoiser: input size mismatch");
        }
        c->x_row = query.x.reshaped({1, D});
        c->te = time_embedding_(query.t);

        c->h0 = affine_(c->x_row, params_[kWIn], params_[kBIn]);
        c->h0 += c->te;
        c->z1b = affine_(c->h0, params_[kM1A], params_[kM1Ab]);
        c->a1 = tanh_(c->z1b);
        c->h1 = affine_(c->a1, params_[kM1B], params_[kM1Bb]);
        c->h1 += c->h0;

        // self-attention over m hidden tokens
        c->u0 = c->h1.reshaped({m, d});
        c->q = matmul_bt(c->u0, params_[kSaWq]);
        c->k = matmul_bt(c->u0, params_[kSaWk]);
        c->vv = matmul_bt(c->u0, params_[kSaWv]);
        c->perturbed = query.perturb_attention && block_perturbed_();
        if (c->perturbed) {
            c->sa = perturb_self_attention(c->q, c->k, c->vv);
        } else {
            Tensor scores = matmul_bt(c->q, c->k);
            scores *= 1.0 / std::sqrt(double(d));
            c->attn = softmax_rows(scores);
            c->sa = matmul(c->attn, c->vv);
        }
        c->u1 = matmul_bt(c->sa, params_[kSaWo]);
        c->u1 += c->u0;

        // cross-attention with decoupled text and visual branches
        c->text_row = query.conditions.text ? *query.conditions.text : int(cfg_.vocab);
        if (c->text_row < 0 || c->text_row > int(cfg_.vocab)) {
            throw std::invalid_argument("toy denoiser: text label outside vocabulary");
        }
        c->text_e = Tensor({1, e});
        for (std::size_t j = 0; j < e; ++j) {
            c->text_e[j] = params_[kTextTable].at(static_cast<std::size_t>(c->text_row), j);
        }
        c->has_visual = query.conditions.visual.has_value();
        if (c->has_visual) {
            const Tensor& v = *query.conditions.visual;
            if (v.shape() != std::vector<std::size_t>{cfg_.visual_tokens, e}) {
                throw std::invalid_argument("toy denoiser: visual tokens must be " +
                                            shape_to_string({cfg_.visual_tokens, e}));
            }
            c->vis = v;
        } else {
            c->vis = Tensor({cfg_.visual_tokens, e});  // null visual: zero tokens
        }
        c->tau = query.conditions.fusion_scale;
        c->qc = matmul_bt(c->u1, params_[kCaWq]);
        c->kt = matmul_bt(c->text_e, params_[kCaWkT]);
        c->vt = matmul_bt(c->text_e, params_[kCaWvT]);
        c->kv = matmul_bt(c->vis, params_[kCaWkV]);
        c->vvs = matmul_bt(c->vis, params_[kCaWvV]);
        {
            Tensor st = matmul_bt(c->qc, c->kt);
            st *= 1.0 / std::sqrt(double(d));
            c->at = softmax_rows(st);
            c->fused = matmul(c->at, c->vt);
            Tensor sv = matmul_bt(c->qc, c->kv);
            sv *= 1.0 / std::sqrt(double(d));
            c->av = softmax_rows(sv);
            if (c->tau != 0.0) {
                axpy(c->tau, matmul(c->av, c->vvs), c->fused);
            }
        }
        c->u2 = matmul_bt(c->fused, params_[kCaWo]);
        c->u2 += c->u1;

        c->h2 = c->u2.reshaped({1, H});
        c->z2b = affine_(c->h2, params_[kM2A], params_[kM2Ab]);
        c->a2 = tanh_(c->z2b);
        c->h3 = affine_(c->a2, params_[kM2B], params_[kM2Bb]);
        c->h3 += c->h2;

        Tensor out = affine_(c->h3, params_[kWOut], params_[kBOut]);
        return out.reshaped(query.x.shape());
    }

    // dS = A o (dA - rowsum(dA o A))
    static Tensor softmax_backward_(const Tensor& a, const Tensor& g_a) {
        Tensor g_s = Tensor::zeros_like(a);
        const std::size_t m = a.shape()[0], n = a.shape()[1];
        for (std::size_t i = 0; i < m; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < n; ++j) row += g_a.at(i, j) * a.at(i, j);
            for (std::size_t j = 0; j < n; ++j) {
                g_s.at(i, j) = a.at(i, j) * (g_a.at(i, j) - row);
            }
        }
        return g_s;
    }

    void backward_(const Cache& c, const Tensor& g_out_row, std::vector<Tensor>& grads) const {
        const std::size_t H = cfg_.hidden(), m = cfg_.tokens, d = cfg_.token_dim;
        const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

        // output affine
        grads[kWOut] += matmul_at(g_out_row, c.h3);
        grads[kBOut] += g_out_row.reshaped(grads[kBOut].shape());
        Tensor g_h3 = matmul(g_out_row, params_[kWOut]);

        // trunk out residual block
        Tensor g_h2 = g_h3;
        grads[kM2B] += matmul_at(g_h3, c.a2);
        grads[kM2Bb] += g_h3.reshaped(grads[kM2Bb].shape());
        Tensor g_a2 = matmul(g_h3, params_[kM2B]);
        Tensor g_z2 = g_a2;
        for (std::size_t i = 0; i < g_z2.size(); ++i) g_z2[i] *= 1.0 - c.a2[i] * c.a2[i];
        grads[kM2A] += matmul_at(g_z2, c.h2);
        grads[kM2Ab] += g_z2.reshaped(grads[kM2Ab].shape());
        g_h2 += matmul(g_z2, params_[kM2A]);

        // cross-attention block
        Tensor g_u2 = g_h2.reshaped({m, d});
        Tensor g_u1 = g_u2;
        grads[kCaWo] += matmul_at(g_u2, c.fused);
        Tensor g_f = matmul(g_u2, params_[kCaWo]);

        Tensor g_vt = matmul_at(c.at, g_f);
        Tensor g_at = matmul_bt(g_f, c.vt);
        Tensor g_st = softmax_backward_(c.at, g_at);
        Tensor g_qc = matmul(g_st, c.kt);
        g_qc *= inv_sqrt_d;
        Tensor g_kt = matmul_at(g_st, c.qc);
        g_kt *= inv_sqrt_d;
        if (c.tau != 0.0) {
            Tensor g_vvs = matmul_at(c.av, g_f);
            g_vvs *= c.tau;
            Tensor g_av = matmul_bt(g_f, c.vvs);
            g_av *= c.tau;
            Tensor g_sv = softmax_backward_(c.av, g_av);
            Tensor g_qc_v = matmul(g_sv, c.kv);
            axpy(inv_sqrt_d, g_qc_v, g_qc);
            Tensor g_kv = matmul_at(g_sv, c.qc);
            g_kv *= inv_sqrt_d;
            grads[kCaWkV] += matmul_at(g_kv, c.vis);
            grads[kCaWvV] += matmul_at(g_vvs, c.vis);
        }
        grads[kCaWkT] += matmul_at(g_kt, c.text_e);
        grads[kCaWvT] += matmul_at(g_vt, c.text_e);
        Tensor g_text_e = matmul(g_kt, params_[kCaWkT]);
        g_text_e += matmul(g_vt, params_[kCaWvT]);
        for (std::size_t j = 0; j < g_text_e.size(); ++j) {
            grads[kTextTable].at(static_cast<std::size_t>(c.text_row), j) += g_text_e[j];
        }
        grads[kCaWq] += matmul_at(g_qc, c.u1);
        g_u1 += matmul(g_qc, params_[kCaWq]);

        // self-attention block
        Tensor g_u0 = g_u1;
        grads[kSaWo] += matmul_at(g_u1, c.sa);
        Tensor g_sa = matmul(g_u1, params_[kSaWo]);
        Tensor g_vv = Tensor::zeros_like(c.vv);
        if (c.perturbed) {
            g_vv = g_sa;  // identity attention map; no path through Q or K
        } else {
            g_vv = matmul_at(c.attn, g_sa);
            Tensor g_a = matmul_bt(g_sa, c.vv);
            Tensor g_s = softmax_backward_(c.attn, g_a);
            Tensor g_q = matmul(g_s, c.k);
            g_q *= inv_sqrt_d;
            Tensor g_k = matmul_at(g_s, c.q);
            g_k *= inv_sqrt_d;
            grads[kSaWq] += matmul_at(g_q, c.u0);
            grads[kSaWk] += matmul_at(g_k, c.u0);
            g_u0 += matmul(g_q, params_[kSaWq]);
            g_u0 += matmul(g_k, params_[kSaWk]);
        }
        grads[kSaWv] += matmul_at(g_vv, c.u0);
        g_u0 += matmul(g_vv, params_[kSaWv]);

        // trunk in residual block
        Tensor g_h1 = g_u0.reshaped({1, H});
        Tensor g_h0 = g_h1;
        grads[kM1B] += matmul_at(g_h1, c.a1);
        grads[kM1Bb] += g_h1.reshaped(grads[kM1Bb].shape());
        Tensor g_a1 = matmul(g_h1, params_[kM1B]);
        Tensor g_z1 = g_a1;
        for (std::size_t i = 0; i < g_z1.size(); ++i) g_z1[i] *= 1.0 - c.a1[i] * c.a1[i];
        grads[kM1A] += matmul_at(g_z1, c.h0);
        grads[kM1Ab] += g_z1.reshaped(grads[kM1Ab].shape());
        g_h0 += matmul(g_z1, params_[kM1A]);

        grads[kWIn] += matmul_at(g_h0, c.x_row);
        grads[kBIn] += g_h0.reshaped(grads[kBIn].shape());
    }

    static void write_u64_(std::ostream& os, uint64_t v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static uint64_t read_u64_(std::istream& is) {
        uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        return v;
    }
    static void write_tensor_(std::ostream& os, const Tensor& t) {
        write_u64_(os, t.rank());
        for (auto s : t.shape()) write_u64_(os, s);
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    static Tensor read_tensor_(std::istream& is) {
        std::vector<std::size_t> shape(read_u64_(is));
        for (auto& s : shape) s = read_u64_(is);
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        return t;
    }

    ToyDenoiserConfig cfg_;
    std::vector<Tensor> params_;
    MeanPoolEncoder encoder_;
    LinearProjector projector_;
    std::vector<std::string> perturbed_blocks_;  // empty = all
    std::string meta_;
    uint64_t config_hash_ = 0;
};

struct ToyTrainConfig {
    int steps = 20000;
    int batch = 32;
    double lr = 1e-3;
    double cond_dropout = 0.1;    // probability of nulling the text label
    double visual_dropout = 0.1;  // probability of nulling the visual tokens
    bool self_visual = true;      // condition on the clean sample's own embedding
    double fusion_scale = 0.5;
    int heldout_samples = 2000;
};

// Standard epsilon-prediction training: draw (x0, label), noise to a uniform
// timestep, regress the injected noise. Text and visual conditions are
// dropped out independently so the null embedding is trained. Seed-determined
// end to end.
inline ToyDenoiser train_toy_denoiser(const SampleSource& dataset,
                                      const DiffusionSchedule& schedule,
                                      const ToyTrainConfig& config, uint64_t seed,
                                      ToyDenoiserConfig arch = {}) {
    if (config.steps < 0 || config.batch < 1) {
        throw std::invalid_argument("train_toy_denoiser: bad step/batch configuration");
    }
    arch.latent_shape = dataset.sample_shape();
    arch.vocab = static_cast<std::size_t>(std::max(1, dataset.num_classes()));
    arch.horizon = schedule.horizon();
    ToyDenoiser net(arch, seed);

    std::mt19937_64 rng(seed * 0x100000001b3ull + 0xcbf29ce484222325ull);
    std::uniform_int_distribution<int> t_dist(1, schedule.horizon());
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    AdamOptimizer opt(config.lr);
    std::vector<Tensor*> param_ptrs;
    for (auto& p : net.parameters()) param_ptrs.push_back(&p);

    for (int step = 0; step < config.steps; ++step) {
        auto grads = net.zero_gradients();
        double loss = 0.0;
        for (int b = 0; b < config.batch; ++b) {
            auto [x0, label] = dataset.draw(rng);
            const int t = t_dist(rng);
            const Tensor eps = random_normal<double>(x0.shape(), rng);
            const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);

            ConditionSet cond;
            cond.fusion_scale = config.fusion_scale;
            if (u01(rng) >= config.cond_dropout) cond.text = label;
            if (config.self_visual && u01(rng) >= config.visual_dropout) {
                cond.visual = net.embed_visual(x0);
            }
            loss += net.accumulate_gradients(xt.data, t, cond, eps, grads,
                                             1.0 / double(config.batch));
        }
        loss /= double(config.batch);
        if (!std::isfinite(loss)) throw TrainingDiverged(step);
        opt.step(param_ptrs, grads);
    }
    return net;
}

// Held-out per-dimension epsilon MSE under the training conditioning
// distribution (no dropout).
inline double heldout_epsilon_mse(const ToyDenoiser& net, const SampleSource& dataset,
                                  const DiffusionSchedule& schedule, int samples,
                                  uint64_t seed, double fusion_scale = 0.5,
                                  bool self_visual = true) {
    std::mt19937_64 rng(seed ^ 0xabcdef1234567890ull);
    std::uniform_int_distribution<int> t_dist(1, schedule.horizon());
    double total = 0.0;
    for (int i = 0; i < samples; ++i) {
        auto [x0, label] = dataset.draw(rng);
        const int t = t_dist(rng);
        const Tensor eps = random_normal<double>(x0.shape(), rng);
        const NoisyLatent xt = forward_noise(NoisyLatent(x0, 0), t, eps, schedule);
        ConditionSet cond = ConditionSet::text_only(label);
        cond.fusion_scale = fusion_scale;
        if (self_visual) cond.visual = net.embed_visual(x0);
        const Tensor pred = net.predict({xt.data, t, cond, false});
        double mse = 0.0;
        for (std::size_t j = 0; j < pred.size(); ++j) {
            const double r = pred[j] - eps[j];
            mse += r * r;
        }
        total += mse / double(pred.size());
    }
    return total / double(samples);
}

// Mixture-backed sample source; labels are mode indices.
class MixtureSource : public SampleSource {
public:
    explicit MixtureSource(MixtureSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

    std::pair<Tensor, int> draw(std::mt19937_64& rng) const override { return spec_.draw(rng); }
    std::vector<std::size_t> sample_shape() const override { return spec_.modes.front().shape(); }
    int num_classes() const override { return static_cast<int>(spec_.modes.size()); }

    const MixtureSpec& spec() const { return spec_; }

private:
    MixtureSpec spec_;
};

}  // namespace scoredist
