#pragma once

// Conditioning inputs for denoiser queries: a text condition (a vocabulary
// label at toy scale), an optional visual-prompt token sequence, and the
// fusion scale tau that weighs the visual branch inside cross-attention.

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

#include "scoredist/tensor.hpp"

namespace scoredist {

// The null condition is represented by an absent optional, independently for
// the text and visual slots, so fully unconditional queries exist.
struct ConditionSet {
    std::optional<int> text;       // vocabulary label; nullopt is the null condition
    std::optional<Tensor> visual;  // [n_tokens, embed_dim] token sequence; nullopt is null
    double fusion_scale = 0.0;     // tau >= 0

    static ConditionSet none() { return ConditionSet{}; }

    static ConditionSet text_only(int label) {
        ConditionSet c;
        c.text = label;
        return c;
    }

    // same tau, both slots nulled; the unconditional counterpart of a query
    ConditionSet nulled() const {
        ConditionSet c;
        c.fusion_scale = fusion_scale;
        return c;
    }

    void validate() const {
        if (!(fusion_scale >= 0.0) || !std::isfinite(fusion_scale)) {
            throw std::invalid_argument("fusion_scale must be finite and >= 0");
        }
        if (visual && visual->rank() != 2) {
            throw std::invalid_argument("visual condition must be a [tokens, dim] sequence");
        }
    }
};

enum class VisualPromptSource { SelfGuidance, Reference };

struct VisualPrompt {
    VisualPromptSource source = VisualPromptSource::Reference;
    Tensor image;      // raw guidance image
    Tensor embedding;  // projected token sequence [n_tokens, dim]
};

// Mean-pools the flattened image into a fixed number of bins. Linear and
// bias-free, so an all-zero image maps to an all-zero feature vector.
class MeanPoolEncoder {
public:
    explicit MeanPoolEncoder(std::size_t bins = 8) : bins_(bins) {
        if (bins_ == 0) throw std::invalid_argument("encoder needs at least one bin");
    }

    std::size_t feature_dim() const { return bins_; }

    Tensor encode(const Tensor& image) const {
        const std::size_t n = image.size();
        if (n == 0) throw std::invalid_argument("empty image");
        Tensor out({bins_});
        for (std::size_t b = 0; b < bins_; ++b) {
            const std::size_t lo = b * n / bins_;
            const std::size_t hi = (b + 1) * n / bins_;
            if (hi == lo) continue;
            double s = 0.0;
            for (std::size_t i = lo; i < hi; ++i) s += image[i];
            out[b] = s / double(hi - lo);
        }
        return out;
    }

private:
    std::size_t bins_;
};

// Fixed (seeded) linear map from pooled features to a token sequence.
class LinearProjector {
public:
    LinearProjector(std::size_t feature_dim, std::size_t tokens, std::size_t dim, uint64_t seed)
        : tokens_(tokens), dim_(dim) {
        std::mt19937_64 rng(seed);
        weight_ = random_normal<double>({tokens * dim, feature_dim}, rng,
                                        1.0 / std::sqrt(double(feature_dim)));
    }

    std::size_t tokens() const { return tokens_; }
    std::size_t dim() const { return dim_; }
    std::size_t feature_dim() const { return weight_.shape()[1]; }

    Tensor project(const Tensor& features) const {
        if (features.size() != weight_.shape()[1]) {
            throw std::invalid_argument("projector feature dimension mismatch");
        }
        Tensor out({tokens_, dim_});
        for (std::size_t r = 0; r < tokens_ * dim_; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < features.size(); ++c) s += weight_.at(r, c) * features[c];
            out[r] = s;
        }
        return out;
    }

    const Tensor& weight() const { return weight_; }
    void set_weight(Tensor w) {
        if (w.shape() != weight_.shape()) throw std::invalid_argument("projector weight shape");
        weight_ = std::move(w);
    }

private:
    std::size_t tokens_, dim_;
    Tensor weight_;
};

inline VisualPrompt embed_visual_prompt(const Tensor& image, const MeanPoolEncoder& encoder,
                                        const LinearProjector& projector,
                                        VisualPromptSource source = VisualPromptSource::Reference) {
    if (!image.all_finite()) throw std::invalid_argument("visual prompt image is non-finite");
    VisualPrompt p;
    p.source = source;
    p.image = image;
    p.embedding = projector.project(encoder.encode(image));
    return p;
}

// Attention with a decoupled visual branch:
//   F = softmax(Q K^T / sqrt(d)) V + tau * softmax(Q K_img^T / sqrt(d)) V_img
// Each branch normalizes over its own keys; tau = 0 reduces to plain
// text-branch attention exactly.
inline Tensor fused_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& k_img, const Tensor& v_img, double tau,
                              std::size_t head_dim) {
    if (head_dim == 0) throw std::invalid_argument("fused_attention: head_dim must be > 0");
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw std::invalid_argument("fused_attention: rank-2 tensors required");
    }
    if (k.shape()[0] != v.shape()[0]) {
        throw std::invalid_argument("fused_attention: text key/value row mismatch");
    }
    const double scale = 1.0 / std::sqrt(double(head_dim));
    Tensor scores = matmul_bt(q, k);
    scores *= scale;
    Tensor out = matmul(softmax_rows(scores), v);
    if (tau != 0.0) {
        if (k_img.shape()[0] != v_img.shape()[0]) {
            throw std::invalid_argument("fused_attention: visual key/value row mismatch");
        }
        Tensor scores_img = matmul_bt(q, k_img);
        scores_img *= scale;
        Tensor vis = matmul(softmax_rows(scores_img), v_img);
        axpy(tau, vis, out);
    }
    return out;
}

}  // namespace scoredist
