#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvqa/attention.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

// Feature set consumed by one stage of the prompt fusion sequence.
enum class FeatureSet { Language, Image, Multimodal };

// Order in which the prompt fusion module consumes the three feature sets.
// Must be a permutation; the default is language, image, then multimodal.
struct FusionOrder {
    std::array<FeatureSet, 3> stages{FeatureSet::Language, FeatureSet::Image, FeatureSet::Multimodal};

    void validate() const {
        bool seen[3] = {false, false, false};
        for (auto s : stages) seen[static_cast<int>(s)] = true;
        if (!(seen[0] && seen[1] && seen[2]))
            throw std::invalid_argument("FusionOrder: stages must use language, image, and multimodal exactly once");
    }

    // Compact form, e.g. "LIM"; display form "L=>I=>MM".
    static FusionOrder parse(const std::string& text) {
        if (text.size() != 3) throw std::invalid_argument("FusionOrder: expected 3 letters from {L,I,M}, got '" + text + "'");
        FusionOrder order;
        for (int i = 0; i < 3; ++i) {
            switch (text[i]) {
                case 'L': order.stages[i] = FeatureSet::Language; break;
                case 'I': order.stages[i] = FeatureSet::Image; break;
                case 'M': order.stages[i] = FeatureSet::Multimodal; break;
                default: throw std::invalid_argument("FusionOrder: bad stage letter '" + std::string(1, text[i]) + "'");
            }
        }
        order.validate();
        return order;
    }

    std::string compact() const {
        std::string out;
        for (auto s : stages) out += (s == FeatureSet::Language ? 'L' : s == FeatureSet::Image ? 'I' : 'M');
        return out;
    }

    std::string display() const {
        std::string out;
        for (auto s : stages) {
            if (!out.empty()) out += "=>";
            out += (s == FeatureSet::Language ? "L." : s == FeatureSet::Image ? "I." : "MM.");
        }
        return out;
    }

    bool operator==(const FusionOrder& o) const { return stages == o.stages; }
};

struct FusionBlockParams {
    AttentionParams image_self;
    AttentionParams lang_self;
    AttentionParams image_from_lang;  // image queries, language keys/values
    AttentionParams lang_from_image;
    LinearParams image_proj;
    LinearParams lang_proj;
    // prompt fusion, one cross-attention per feature set
    AttentionParams prompt_from_image;
    AttentionParams prompt_from_lang;
    AttentionParams prompt_from_mm;

    static FusionBlockParams init(int d, int heads, Rng& rng, bool with_prompt_fusion) {
        FusionBlockParams p;
        p.image_self = AttentionParams::init(d, heads, rng);
        p.lang_self = AttentionParams::init(d, heads, rng);
        p.image_from_lang = AttentionParams::init(d, heads, rng);
        p.lang_from_image = AttentionParams::init(d, heads, rng);
        p.image_proj = LinearParams::init(d, d, rng);
        p.lang_proj = LinearParams::init(d, d, rng);
        if (with_prompt_fusion) {
            p.prompt_from_image = AttentionParams::init(d, heads, rng);
            p.prompt_from_lang = AttentionParams::init(d, heads, rng);
            p.prompt_from_mm = AttentionParams::init(d, heads, rng);
        }
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        image_self.collect(out);
        lang_self.collect(out);
        image_from_lang.collect(out);
        lang_from_image.collect(out);
        image_proj.collect(out);
        lang_proj.collect(out);
        if (prompt_from_image.model_dim > 0) {
            prompt_from_image.collect(out);
            prompt_from_lang.collect(out);
            prompt_from_mm.collect(out);
        }
    }
};

struct CrossModalFeatures {
    Tensor multimodal;  // (N_i + N_l) x d
    Tensor image_side;  // N_i x d, F_FI
    Tensor lang_side;   // N_l x d, F_FL
};

// Bidirectional cross-attention between the modalities; the two projected
// outputs are stacked along the token axis to form the multimodal features.
inline CrossModalFeatures cross_modal_fuse(const Tensor& image_feats, const Tensor& lang_feats,
                                           const TokenMask& lang_mask, const FusionBlockParams& params) {
    if (image_feats.cols() != lang_feats.cols())
        throw std::invalid_argument("cross_modal_fuse: width mismatch " + shape_str(image_feats.shape()) + " vs " +
                                    shape_str(lang_feats.shape()));
    CrossModalFeatures out;
    out.image_side = project(multi_head_attention(image_feats, lang_feats, params.image_from_lang, lang_mask),
                             params.image_proj);
    out.lang_side = project(
        multi_head_attention(lang_feats, image_feats, params.lang_from_image, TokenMask::all(image_feats.rows())),
        params.lang_proj);
    out.multimodal = concat_rows({out.image_side, out.lang_side});
    return out;
}

// Sequential cross-attentions with the prompt state as query, consuming the
// three feature sets in the configured order.
inline Tensor prompt_fuse(const Tensor& prompt_state, const Tensor& image_feats, const Tensor& lang_feats,
                          const Tensor& mm_feats, const TokenMask& lang_mask, const TokenMask& mm_mask,
                          const FusionOrder& order, const FusionBlockParams& params) {
    order.validate();
    Tensor state = prompt_state;
    for (auto stage : order.stages) {
        switch (stage) {
            case FeatureSet::Language:
                state = multi_head_attention(state, lang_feats, params.prompt_from_lang, lang_mask);
                break;
            case FeatureSet::Image:
                state = multi_head_attention(state, image_feats, params.prompt_from_image,
                                             TokenMask::all(image_feats.rows()));
                break;
            case FeatureSet::Multimodal:
                state = multi_head_attention(state, mm_feats, params.prompt_from_mm, mm_mask);
                break;
        }
    }
    return state;
}

struct FusionOutput {
    Tensor integrated;  // P x d, final prompt state (undefined when no prompt is threaded)
    Tensor image_side;  // N_i x d from the last block
    Tensor lang_side;   // N_l x d from the last block
};

// Runs the block stack. Each block refreshes both modalities with
// self-attention, applies bidirectional cross-modal attention, and (when a
// prompt is given) threads the prompt state through the prompt fusion module.
// The cross-modal outputs of block k feed block k+1 as its modality inputs.
inline FusionOutput run_stack(const Tensor& image_feats0, const Tensor& lang_feats0, const TokenMask& lang_mask,
                              const Tensor& prompt0, const std::vector<FusionBlockParams>& blocks,
                              const FusionOrder& order) {
    if (blocks.empty()) throw std::invalid_argument("run_stack: at least one fusion block required");
    const bool with_prompt = prompt0.defined();
    Tensor image_feats = image_feats0;
    Tensor lang_feats = lang_feats0;
    Tensor prompt = prompt0;
    FusionOutput out;
    for (const auto& block : blocks) {
        Tensor img = self_attention(image_feats, block.image_self);
        Tensor lng = self_attention(lang_feats, block.lang_self, lang_mask);
        CrossModalFeatures cm = cross_modal_fuse(img, lng, lang_mask, block);
        if (with_prompt) {
            const TokenMask mm_mask = TokenMask::all(img.rows()).concat(lang_mask);
            prompt = prompt_fuse(prompt, img, lng, cm.multimodal, lang_mask, mm_mask, order, block);
        }
        image_feats = cm.image_side;
        lang_feats = cm.lang_side;
        out.image_side = cm.image_side;
        out.lang_side = cm.lang_side;
    }
    out.integrated = prompt;
    return out;
}

}  // namespace medvqa
