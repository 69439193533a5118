#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "medvqa/attention.hpp"
#include "medvqa/rng.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

// Single-channel image with intensities in [0, 1].
struct ImageGrid {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // row-major, height*width

    void validate() const {
        if (height <= 0 || width <= 0 || pixels.size() != static_cast<std::size_t>(height) * width)
            throw std::invalid_argument("ImageGrid: pixel count does not match " + std::to_string(height) + "x" +
                                        std::to_string(width));
        for (double p : pixels)
            if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("ImageGrid: intensity outside [0, 1]");
    }

    double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

struct TokenSequence {
    std::vector<int> ids;

    void validate(int vocab_size) const {
        if (ids.empty()) throw std::invalid_argument("TokenSequence: empty sequence");
        for (int id : ids)
            if (id < 0 || id >= vocab_size)
                throw std::out_of_range("TokenSequence: token id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(vocab_size));
    }
};

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

// Word-level vocabulary for the whitespace tokenizer.
struct TokenVocab {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    static TokenVocab build(const std::vector<std::string>& words_sorted_unique) {
        TokenVocab v;
        v.words = words_sorted_unique;
        for (std::size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int>(i);
        return v;
    }

    int size() const { return static_cast<int>(words.size()); }

    int id(const std::string& word) const {
        auto it = index.find(word);
        if (it == index.end()) throw std::out_of_range("TokenVocab: unknown word '" + word + "'");
        return it->second;
    }

    TokenSequence encode(const std::string& text) const {
        TokenSequence seq;
        for (const auto& w : tokenize(text)) seq.ids.push_back(id(w));
        return seq;
    }
};

struct TransformerLayerParams {
    AttentionParams attn;
    LinearParams ffn_in;   // d x hidden
    LinearParams ffn_out;  // hidden x d
    LayerNormParams ffn_norm;

    static TransformerLayerParams init(int d, int heads, Rng& rng) {
        const int hidden = 4 * d;
        return {AttentionParams::init(d, heads, rng), LinearParams::init(d, hidden, rng),
                LinearParams::init(hidden, d, rng), LayerNormParams::init(d)};
    }

    void collect(std::vector<Tensor>& out) const {
        attn.collect(out);
        ffn_in.collect(out);
        ffn_out.collect(out);
        ffn_norm.collect(out);
    }
};

inline Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& p, const TokenMask& mask) {
    Tensor y = self_attention(x, p.attn, mask);
    Tensor h = project(gelu(project(y, p.ffn_in)), p.ffn_out);
    return layer_norm(add(y, h), p.ffn_norm.gain, p.ffn_norm.bias);
}

// Desk-scale image backbone: non-overlapping patch embedding, learned
// positional embeddings, a small transformer stack, then the final
// self-attention producing the image feature sequence.
struct ImageEncoderParams {
    int image_size = 0;
    int patch = 0;
    LinearParams patch_embed;  // patch*patch x d
    Tensor pos;                // n_tokens x d
    std::vector<TransformerLayerParams> layers;
    AttentionParams outer;

    int token_count() const { return (image_size / patch) * (image_size / patch); }

    static ImageEncoderParams init(int image_size, int patch, int d, int heads, int n_layers, Rng& rng) {
        if (patch <= 0 || image_size % patch != 0)
            throw std::invalid_argument("image encoder: patch size " + std::to_string(patch) +
                                        " does not divide image size " + std::to_string(image_size));
        ImageEncoderParams p;
        p.image_size = image_size;
        p.patch = patch;
        p.patch_embed = LinearParams::init(patch * patch, d, rng);
        const int n = (image_size / patch) * (image_size / patch);
        std::vector<double> pos(static_cast<std::size_t>(n) * d);
        for (auto& v : pos) v = rng.normal(0.0, 0.02);
        p.pos = Tensor::from_values(n, d, std::move(pos)).set_requires_grad(true);
        for (int l = 0; l < n_layers; ++l) p.layers.push_back(TransformerLayerParams::init(d, heads, rng));
        p.outer = AttentionParams::init(d, heads, rng);
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        patch_embed.collect(out);
        out.push_back(pos);
        for (const auto& l : layers) l.collect(out);
        outer.collect(out);
    }
};

inline Tensor encode_image(const ImageGrid& img, const ImageEncoderParams& params) {
    img.validate();
    if (img.height != params.image_size || img.width != params.image_size)
        throw std::invalid_argument("encode_image: image is " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + ", encoder expects " +
                                    std::to_string(params.image_size));
    const int p = params.patch;
    const int per_side = img.height / p;
    const int n = per_side * per_side;
    std::vector<double> patches(static_cast<std::size_t>(n) * p * p);
    for (int pr = 0; pr < per_side; ++pr)
        for (int pc = 0; pc < per_side; ++pc) {
            double* row = patches.data() + static_cast<std::size_t>(pr * per_side + pc) * p * p;
            for (int r = 0; r < p; ++r)
                for (int c = 0; c < p; ++c) row[r * p + c] = img.at(pr * p + r, pc * p + c);
        }
    Tensor x = project(Tensor::from_values(n, p * p, std::move(patches)), params.patch_embed);
    x = add(x, params.pos);
    const TokenMask mask = TokenMask::all(n);
    for (const auto& layer : params.layers) x = transformer_layer(x, layer, mask);
    return self_attention(x, params.outer, mask);
}

// Desk-scale text backbone: token + positional embeddings, transformer stack,
// final self-attention. Returns the feature sequence and its padding mask.
struct TextEncoderParams {
    int max_len = 0;
    Tensor token_embed;  // vocab x d
    Tensor pos;          // max_len x d
    std::vector<TransformerLayerParams> layers;
    AttentionParams outer;

    static TextEncoderParams init(int vocab_size, int max_len, int d, int heads, int n_layers, Rng& rng) {
        TextEncoderParams p;
        p.max_len = max_len;
        std::vector<double> emb(static_cast<std::size_t>(vocab_size) * d);
        for (auto& v : emb) v = rng.normal(0.0, 0.02);
        p.token_embed = Tensor::from_values(vocab_size, d, std::move(emb)).set_requires_grad(true);
        std::vector<double> pos(static_cast<std::size_t>(max_len) * d);
        for (auto& v : pos) v = rng.normal(0.0, 0.02);
        p.pos = Tensor::from_values(max_len, d, std::move(pos)).set_requires_grad(true);
        for (int l = 0; l < n_layers; ++l) p.layers.push_back(TransformerLayerParams::init(d, heads, rng));
        p.outer = AttentionParams::init(d, heads, rng);
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(token_embed);
        out.push_back(pos);
        for (const auto& l : layers) l.collect(out);
        outer.collect(out);
    }
};

struct TextEncoding {
    Tensor features;  // n x d
    TokenMask mask;
};

// pad_to > 0 appends zero-embedding positions marked invalid in the mask.
inline TextEncoding encode_text(const TokenSequence& seq, const TextEncoderParams& params, int pad_to = 0) {
    seq.validate(params.token_embed.rows());
    const int n_valid = static_cast<int>(seq.ids.size());
    const int n = std::max(n_valid, pad_to);
    if (n > params.max_len)
        throw std::invalid_argument("encode_text: sequence length " + std::to_string(n) + " exceeds max length " +
                                    std::to_string(params.max_len));
    Tensor x = gather_rows(params.token_embed, seq.ids);
    if (n > n_valid) {
        const int d = x.cols();
        x = concat_rows({x, Tensor::zeros(n - n_valid, d)});
    }
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;
    x = add(x, gather_rows(params.pos, positions));
    TokenMask mask;
    mask.valid.assign(n, false);
    for (int i = 0; i < n_valid; ++i) mask.valid[i] = true;
    for (const auto& layer : params.layers) x = transformer_layer(x, layer, mask);
    return {self_attention(x, params.outer, mask), mask};
}

// Token embeddings of one answer string: T_a x d, straight from the table.
inline Tensor embed_answer_tokens(const std::string& answer, const TokenVocab& vocab, const Tensor& token_embed) {
    auto words = tokenize(answer);
    if (words.empty()) throw std::invalid_argument("embed_answer_tokens: blank answer string");
    std::vector<int> ids;
    for (const auto& w : words) ids.push_back(vocab.id(w));
    return gather_rows(token_embed, ids);
}

// One pooled embedding row per distinct answer, in vocabulary order.
inline Tensor embed_answer_set(const std::vector<std::string>& answers, const TokenVocab& vocab,
                               const Tensor& token_embed) {
    if (answers.empty()) throw std::invalid_argument("embed_answer_set: empty answer vocabulary");
    std::unordered_map<std::string, int> seen;
    std::vector<Tensor> rows;
    for (const auto& a : answers) {
        if (!seen.emplace(a, 1).second)
            throw std::invalid_argument("embed_answer_set: duplicate answer '" + a + "'");
        rows.push_back(mean_rows(embed_answer_tokens(a, vocab, token_embed)));
    }
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

}  // namespace medvqa
