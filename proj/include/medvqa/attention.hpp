#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvqa/rng.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

// Additive mask constant for padded key positions; exp(-1e30 - max) underflows
// to exactly zero weight.
inline constexpr double kMaskFill = -1e30;

// Valid (true) vs padded (false) positions of one token sequence.
struct TokenMask {
    std::vector<bool> valid;

    static TokenMask all(int n) { return TokenMask{std::vector<bool>(n, true)}; }

    int size() const { return static_cast<int>(valid.size()); }

    void validate() const {
        bool any = false;
        for (bool v : valid) any = any || v;
        if (!any) throw std::invalid_argument("TokenMask: fully masked key set");
    }

    TokenMask concat(const TokenMask& other) const {
        TokenMask out = *this;
        out.valid.insert(out.valid.end(), other.valid.begin(), other.valid.end());
        return out;
    }
};

inline Tensor glorot_uniform(int in_dim, int out_dim, Rng& rng) {
    const double limit = std::sqrt(6.0 / (in_dim + out_dim));
    std::vector<double> values(static_cast<std::size_t>(in_dim) * out_dim);
    for (auto& v : values) v = rng.uniform(-limit, limit);
    return Tensor::from_values(in_dim, out_dim, std::move(values)).set_requires_grad(true);
}

struct LinearParams {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out

    static LinearParams init(int in_dim, int out_dim, Rng& rng) {
        return {glorot_uniform(in_dim, out_dim, rng), Tensor::zeros(1, out_dim).set_requires_grad(true)};
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(weight);
        out.push_back(bias);
    }
};

struct LayerNormParams {
    Tensor gain;  // 1 x d
    Tensor bias;  // 1 x d

    static LayerNormParams init(int d) {
        return {Tensor::full(1, d, 1.0).set_requires_grad(true), Tensor::zeros(1, d).set_requires_grad(true)};
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(gain);
        out.push_back(bias);
    }
};

// Learned affine map, rowwise: x W + b.
inline Tensor project(const Tensor& x, const LinearParams& p) {
    if (x.cols() != p.weight.rows())
        throw std::invalid_argument("project: width mismatch " + shape_str(x.shape()) + " vs " + shape_str(p.weight.shape()));
    return add_rowvec(matmul(x, p.weight), p.bias);
}

struct AttentionParams {
    int model_dim = 0;
    int head_count = 0;
    std::vector<LinearParams> query;  // per head, d x d_h
    std::vector<LinearParams> key;
    std::vector<LinearParams> value;
    LinearParams output;  // d x d
    LayerNormParams norm;

    int head_dim() const { return model_dim / head_count; }

    static AttentionParams init(int d, int heads, Rng& rng) {
        if (heads < 1 || d % heads != 0)
            throw std::invalid_argument("AttentionParams: model width " + std::to_string(d) +
                                        " must be a positive multiple of head count " + std::to_string(heads));
        AttentionParams p;
        p.model_dim = d;
        p.head_count = heads;
        const int dh = d / heads;
        for (int h = 0; h < heads; ++h) {
            p.query.push_back(LinearParams::init(d, dh, rng));
            p.key.push_back(LinearParams::init(d, dh, rng));
            p.value.push_back(LinearParams::init(d, dh, rng));
        }
        p.output = LinearParams::init(d, d, rng);
        p.norm = LayerNormParams::init(d);
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        for (int h = 0; h < head_count; ++h) {
            query[h].collect(out);
            key[h].collect(out);
            value[h].collect(out);
        }
        output.collect(out);
        norm.collect(out);
    }
};

// Scaled dot-product attention over kv_in with queries from q_in, followed by
// the output projection, a residual connection from q_in, and layer
// normalization (post-norm). Masked key positions get kMaskFill before the
// softmax and end up with exactly zero weight.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& params,
                                   const TokenMask& mask) {
    if (q_in.cols() != params.model_dim || kv_in.cols() != params.model_dim)
        throw std::invalid_argument("multi_head_attention: width mismatch, inputs " + shape_str(q_in.shape()) +
                                    " / " + shape_str(kv_in.shape()) + " vs model width " +
                                    std::to_string(params.model_dim));
    if (mask.size() != kv_in.rows())
        throw std::invalid_argument("multi_head_attention: mask length " + std::to_string(mask.size()) +
                                    " vs key count " + std::to_string(kv_in.rows()));
    mask.validate();

    std::vector<double> mask_fill(mask.size());
    for (int j = 0; j < mask.size(); ++j) mask_fill[j] = mask.valid[j] ? 0.0 : kMaskFill;
    const Tensor mask_row = Tensor::from_values(1, mask.size(), std::move(mask_fill));

    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
    std::vector<Tensor> heads;
    heads.reserve(params.head_count);
    for (int h = 0; h < params.head_count; ++h) {
        Tensor q = project(q_in, params.query[h]);
        Tensor k = project(kv_in, params.key[h]);
        Tensor v = project(kv_in, params.value[h]);
        Tensor scores = add_rowvec(scale(matmul(q, transpose(k)), inv_scale), mask_row);
        heads.push_back(matmul(softmax_rows(scores), v));
    }
    Tensor merged = params.head_count == 1 ? heads[0] : concat_cols(heads);
    Tensor attended = project(merged, params.output);
    return layer_norm(add(q_in, attended), params.norm.gain, params.norm.bias);
}

inline Tensor self_attention(const Tensor& x, const AttentionParams& params, const TokenMask& mask) {
    return multi_head_attention(x, x, params, mask);
}

inline Tensor self_attention(const Tensor& x, const AttentionParams& params) {
    return multi_head_attention(x, x, params, TokenMask::all(x.rows()));
}

}  // namespace medvqa
