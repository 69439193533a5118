#pragma once

#include <stdexcept>

#include "medvqa/attention.hpp"
#include "medvqa/rng.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

// Learnable prompt matrix, P x d, entries i.i.d. Normal(0, 0.02^2).
inline Tensor init_prompt(int prompt_size, int d, std::uint64_t seed) {
    if (prompt_size < 1 || d < 1)
        throw std::invalid_argument("init_prompt: prompt size and width must be >= 1");
    Rng rng(seed);
    std::vector<double> values(static_cast<std::size_t>(prompt_size) * d);
    for (auto& v : values) v = rng.normal(0.0, 0.02);
    return Tensor::from_values(prompt_size, d, std::move(values)).set_requires_grad(true);
}

// Answer-bank conditioning parameters: self-attention over the total answer
// embeddings followed by a projection.
struct AnswerBankParams {
    AttentionParams attn;
    LinearParams proj;

    static AnswerBankParams init(int d, int heads, Rng& rng) {
        return {AttentionParams::init(d, heads, rng), LinearParams::init(d, d, rng)};
    }

    void collect(std::vector<Tensor>& out) const {
        attn.collect(out);
        proj.collect(out);
    }
};

// Processed bank over the total answer embeddings. Recomputed each forward
// pass: the answer embeddings are fixed per dataset, the parameters train.
inline Tensor process_answer_bank(const Tensor& total_answer_embeds, const AnswerBankParams& params) {
    if (total_answer_embeds.rows() < 1) throw std::invalid_argument("process_answer_bank: empty answer set");
    return project(self_attention(total_answer_embeds, params.attn), params.proj);
}

// Cross-attention with the prompt as query and the processed answer bank as
// key/value.
inline Tensor generate_prompt(const Tensor& prompt, const Tensor& bank, const AttentionParams& params) {
    return multi_head_attention(prompt, bank, params, TokenMask::all(bank.rows()));
}

inline constexpr double kCosineNormEpsilon = 1e-12;

// One minus the cosine similarity of the two token-mean pooled arguments.
// Norms are epsilon-guarded so a zero-norm pooled vector yields a finite
// value and gradient. Range [0, 2].
inline Tensor consistency_loss(const Tensor& generated_prompt, const Tensor& target_answer_embeds) {
    if (generated_prompt.cols() != target_answer_embeds.cols())
        throw std::invalid_argument("consistency_loss: width mismatch " + shape_str(generated_prompt.shape()) +
                                    " vs " + shape_str(target_answer_embeds.shape()));
    Tensor u = mean_rows(generated_prompt);
    Tensor v = mean_rows(target_answer_embeds);
    // epsilon^2 inside the sqrt keeps d|u|/du finite at u = 0
    Tensor norm_u = add_scalar(sqrt_elems(add_scalar(matmul(u, transpose(u)), kCosineNormEpsilon * kCosineNormEpsilon)),
                               kCosineNormEpsilon);
    Tensor norm_v = add_scalar(sqrt_elems(add_scalar(matmul(v, transpose(v)), kCosineNormEpsilon * kCosineNormEpsilon)),
                               kCosineNormEpsilon);
    Tensor cosine = div(matmul(u, transpose(v)), mul(norm_u, norm_v));
    return add_scalar(scale(cosine, -1.0), 1.0);
}

}  // namespace medvqa
