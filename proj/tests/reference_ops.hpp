// Independent reference implementations used as oracles. Plain loops over
// plain vectors; no Tensor machinery, so they share no code path with the
// implementations they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "medvqa/attention.hpp"
#include "medvqa/rng.hpp"
#include "medvqa/tensor.hpp"

namespace refops {

using Mat = std::vector<std::vector<double>>;

inline Mat make_mat(int rows, int cols, double fill = 0.0) {
    return Mat(rows, std::vector<double>(cols, fill));
}

inline Mat from_tensor(const medvqa::Tensor& t) {
    Mat m = make_mat(t.rows(), t.cols());
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

inline medvqa::Tensor to_tensor(const Mat& m) {
    std::vector<double> flat;
    for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
    return medvqa::Tensor::from_values(static_cast<int>(m.size()), static_cast<int>(m[0].size()), flat);
}

inline Mat random_mat(int rows, int cols, medvqa::Rng& rng, double lo = -1.0, double hi = 1.0) {
    Mat m = make_mat(rows, cols);
    for (auto& row : m)
        for (auto& v : row) v = rng.uniform(lo, hi);
    return m;
}

// triple-loop reference multiply
inline Mat matmul(const Mat& a, const Mat& b) {
    const int m = static_cast<int>(a.size()), k = static_cast<int>(b.size()), n = static_cast<int>(b[0].size());
    Mat c = make_mat(m, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += a[i][kk] * b[kk][j];
            c[i][j] = acc;
        }
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t = make_mat(static_cast<int>(a[0].size()), static_cast<int>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
    return t;
}

inline Mat affine(const Mat& x, const Mat& w, const std::vector<double>& b) {
    Mat y = matmul(x, w);
    for (auto& row : y)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    return y;
}

inline std::vector<double> softmax(std::vector<double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : row) v /= sum;
    return row;
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& gain, const std::vector<double>& bias,
                      double eps = 1e-5) {
    Mat y = x;
    const int d = static_cast<int>(x[0].size());
    for (auto& row : y) {
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= d;
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
    }
    return y;
}

// Plain-matrix mirror of the attention parameters, extracted by value.
struct AttentionWeights {
    std::vector<Mat> wq, wk, wv;
    std::vector<std::vector<double>> bq, bk, bv;
    Mat wo;
    std::vector<double> bo;
    std::vector<double> gain, bias;

    static AttentionWeights from(const medvqa::AttentionParams& p) {
        AttentionWeights w;
        for (int h = 0; h < p.head_count; ++h) {
            w.wq.push_back(from_tensor(p.query[h].weight));
            w.wk.push_back(from_tensor(p.key[h].weight));
            w.wv.push_back(from_tensor(p.value[h].weight));
            w.bq.push_back(p.query[h].bias.data());
            w.bk.push_back(p.key[h].bias.data());
            w.bv.push_back(p.value[h].bias.data());
        }
        w.wo = from_tensor(p.output.weight);
        w.bo = p.output.bias.data();
        w.gain = p.norm.gain.data();
        w.bias = p.norm.bias.data();
        return w;
    }
};

// Direct evaluation of multi-head attention with residual and post-norm.
inline Mat attention(const Mat& q_in, const Mat& kv_in, const AttentionWeights& w,
                     const std::vector<bool>& mask) {
    const int m = static_cast<int>(q_in.size());
    const int n = static_cast<int>(kv_in.size());
    const int heads = static_cast<int>(w.wq.size());
    const int dh = static_cast<int>(w.wq[0][0].size());
    const int d = heads * dh;
    Mat merged = make_mat(m, d);
    for (int h = 0; h < heads; ++h) {
        Mat q = affine(q_in, w.wq[h], w.bq[h]);
        Mat k = affine(kv_in, w.wk[h], w.bk[h]);
        Mat v = affine(kv_in, w.wv[h], w.bv[h]);
        for (int i = 0; i < m; ++i) {
            std::vector<double> scores(n);
            for (int j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int t = 0; t < dh; ++t) dot += q[i][t] * k[j][t];
                scores[j] = dot / std::sqrt(static_cast<double>(dh)) + (mask[j] ? 0.0 : -1e30);
            }
            const auto alpha = softmax(scores);
            for (int t = 0; t < dh; ++t) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += alpha[j] * v[j][t];
                merged[i][h * dh + t] = acc;
            }
        }
    }
    Mat projected = affine(merged, w.wo, w.bo);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) projected[i][j] += q_in[i][j];
    return layer_norm(projected, w.gain, w.bias);
}

// Dense masked-softmax reference for one GAT layer: scores over all node
// pairs, non-edges filled with -1e30 before the softmax, ELU on the
// concatenated heads.
inline Mat gat_dense(const Mat& features, const std::vector<std::uint8_t>& adjacency,
                     const std::vector<Mat>& weight, const std::vector<std::vector<double>>& attn_left,
                     const std::vector<std::vector<double>>& attn_right, double leaky_slope) {
    const int n = static_cast<int>(features.size());
    const int heads = static_cast<int>(weight.size());
    const int dh = static_cast<int>(weight[0][0].size());
    Mat out = make_mat(n, heads * dh);
    for (int h = 0; h < heads; ++h) {
        Mat transformed = matmul(features, weight[h]);
        std::vector<double> sl(n, 0.0), sr(n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < dh; ++t) {
                sl[i] += transformed[i][t] * attn_left[h][t];
                sr[i] += transformed[i][t] * attn_right[h][t];
            }
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(n);
            for (int j = 0; j < n; ++j) {
                const double e = sl[i] + sr[j];
                const double activated = e >= 0.0 ? e : leaky_slope * e;
                scores[j] = adjacency[static_cast<std::size_t>(i) * n + j] ? activated : -1e30;
            }
            const auto alpha = softmax(scores);
            for (int t = 0; t < dh; ++t) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += alpha[j] * transformed[j][t];
                out[i][h * dh + t] = acc;
            }
        }
    }
    for (auto& row : out)
        for (auto& v : row) v = v >= 0.0 ? v : std::expm1(v);
    return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    return worst;
}

inline double max_abs_diff(const medvqa::Tensor& t, const Mat& m) { return max_abs_diff(from_tensor(t), m); }

}  // namespace refops
