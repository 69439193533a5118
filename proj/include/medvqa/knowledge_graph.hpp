#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "medvqa/attention.hpp"
#include "medvqa/rng.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

struct GraphLoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Organ/disease nodes with a binary, symmetric adjacency. Self-loops are
// forced at load/validation time so no node is isolated.
struct KnowledgeGraph {
    std::vector<std::string> node_names;
    std::vector<std::string> node_kinds;  // "organ" or "disease"
    std::vector<std::uint8_t> adjacency;  // G x G, row-major

    int size() const { return static_cast<int>(node_names.size()); }

    bool edge(int i, int j) const { return adjacency[static_cast<std::size_t>(i) * size() + j] != 0; }

    std::vector<int> neighbors(int i) const {
        std::vector<int> out;
        for (int j = 0; j < size(); ++j)
            if (edge(i, j)) out.push_back(j);
        return out;
    }

    int edge_count_undirected() const {
        int c = 0;
        for (int i = 0; i < size(); ++i)
            for (int j = i + 1; j < size(); ++j)
                if (edge(i, j)) ++c;
        return c;
    }

    void add_self_loops() {
        for (int i = 0; i < size(); ++i) adjacency[static_cast<std::size_t>(i) * size() + i] = 1;
    }

    void validate() const {
        const int g = size();
        if (g < 1) throw GraphLoadError("knowledge graph: no nodes");
        if (node_kinds.size() != node_names.size()) throw GraphLoadError("knowledge graph: kinds/names length mismatch");
        if (adjacency.size() != static_cast<std::size_t>(g) * g)
            throw GraphLoadError("knowledge graph: adjacency is not " + std::to_string(g) + "x" + std::to_string(g));
        for (int i = 0; i < g; ++i)
            for (int j = 0; j < g; ++j) {
                const std::uint8_t v = adjacency[static_cast<std::size_t>(i) * g + j];
                if (v != 0 && v != 1)
                    throw GraphLoadError("knowledge graph: non-binary adjacency entry at (" + std::to_string(i) + "," +
                                         std::to_string(j) + ")");
                if (v != adjacency[static_cast<std::size_t>(j) * g + i])
                    throw GraphLoadError("knowledge graph: asymmetric adjacency at (" + std::to_string(i) + "," +
                                         std::to_string(j) + ")");
            }
        for (int i = 0; i < g; ++i)
            if (!edge(i, i)) throw GraphLoadError("knowledge graph: missing self-loop at node " + std::to_string(i));
    }
};

// File format: {"nodes": [{"name": str, "kind": "organ"|"disease"}],
//               "edges": [[i, j]]} with 0-based indices.
inline KnowledgeGraph load_knowledge_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw GraphLoadError("knowledge graph: cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw GraphLoadError("knowledge graph: parse failure in " + path + ": " + e.what());
    }
    if (!doc.contains("nodes") || !doc.contains("edges")) throw GraphLoadError("knowledge graph: missing nodes/edges");
    KnowledgeGraph g;
    for (const auto& node : doc["nodes"]) {
        g.node_names.push_back(node.at("name").get<std::string>());
        const std::string kind = node.at("kind").get<std::string>();
        if (kind != "organ" && kind != "disease")
            throw GraphLoadError("knowledge graph: node kind must be organ or disease, got '" + kind + "'");
        g.node_kinds.push_back(kind);
    }
    const int n = g.size();
    if (n < 1) throw GraphLoadError("knowledge graph: no nodes");
    g.adjacency.assign(static_cast<std::size_t>(n) * n, 0);
    for (const auto& e : doc["edges"]) {
        if (!e.is_array() || e.size() != 2) throw GraphLoadError("knowledge graph: edge entries must be [i, j]");
        const int i = e[0].get<int>(), j = e[1].get<int>();
        if (i < 0 || i >= n || j < 0 || j >= n)
            throw GraphLoadError("knowledge graph: edge endpoint out of range: [" + std::to_string(i) + "," +
                                 std::to_string(j) + "]");
        g.adjacency[static_cast<std::size_t>(i) * n + j] = 1;
        g.adjacency[static_cast<std::size_t>(j) * n + i] = 1;
    }
    g.add_self_loops();
    g.validate();
    return g;
}

inline void save_knowledge_graph(const KnowledgeGraph& g, const std::string& path) {
    nlohmann::json doc;
    doc["nodes"] = nlohmann::json::array();
    for (int i = 0; i < g.size(); ++i) doc["nodes"].push_back({{"name", g.node_names[i]}, {"kind", g.node_kinds[i]}});
    doc["edges"] = nlohmann::json::array();
    for (int i = 0; i < g.size(); ++i)
        for (int j = i + 1; j < g.size(); ++j)
            if (g.edge(i, j)) doc["edges"].push_back({i, j});
    std::ofstream out(path);
    if (!out) throw GraphLoadError("knowledge graph: cannot write " + path);
    out << doc.dump(2) << "\n";
}

inline constexpr double kGatLeakySlope = 0.2;

struct GatParams {
    int model_dim = 0;
    int head_count = 0;
    std::vector<Tensor> weight;      // per head, d x d_h
    std::vector<Tensor> attn_left;   // per head, d_h x 1
    std::vector<Tensor> attn_right;  // per head, d_h x 1

    int head_dim() const { return model_dim / head_count; }

    static GatParams init(int d, int heads, Rng& rng) {
        if (heads < 1 || d % heads != 0)
            throw std::invalid_argument("GatParams: width " + std::to_string(d) +
                                        " must be a positive multiple of head count " + std::to_string(heads));
        GatParams p;
        p.model_dim = d;
        p.head_count = heads;
        const int dh = d / heads;
        for (int h = 0; h < heads; ++h) {
            p.weight.push_back(glorot_uniform(d, dh, rng));
            p.attn_left.push_back(glorot_uniform(dh, 1, rng));
            p.attn_right.push_back(glorot_uniform(dh, 1, rng));
        }
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        for (int h = 0; h < head_count; ++h) {
            out.push_back(weight[h]);
            out.push_back(attn_left[h]);
            out.push_back(attn_right[h]);
        }
    }
};

struct GatResult {
    Tensor output;  // G x d
    // per head, dense G x G attention weights (zero on non-neighbors),
    // captured for inspection and testing
    std::vector<std::vector<double>> weights;
};

// One multi-head graph attention layer over the neighbor lists. Per head:
// e_ij = LeakyReLU(a_l . Wh_i + a_r . Wh_j) for j in N(i), softmax over the
// neighborhood, then the weighted sum of transformed neighbors. Heads are
// concatenated and passed through ELU.
inline GatResult gat_forward(const KnowledgeGraph& g, const Tensor& node_features, const GatParams& params) {
    g.validate();
    const int n = g.size();
    if (node_features.rows() != n || node_features.cols() != params.model_dim)
        throw std::invalid_argument("gat_forward: node features " + shape_str(node_features.shape()) +
                                    " do not match graph size " + std::to_string(n) + " and width " +
                                    std::to_string(params.model_dim));
    GatResult result;
    result.weights.assign(params.head_count, std::vector<double>(static_cast<std::size_t>(n) * n, 0.0));
    std::vector<Tensor> head_outputs;
    for (int h = 0; h < params.head_count; ++h) {
        Tensor transformed = matmul(node_features, params.weight[h]);  // G x d_h
        Tensor score_left = matmul(transformed, params.attn_left[h]);  // G x 1
        Tensor score_right = matmul(transformed, params.attn_right[h]);
        std::vector<Tensor> rows;
        rows.reserve(n);
        for (int i = 0; i < n; ++i) {
            const std::vector<int> nbrs = g.neighbors(i);
            Tensor li = gather_rows(score_left, {i});                            // 1 x 1
            Tensor scores = add_bscalar(transpose(gather_rows(score_right, nbrs)), li);  // 1 x |N|
            Tensor alpha = softmax_rows(leaky_relu(scores, kGatLeakySlope));
            for (std::size_t k = 0; k < nbrs.size(); ++k)
                result.weights[h][static_cast<std::size_t>(i) * n + nbrs[k]] = alpha.at(0, static_cast<int>(k));
            rows.push_back(matmul(alpha, gather_rows(transformed, nbrs)));  // 1 x d_h
        }
        head_outputs.push_back(n == 1 ? rows[0] : concat_rows(rows));
    }
    Tensor merged = params.head_count == 1 ? head_outputs[0] : concat_cols(head_outputs);
    result.output = elu(merged);
    return result;
}

// Injects the graph summary into the integrated information: the graph
// features query the latent prompt, the result is projected and stacked
// below the integrated prompt state along the token axis.
inline Tensor prior_fuse(const Tensor& integrated, const Tensor& graph_feats, const Tensor& prompt_kv,
                         const AttentionParams& attn, const LinearParams& proj) {
    if (integrated.cols() != graph_feats.cols() || graph_feats.cols() != prompt_kv.cols())
        throw std::invalid_argument("prior_fuse: width mismatch " + shape_str(integrated.shape()) + " / " +
                                    shape_str(graph_feats.shape()) + " / " + shape_str(prompt_kv.shape()));
    Tensor attended = multi_head_attention(graph_feats, prompt_kv, attn, TokenMask::all(prompt_kv.rows()));
    return concat_rows({integrated, project(attended, proj)});
}

}  // namespace medvqa
