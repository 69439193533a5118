#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "medvqa/attention.hpp"
#include "medvqa/config.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/encoders.hpp"
#include "medvqa/fusion.hpp"
#include "medvqa/grad_check.hpp"
#include "medvqa/knowledge_graph.hpp"
#include "medvqa/latent_prompt.hpp"
#include "medvqa/objective.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// The assembled network. Parameter groups exist only for enabled modules, so
// the trainable parameter count reflects the toggles.
class Model {
public:
    Model(ModelConfig cfg, AnswerVocabulary answers, TokenVocab tokens, KnowledgeGraph graph, int image_size = 32)
        : cfg_(std::move(cfg)),
          answers_(std::move(answers)),
          tokens_(std::move(tokens)),
          graph_(std::move(graph)),
          image_size_(image_size) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        text_enc_ = TextEncoderParams::init(tokens_.size(), cfg_.max_len, cfg_.d, cfg_.heads, cfg_.enc_layers, rng);
        image_enc_ = ImageEncoderParams::init(image_size_, cfg_.patch, cfg_.d, cfg_.heads, cfg_.enc_layers, rng);
        const bool gm = cfg_.gm != GenerationMode::Off;
        if (gm) {
            prompt_ = init_prompt(cfg_.prompt_size, cfg_.d, mix_seed(cfg_.seed, 0x1a7e47));
            bank_ = AnswerBankParams::init(cfg_.d, cfg_.heads, rng);
            prompt_gen_ = AttentionParams::init(cfg_.d, cfg_.heads, rng);
        }
        for (int b = 0; b < cfg_.n_blocks; ++b)
            blocks_.push_back(FusionBlockParams::init(cfg_.d, cfg_.heads, rng, gm && cfg_.lf));
        if (cfg_.pf) {
            gat_ = GatParams::init(cfg_.d, cfg_.gat_heads, rng);
            prior_attn_ = AttentionParams::init(cfg_.d, cfg_.heads, rng);
            prior_proj_ = LinearParams::init(cfg_.d, cfg_.d, rng);
        }
        head_ = LinearParams::init(cfg_.d, answers_.size(), rng);
        cache_constants();
    }

    const ModelConfig& config() const { return cfg_; }
    const AnswerVocabulary& answer_vocab() const { return answers_; }
    const TokenVocab& token_vocab() const { return tokens_; }
    const KnowledgeGraph& graph() const { return graph_; }
    int image_size() const { return image_size_; }
    const Tensor& latent_prompt() const { return prompt_; }
    const Tensor& total_answer_embeds() const { return total_answer_embeds_; }

    std::vector<ParamGroup> param_groups() const {
        std::vector<ParamGroup> groups;
        auto push = [&groups](const std::string& name, std::vector<Tensor> params) {
            if (!params.empty()) groups.push_back({name, std::move(params)});
        };
        std::vector<Tensor> t;
        if (prompt_.defined()) push("prompt", {prompt_});
        if (bank_.proj.weight.defined()) {
            t.clear();
            bank_.collect(t);
            prompt_gen_.collect(t);
            push("prompt_generation", t);
        }
        t.clear();
        image_enc_.collect(t);
        push("image_encoder", t);
        t.clear();
        text_enc_.collect(t);
        push("text_encoder", t);
        t.clear();
        for (const auto& b : blocks_) b.collect(t);
        push("fusion_stack", t);
        if (cfg_.pf) {
            t.clear();
            gat_.collect(t);
            push("gat", t);
            t.clear();
            prior_attn_.collect(t);
            prior_proj_.collect(t);
            push("prior_fusion", t);
        }
        t.clear();
        head_.collect(t);
        push("head", t);
        return groups;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& g : param_groups())
            for (const auto& p : g.params) out.push_back(p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    // Sample-independent portion of the forward pass: answer-bank
    // conditioning of the prompt and the graph pathway. Shared across each
    // batch so gradients from all samples accumulate into one subgraph.
    struct SharedState {
        Tensor generated_prompt;  // X-hat_LP, P x d
        Tensor prior_rows;        // projected graph attention, G x d
    };

    SharedState forward_shared() const {
        SharedState s;
        if (cfg_.gm != GenerationMode::Off) {
            Tensor f_ta = process_answer_bank(total_answer_embeds_, bank_);
            s.generated_prompt = generate_prompt(prompt_, f_ta, prompt_gen_);
        }
        if (cfg_.pf) {
            Tensor f_g = gat_forward(graph_, node_features_, gat_).output;
            const Tensor& kv = cfg_.pf_uses_generated_prompt ? s.generated_prompt : prompt_;
            s.prior_rows = project(multi_head_attention(f_g, kv, prior_attn_, TokenMask::all(kv.rows())), prior_proj_);
        }
        return s;
    }

    struct SampleResult {
        Tensor loss;
        Tensor bce;
        Tensor consistency;  // undefined unless the consistency loss is active
        Tensor logits;
        int predicted = -1;
        int target = -1;
    };

    SampleResult forward_sample(const QASample& sample, const SharedState& shared) const {
        Tensor image_feats = encode_image(sample.image, image_enc_);
        TextEncoding text = encode_text(tokens_.encode(sample.question), text_enc_);

        Tensor prompt_in;  // threaded through the blocks only when LF is on
        if (cfg_.gm != GenerationMode::Off && cfg_.lf) prompt_in = shared.generated_prompt;
        FusionOutput fused = run_stack(image_feats, text.features, text.mask, prompt_in, blocks_, cfg_.fusion_order);

        Tensor integrated;
        if (cfg_.gm != GenerationMode::Off) {
            integrated = cfg_.lf ? fused.integrated : shared.generated_prompt;
            if (cfg_.pf) integrated = concat_rows({integrated, shared.prior_rows});
        }

        SampleResult r;
        r.target = answers_.index(sample.answer);
        Tensor combined = combine(integrated, fused.image_side, fused.lang_side, cfg_.combine_weights());
        r.logits = classify(combined, head_);
        r.predicted = argmax_index(r.logits);
        r.bce = bce_loss(r.logits, one_hot(r.target, answers_.size()));
        if (cfg_.gm == GenerationMode::WithConsistency) {
            r.consistency = consistency_loss(shared.generated_prompt, answer_token_embeds_[r.target]);
            r.loss = total_loss(r.bce, r.consistency, cfg_.loss_weights());
        } else {
            r.loss = r.bce;
        }
        return r;
    }

    struct BatchResult {
        Tensor loss;  // mean total loss over the batch
        double bce_value = 0.0;
        double consistency_value = 0.0;
    };

    BatchResult batch_loss(const std::vector<const QASample*>& batch) const {
        if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
        SharedState shared = forward_shared();
        BatchResult out;
        Tensor acc;
        for (const QASample* s : batch) {
            SampleResult r = forward_sample(*s, shared);
            out.bce_value += r.bce.value();
            if (r.consistency.defined()) out.consistency_value += r.consistency.value();
            acc = acc.defined() ? add(acc, r.loss) : r.loss;
        }
        out.loss = scale(acc, 1.0 / static_cast<double>(batch.size()));
        out.bce_value /= static_cast<double>(batch.size());
        out.consistency_value /= static_cast<double>(batch.size());
        return out;
    }

    EvalReport evaluate(const std::vector<QASample>& split) const {
        if (split.empty()) throw std::invalid_argument("evaluate: empty split");
        NoGradGuard no_grad;
        SharedState shared = forward_shared();
        std::vector<PredictionRecord> records;
        records.reserve(split.size());
        for (const auto& s : split) {
            SampleResult r = forward_sample(s, shared);
            records.push_back({s.qtype == QType::Open, r.predicted == r.target});
        }
        return compute_eval_report(records);
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    void save(const std::string& path) const {
        nlohmann::json doc;
        doc["format"] = 1;
        doc["config"] = cfg_.to_text();
        doc["config_hash"] = cfg_.hash();
        doc["answer_vocab"] = answers_.answers;
        doc["token_vocab"] = tokens_.words;
        doc["graph"] = {{"names", graph_.node_names}, {"kinds", graph_.node_kinds}, {"adjacency", graph_.adjacency}};
        doc["image_size"] = image_size_;
        doc["cached"] = {{"total_answer_embeds", tensor_to_json(total_answer_embeds_)},
                         {"node_features", tensor_to_json(node_features_)}};
        auto& answer_tokens = doc["cached"]["answer_token_embeds"] = nlohmann::json::array();
        for (const auto& t : answer_token_embeds_) answer_tokens.push_back(tensor_to_json(t));
        auto& params = doc["params"] = nlohmann::json::array();
        for (const auto& g : param_groups())
            for (std::size_t i = 0; i < g.params.size(); ++i) {
                nlohmann::json entry = tensor_to_json(g.params[i]);
                entry["name"] = g.name + "." + std::to_string(i);
                params.push_back(std::move(entry));
            }
        std::ofstream out(path);
        if (!out) throw CheckpointError("cannot write checkpoint " + path);
        out << doc.dump() << "\n";
    }

    static Model load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw CheckpointError("cannot open checkpoint " + path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError("corrupt checkpoint " + path + ": " + e.what());
        }
        try {
            if (doc.at("format").get<int>() != 1) throw CheckpointError("unsupported checkpoint format");
            ModelConfig cfg = ModelConfig::parse(doc.at("config").get<std::string>());
            if (cfg.hash() != doc.at("config_hash").get<std::string>())
                throw CheckpointError("checkpoint config hash mismatch");
            AnswerVocabulary answers = AnswerVocabulary::from(doc.at("answer_vocab").get<std::vector<std::string>>());
            TokenVocab tokens = TokenVocab::build(doc.at("token_vocab").get<std::vector<std::string>>());
            KnowledgeGraph graph;
            graph.node_names = doc.at("graph").at("names").get<std::vector<std::string>>();
            graph.node_kinds = doc.at("graph").at("kinds").get<std::vector<std::string>>();
            graph.adjacency = doc.at("graph").at("adjacency").get<std::vector<std::uint8_t>>();
            graph.validate();

            Model m(cfg, std::move(answers), std::move(tokens), std::move(graph), doc.at("image_size").get<int>());
            tensor_from_json(doc.at("cached").at("total_answer_embeds"), m.total_answer_embeds_);
            tensor_from_json(doc.at("cached").at("node_features"), m.node_features_);
            const auto& at = doc.at("cached").at("answer_token_embeds");
            if (at.size() != m.answer_token_embeds_.size())
                throw CheckpointError("checkpoint answer embedding count mismatch");
            for (std::size_t i = 0; i < m.answer_token_embeds_.size(); ++i) {
                // token counts per answer may differ only if vocab differs, which
                // the shape check below catches
                Tensor fresh = Tensor::zeros(at[i].at("rows").get<int>(), at[i].at("cols").get<int>());
                tensor_from_json(at[i], fresh);
                m.answer_token_embeds_[i] = fresh;
            }
            auto groups = m.param_groups();
            std::vector<Tensor> flat;
            for (const auto& g : groups)
                for (const auto& p : g.params) flat.push_back(p);
            const auto& params = doc.at("params");
            if (params.size() != flat.size())
                throw CheckpointError("checkpoint parameter count mismatch: file has " + std::to_string(params.size()) +
                                      ", model needs " + std::to_string(flat.size()));
            for (std::size_t i = 0; i < flat.size(); ++i) {
                Tensor t = flat[i];
                tensor_from_json(params[i], t);
            }
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError("corrupt checkpoint " + path + ": " + e.what());
        }
    }

private:
    void cache_constants() {
        // Embeddings of the answer vocabulary and graph node names, produced
        // once from the freshly initialized token table and frozen; the
        // conditioning parameters (Eq. 1, GAT) stay trainable.
        total_answer_embeds_ = embed_answer_set(answers_.answers, tokens_, text_enc_.token_embed).detach();
        for (const auto& a : answers_.answers)
            answer_token_embeds_.push_back(embed_answer_tokens(a, tokens_, text_enc_.token_embed).detach());
        node_features_ = embed_answer_set(graph_.node_names, tokens_, text_enc_.token_embed).detach();
    }

    static nlohmann::json tensor_to_json(const Tensor& t) {
        return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", t.data()}};
    }

    static void tensor_from_json(const nlohmann::json& j, Tensor& into) {
        const int r = j.at("rows").get<int>(), c = j.at("cols").get<int>();
        if (r != into.rows() || c != into.cols())
            throw CheckpointError("checkpoint tensor shape mismatch: file " + shape_str({r, c}) + ", model " +
                                  shape_str(into.shape()));
        auto values = j.at("data").get<std::vector<double>>();
        if (values.size() != into.numel()) throw CheckpointError("checkpoint tensor size mismatch");
        into.data() = std::move(values);
    }

    ModelConfig cfg_;
    AnswerVocabulary answers_;
    TokenVocab tokens_;
    KnowledgeGraph graph_;
    int image_size_ = 32;

    Tensor total_answer_embeds_;             // X_TA, constant
    std::vector<Tensor> answer_token_embeds_;  // per answer, constant
    Tensor node_features_;                   // F_OD, constant

    Tensor prompt_;
    AnswerBankParams bank_;
    AttentionParams prompt_gen_;
    ImageEncoderParams image_enc_;
    TextEncoderParams text_enc_;
    std::vector<FusionBlockParams> blocks_;
    GatParams gat_;
    AttentionParams prior_attn_;
    LinearParams prior_proj_;
    LinearParams head_;
};

}  // namespace medvqa
