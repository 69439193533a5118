#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "medvqa/encoders.hpp"
#include "medvqa/knowledge_graph.hpp"
#include "medvqa/rng.hpp"

namespace medvqa {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class QType { Open, Closed };

inline std::string qtype_str(QType t) { return t == QType::Open ? "open" : "closed"; }

struct QASample {
    ImageGrid image;
    std::string question;
    std::string answer;
    QType qtype = QType::Open;
};

// Ordered distinct answer strings; order is stable across runs.
struct AnswerVocabulary {
    std::vector<std::string> answers;
    std::unordered_map<std::string, int> index_map;

    static AnswerVocabulary from(std::vector<std::string> list) {
        AnswerVocabulary v;
        v.answers = std::move(list);
        for (std::size_t i = 0; i < v.answers.size(); ++i)
            if (!v.index_map.emplace(v.answers[i], static_cast<int>(i)).second)
                throw DataError("answer vocabulary: duplicate answer '" + v.answers[i] + "'");
        if (v.answers.empty()) throw DataError("answer vocabulary: empty");
        return v;
    }

    int size() const { return static_cast<int>(answers.size()); }

    int index(const std::string& a) const {
        auto it = index_map.find(a);
        if (it == index_map.end()) throw DataError("answer vocabulary: unknown answer '" + a + "'");
        return it->second;
    }

    bool contains(const std::string& a) const { return index_map.count(a) != 0; }
};

struct SyntheticSpec {
    int n_train = 512;
    int n_val = 128;
    int n_test = 128;
    int organs = 4;
    int diseases = 8;
    std::uint64_t seed = 7;
    int image_size = 32;
    double noise = 0.0;  // Gaussian sigma

    int organ_grid() const { return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(organs)))); }
    int cell() const { return image_size / organ_grid(); }
    int offset_range() const { return cell() / 4 + 1; }
    int size_range() const { return std::max(1, cell() / 4); }

    void validate() const {
        if (n_train < 1 || n_val < 1 || n_test < 1) throw DataError("synthetic spec: split counts must be >= 1");
        if (organs < 1) throw DataError("synthetic spec: at least one organ required");
        if (diseases < organs)
            throw DataError("synthetic spec: disease count " + std::to_string(diseases) +
                            " below organ count " + std::to_string(organs) +
                            "; every organ needs an adjacent disease");
        if (!(noise >= 0.0 && noise <= 0.2)) throw DataError("synthetic spec: noise must lie in [0, 0.2]");
        if (image_size < 4 || image_size % organ_grid() != 0)
            throw DataError("synthetic spec: image size " + std::to_string(image_size) +
                            " is not divisible into a " + std::to_string(organ_grid()) + "-wide organ grid");
        if (cell() < 4) throw DataError("synthetic spec: organ cells smaller than 4 pixels");
        const long n_edges = static_cast<long>(diseases) + std::min(organs, diseases);
        const long capacity = n_edges * offset_range() * offset_range() * size_range();
        if (capacity < static_cast<long>(n_train) + n_val + n_test)
            throw DataError("synthetic spec: requested " + std::to_string(n_train + n_val + n_test) +
                            " samples but only " + std::to_string(capacity) + " distinct image parameter tuples exist");
    }
};

inline const std::vector<std::string>& organ_name_pool() {
    static const std::vector<std::string> pool = {"heart", "lung", "liver", "kidney",
                                                  "spleen", "brain", "stomach", "pancreas"};
    return pool;
}

inline const std::vector<std::string>& disease_name_pool() {
    static const std::vector<std::string> pool = {"edema",  "tumor",   "fibrosis", "cyst",
                                                  "infection", "lesion", "atrophy",  "calcification",
                                                  "stenosis",  "abscess", "nodule",   "scarring"};
    return pool;
}

inline std::string organ_name(int i) {
    const auto& pool = organ_name_pool();
    return i < static_cast<int>(pool.size()) ? pool[i] : "organ" + std::to_string(i);
}

inline std::string disease_name(int i) {
    const auto& pool = disease_name_pool();
    return i < static_cast<int>(pool.size()) ? pool[i] : "disease" + std::to_string(i);
}

// Bipartite organ-disease graph: disease i is linked to organ (i mod organs),
// and the first min(organs, diseases) diseases additionally to the next organ
// around. Deterministic in the spec alone.
inline KnowledgeGraph synthetic_knowledge_graph(int organs, int diseases) {
    KnowledgeGraph g;
    for (int i = 0; i < organs; ++i) {
        g.node_names.push_back(organ_name(i));
        g.node_kinds.push_back("organ");
    }
    for (int i = 0; i < diseases; ++i) {
        g.node_names.push_back(disease_name(i));
        g.node_kinds.push_back("disease");
    }
    const int n = organs + diseases;
    g.adjacency.assign(static_cast<std::size_t>(n) * n, 0);
    auto link = [&](int organ, int disease) {
        const int di = organs + disease;
        g.adjacency[static_cast<std::size_t>(organ) * n + di] = 1;
        g.adjacency[static_cast<std::size_t>(di) * n + organ] = 1;
    };
    for (int i = 0; i < diseases; ++i) link(i % organs, i);
    for (int i = 0; i < std::min(organs, diseases); ++i) link((i + 1) % organs, i);
    g.add_self_loops();
    g.validate();
    return g;
}

namespace detail {

struct RenderParams {
    int organ = 0;
    int disease = 0;
    int dx = 0;
    int dy = 0;
    int size_jitter = 0;

    std::uint64_t key(const SyntheticSpec& spec) const {
        std::uint64_t k = static_cast<std::uint64_t>(organ);
        k = k * static_cast<std::uint64_t>(spec.diseases + 1) + disease;
        k = k * static_cast<std::uint64_t>(spec.offset_range()) + dx;
        k = k * static_cast<std::uint64_t>(spec.offset_range()) + dy;
        k = k * static_cast<std::uint64_t>(spec.size_range()) + size_jitter;
        return k;
    }
};

// Organ determines the grid cell holding the shape; disease determines its
// intensity level and stripe texture. At sigma = 0 the pair is exactly
// decodable from the pixels.
inline ImageGrid render_image(const SyntheticSpec& spec, const RenderParams& rp, Rng& rng) {
    ImageGrid img;
    img.height = img.width = spec.image_size;
    img.pixels.assign(static_cast<std::size_t>(spec.image_size) * spec.image_size, 0.0);
    const int grid = spec.organ_grid();
    const int cell = spec.cell();
    const int cell_row = (rp.organ / grid) * cell;
    const int cell_col = (rp.organ % grid) * cell;
    const int shape = cell / 2 + rp.size_jitter;
    const int top = cell_row + rp.dy;
    const int left = cell_col + rp.dx;
    const double intensity = 0.25 + 0.7 * (rp.disease + 1) / (spec.diseases + 1);
    // stripes alternate +/- delta around the level, so the mean intensity
    // still identifies the disease regardless of jitter
    const bool striped = rp.disease % 2 == 1;
    const double delta = 0.04;
    for (int r = top; r < top + shape && r < spec.image_size; ++r)
        for (int c = left; c < left + shape && c < spec.image_size; ++c) {
            double v = intensity;
            if (striped) v += (r % 2 == 0) ? delta : -delta;
            img.pixels[static_cast<std::size_t>(r) * spec.image_size + c] = std::clamp(v, 0.0, 1.0);
        }
    if (spec.noise > 0.0)
        for (auto& p : img.pixels) p = std::clamp(p + rng.normal(0.0, spec.noise), 0.0, 1.0);
    return img;
}

}  // namespace detail

struct SyntheticData {
    std::vector<QASample> train;
    std::vector<QASample> val;
    std::vector<QASample> test;
    AnswerVocabulary vocab;
    KnowledgeGraph graph;
};

// Deterministic synthetic Med-VQA task. Each sample draws an (organ, disease)
// pair adjacent in the knowledge graph, renders it with small position/size
// jitter (the jittered parameter tuples are pairwise distinct across splits),
// and asks one of four templated questions. Answers are fully determined by
// the pair, so Bayes accuracy at sigma = 0 is 100%.
inline SyntheticData generate(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticData data;
    data.graph = synthetic_knowledge_graph(spec.organs, spec.diseases);

    std::vector<std::string> answers = {"yes", "no"};
    for (int i = 0; i < spec.organs; ++i) answers.push_back(organ_name(i));
    for (int i = 0; i < spec.diseases; ++i) answers.push_back(disease_name(i));
    data.vocab = AnswerVocabulary::from(answers);

    std::vector<std::pair<int, int>> edges;  // (organ, disease)
    for (int o = 0; o < spec.organs; ++o)
        for (int s = 0; s < spec.diseases; ++s)
            if (data.graph.edge(o, spec.organs + s)) edges.emplace_back(o, s);

    std::unordered_set<std::uint64_t> used_tuples;
    std::uint64_t sample_counter = 0;
    auto make_sample = [&]() {
        Rng rng(mix_seed(spec.seed, ++sample_counter));
        detail::RenderParams rp;
        do {
            const auto& e = edges[rng.below(edges.size())];
            rp.organ = e.first;
            rp.disease = e.second;
            rp.dx = static_cast<int>(rng.below(spec.offset_range()));
            rp.dy = static_cast<int>(rng.below(spec.offset_range()));
            rp.size_jitter = static_cast<int>(rng.below(spec.size_range()));
        } while (!used_tuples.insert(rp.key(spec)).second);

        QASample s;
        s.image = detail::render_image(spec, rp, rng);
        const std::string organ = organ_name(rp.organ);
        const std::string disease = disease_name(rp.disease);
        if (rng.below(2) == 0) {
            s.qtype = QType::Open;
            if (rng.below(2) == 0) {
                s.question = "what organ is shown";
                s.answer = organ;
            } else {
                s.question = "what disease is present";
                s.answer = disease;
            }
        } else {
            s.qtype = QType::Closed;
            const bool about_organ = rng.below(2) == 0;
            const bool yes = rng.below(2) == 0;
            if (about_organ) {
                std::string asked = organ;
                if (!yes && spec.organs > 1) {
                    int other = static_cast<int>(rng.below(spec.organs - 1));
                    if (other >= rp.organ) ++other;
                    asked = organ_name(other);
                }
                s.question = "is the organ " + asked;
                s.answer = (asked == organ) ? "yes" : "no";
            } else {
                std::string asked = disease;
                if (!yes && spec.diseases > 1) {
                    int other = static_cast<int>(rng.below(spec.diseases - 1));
                    if (other >= rp.disease) ++other;
                    asked = disease_name(other);
                }
                s.question = "is the disease " + asked;
                s.answer = (asked == disease) ? "yes" : "no";
            }
        }
        return s;
    };

    for (int i = 0; i < spec.n_train; ++i) data.train.push_back(make_sample());
    for (int i = 0; i < spec.n_val; ++i) data.val.push_back(make_sample());
    for (int i = 0; i < spec.n_test; ++i) data.test.push_back(make_sample());
    return data;
}

// ---------------------------------------------------------------------------
// File I/O: JSON Lines samples, JSON array vocabulary
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const QASample& s) {
    nlohmann::json img = nlohmann::json::array();
    for (int r = 0; r < s.image.height; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < s.image.width; ++c) row.push_back(s.image.at(r, c));
        img.push_back(std::move(row));
    }
    return nlohmann::json{{"image", std::move(img)},
                          {"question", s.question},
                          {"answer", s.answer},
                          {"qtype", qtype_str(s.qtype)}};
}

inline void write_samples(const std::vector<QASample>& samples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
}

inline void write_vocab(const AnswerVocabulary& vocab, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << nlohmann::json(vocab.answers).dump(2) << "\n";
}

inline AnswerVocabulary load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocabulary file " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw DataError("vocabulary file " + path + ": expected a JSON array of strings");
    std::vector<std::string> answers;
    for (const auto& a : doc) answers.push_back(a.get<std::string>());
    return AnswerVocabulary::from(answers);
}

// Validated load of a JSON Lines sample file; failures name the line number.
inline std::vector<QASample> load_samples(const std::string& path, const AnswerVocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file " + path);
    std::vector<QASample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + " line " + std::to_string(line_no);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": malformed record: " + e.what());
        }
        QASample s;
        try {
            const auto& img = rec.at("image");
            s.image.height = static_cast<int>(img.size());
            if (s.image.height == 0) throw DataError("empty image");
            s.image.width = static_cast<int>(img[0].size());
            for (const auto& row : img) {
                if (static_cast<int>(row.size()) != s.image.width) throw DataError("ragged image rows");
                for (const auto& v : row) s.image.pixels.push_back(v.get<double>());
            }
            s.question = rec.at("question").get<std::string>();
            s.answer = rec.at("answer").get<std::string>();
            const std::string qt = rec.at("qtype").get<std::string>();
            if (qt == "open")
                s.qtype = QType::Open;
            else if (qt == "closed")
                s.qtype = QType::Closed;
            else
                throw DataError("qtype must be open or closed, got '" + qt + "'");
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": malformed record: " + e.what());
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        try {
            s.image.validate();
        } catch (const std::exception& e) {
            throw DataError(where + ": " + e.what());
        }
        if (!vocab.contains(s.answer)) throw DataError(where + ": unknown answer '" + s.answer + "'");
        if (s.qtype == QType::Closed && s.answer != "yes" && s.answer != "no")
            throw DataError(where + ": closed question with non-yes/no answer '" + s.answer + "'");
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw DataError(path + ": empty dataset");
    return samples;
}

// Word vocabulary over the questions and answers of the dataset plus the
// graph node names; sorted for stability.
inline TokenVocab build_token_vocab(const std::vector<QASample>& samples, const AnswerVocabulary& answers,
                                    const KnowledgeGraph& graph) {
    std::set<std::string> words;
    for (const auto& s : samples) {
        for (auto& w : tokenize(s.question)) words.insert(w);
        for (auto& w : tokenize(s.answer)) words.insert(w);
    }
    for (const auto& a : answers.answers)
        for (auto& w : tokenize(a)) words.insert(w);
    for (const auto& n : graph.node_names)
        for (auto& w : tokenize(n)) words.insert(w);
    return TokenVocab::build(std::vector<std::string>(words.begin(), words.end()));
}

// Fixed file names inside a dataset directory.
struct DatasetPaths {
    std::string dir;
    std::string train() const { return dir + "/train.jsonl"; }
    std::string val() const { return dir + "/val.jsonl"; }
    std::string test() const { return dir + "/test.jsonl"; }
    std::string vocab() const { return dir + "/vocab.json"; }
    std::string graph() const { return dir + "/graph.json"; }
};

inline void write_dataset(const SyntheticData& data, const std::string& dir) {
    DatasetPaths p{dir};
    write_samples(data.train, p.train());
    write_samples(data.val, p.val());
    write_samples(data.test, p.test());
    write_vocab(data.vocab, p.vocab());
    save_knowledge_graph(data.graph, p.graph());
}

struct LoadedDataset {
    std::vector<QASample> train;
    std::vector<QASample> val;
    std::vector<QASample> test;
    AnswerVocabulary vocab;
    KnowledgeGraph graph;
};

inline LoadedDataset load_dataset(const std::string& dir) {
    DatasetPaths p{dir};
    LoadedDataset d;
    d.vocab = load_vocab(p.vocab());
    d.graph = load_knowledge_graph(p.graph());
    d.train = load_samples(p.train(), d.vocab);
    d.val = load_samples(p.val(), d.vocab);
    d.test = load_samples(p.test(), d.vocab);
    return d;
}

}  // namespace medvqa
