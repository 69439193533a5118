#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "medvqa/attention.hpp"
#include "medvqa/tensor.hpp"

namespace medvqa {

// Balance weights for the three information pathways feeding the prediction.
struct CombineWeights {
    double alpha = 1.0;  // integrated information
    double theta = 0.1;  // image-side cross-modal features
    double beta = 0.1;   // language-side cross-modal features

    void validate() const {
        for (double w : {alpha, theta, beta})
            if (!std::isfinite(w) || w < 0.0)
                throw std::invalid_argument("CombineWeights: weights must be finite and non-negative");
    }
};

// Weighted sum of the token-mean pooled inputs. Terms with a zero weight are
// skipped outright, so the output is bitwise independent of their values.
inline Tensor combine(const Tensor& integrated, const Tensor& image_side, const Tensor& lang_side,
                      const CombineWeights& w) {
    w.validate();
    int d = -1;
    for (const Tensor* t : {&integrated, &image_side, &lang_side})
        if (t->defined()) {
            if (d >= 0 && t->cols() != d)
                throw std::invalid_argument("combine: width mismatch across inputs");
            d = t->cols();
        }
    if (d < 0) throw std::invalid_argument("combine: no inputs");
    Tensor acc;
    auto add_term = [&acc](const Tensor& t, double weight) {
        if (weight == 0.0 || !t.defined()) return;
        Tensor term = scale(mean_rows(t), weight);
        acc = acc.defined() ? add(acc, term) : term;
    };
    add_term(integrated, w.alpha);
    add_term(image_side, w.theta);
    add_term(lang_side, w.beta);
    return acc.defined() ? acc : Tensor::zeros(1, d);
}

// Affine map to one logit per vocabulary answer.
inline Tensor classify(const Tensor& combined, const LinearParams& head) {
    if (combined.rows() != 1 || combined.cols() != head.weight.rows())
        throw std::invalid_argument("classify: expected 1x" + std::to_string(head.weight.rows()) + " input, got " +
                                    shape_str(combined.shape()));
    return project(combined, head);
}

inline Tensor one_hot(int index, int size) {
    if (index < 0 || index >= size) throw std::invalid_argument("one_hot: index out of range");
    auto t = Tensor::zeros(1, size);
    t.data()[index] = 1.0;
    return t;
}

// Sigmoid binary cross-entropy against a one-hot target, mean over classes.
inline Tensor bce_loss(const Tensor& logits, const Tensor& target) {
    int ones = 0;
    for (double v : target.data()) {
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("bce_loss: target must be one-hot");
        if (v == 1.0) ++ones;
    }
    if (ones != 1) throw std::invalid_argument("bce_loss: target must have exactly one hot entry");
    return bce_with_logits(logits, target);
}

struct LossWeights {
    double eta = 0.1;

    void validate() const {
        if (!std::isfinite(eta) || eta < 0.0) throw std::invalid_argument("LossWeights: eta must be finite and >= 0");
    }
};

inline Tensor total_loss(const Tensor& bce, const Tensor& consistency, const LossWeights& lw) {
    lw.validate();
    return add(bce, scale(consistency, lw.eta));
}

inline int argmax_index(const Tensor& logits) {
    const auto& d = logits.data();
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

struct EvalReport {
    std::optional<double> open_acc;    // percent; absent when the split has no open questions
    std::optional<double> closed_acc;  // percent
    double overall_acc = 0.0;          // percent, micro average
    int n_open = 0;
    int n_closed = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        if (open_acc) j["open_acc"] = *open_acc;
        if (closed_acc) j["closed_acc"] = *closed_acc;
        j["overall_acc"] = overall_acc;
        j["n_open"] = n_open;
        j["n_closed"] = n_closed;
        return j;
    }
};

// One scored prediction; is_open mirrors the sample's question type.
struct PredictionRecord {
    bool is_open = false;
    bool correct = false;
};

inline EvalReport compute_eval_report(const std::vector<PredictionRecord>& records) {
    if (records.empty()) throw std::invalid_argument("evaluate: empty split");
    EvalReport r;
    int open_correct = 0, closed_correct = 0;
    for (const auto& rec : records) {
        if (rec.is_open) {
            ++r.n_open;
            open_correct += rec.correct ? 1 : 0;
        } else {
            ++r.n_closed;
            closed_correct += rec.correct ? 1 : 0;
        }
    }
    if (r.n_open > 0) r.open_acc = 100.0 * open_correct / r.n_open;
    if (r.n_closed > 0) r.closed_acc = 100.0 * closed_correct / r.n_closed;
    r.overall_acc = 100.0 * (open_correct + closed_correct) / static_cast<double>(records.size());
    return r;
}

}  // namespace medvqa
