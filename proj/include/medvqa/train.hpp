#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "medvqa/adamw.hpp"
#include "medvqa/model.hpp"
#include "medvqa/rng.hpp"

namespace medvqa {

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double bce = 0.0;
    double consistency = 0.0;
    double val_overall = -1.0;  // only filled when validation ran this epoch
};

struct RunReport {
    std::vector<EpochStats> epochs;
    EvalReport train_eval;
    EvalReport val_eval;
    double wall_seconds = 0.0;
    std::string config_text;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::size_t parameter_count = 0;
    int epochs_run = 0;
    bool early_stopped = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs) {
            nlohmann::json row = {{"epoch", e.epoch}, {"loss", e.loss}, {"bce", e.bce}, {"cs", e.consistency}};
            if (e.val_overall >= 0.0) row["val_overall"] = e.val_overall;
            j["epochs"].push_back(std::move(row));
        }
        j["train_eval"] = train_eval.to_json();
        j["val_eval"] = val_eval.to_json();
        j["wall_seconds"] = wall_seconds;
        j["config"] = config_text;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["parameter_count"] = parameter_count;
        j["epochs_run"] = epochs_run;
        j["early_stopped"] = early_stopped;
        return j;
    }
};

struct TrainOptions {
    // stop once validation overall accuracy reaches this percentage;
    // <= 0 disables early stopping
    double target_val_accuracy = 0.0;
    int eval_every = 1;  // validation cadence in epochs when early stopping
    std::function<void(const EpochStats&)> on_epoch;
};

// Shuffled mini-batch training over the full training split with AdamW.
// Deterministic per config seed: the per-epoch shuffle derives from it, so
// identical runs produce identical per-epoch loss traces.
inline RunReport train(Model& model, const std::vector<QASample>& train_split,
                       const std::vector<QASample>& val_split, const TrainOptions& opts = {}) {
    if (train_split.empty()) throw std::invalid_argument("train: empty training split");
    const auto& cfg = model.config();
    const auto t0 = std::chrono::steady_clock::now();

    AdamW optimizer(model.parameters(), {cfg.learning_rate});

    RunReport report;
    report.config_text = cfg.to_text();
    report.config_hash = cfg.hash();
    report.seed = cfg.seed;
    report.parameter_count = model.parameter_count();

    std::vector<int> order(train_split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, 0xe90c5 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochStats stats;
        stats.epoch = epoch;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
            std::vector<const QASample*> batch;
            batch.reserve(take);
            for (std::size_t k = 0; k < take; ++k) batch.push_back(&train_split[order[pos + k]]);
            pos += take;

            optimizer.zero_grad();
            Model::BatchResult result = model.batch_loss(batch);
            if (!std::isfinite(result.loss.value()))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch));
            backward(result.loss);
            optimizer.step();

            stats.loss += result.loss.value() * static_cast<double>(take);
            stats.bce += result.bce_value * static_cast<double>(take);
            stats.consistency += result.consistency_value * static_cast<double>(take);
        }
        stats.loss /= static_cast<double>(order.size());
        stats.bce /= static_cast<double>(order.size());
        stats.consistency /= static_cast<double>(order.size());

        const bool want_early_stop = opts.target_val_accuracy > 0.0 && !val_split.empty();
        if (want_early_stop && (epoch % std::max(1, opts.eval_every) == 0 || epoch + 1 == cfg.epochs)) {
            stats.val_overall = model.evaluate(val_split).overall_acc;
        }
        report.epochs.push_back(stats);
        report.epochs_run = epoch + 1;
        if (opts.on_epoch) opts.on_epoch(stats);
        if (want_early_stop && stats.val_overall >= opts.target_val_accuracy) {
            report.early_stopped = true;
            break;
        }
    }

    report.train_eval = model.evaluate(train_split);
    if (!val_split.empty()) report.val_eval = model.evaluate(val_split);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace medvqa
