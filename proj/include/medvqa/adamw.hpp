#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "medvqa/tensor.hpp"

namespace medvqa {

// Decoupled-weight-decay Adam with bias correction.
class AdamW {
public:
    struct Options {
        double learning_rate = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
        double weight_decay = 0.01;
    };

    AdamW(std::vector<Tensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
        moment1_.reserve(params_.size());
        moment2_.reserve(params_.size());
        for (const auto& p : params_) {
            moment1_.emplace_back(p.numel(), 0.0);
            moment2_.emplace_back(p.numel(), 0.0);
        }
    }

    std::size_t step_count() const { return step_; }
    const Options& options() const { return opts_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // One update from the gradients currently stored on the parameters.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.requires_grad()) throw std::invalid_argument("AdamW: parameter without gradient buffer");
            const auto& g = p.grad();
            if (g.size() != p.numel()) throw std::invalid_argument("AdamW: gradient missing for a parameter");
            auto& values = p.data();
            auto& m = moment1_[k];
            auto& v = moment2_[k];
            for (std::size_t i = 0; i < values.size(); ++i) {
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                values[i] -= opts_.learning_rate * (m_hat / (std::sqrt(v_hat) + opts_.epsilon) +
                                                    opts_.weight_decay * values[i]);
            }
        }
    }

private:
    std::vector<Tensor> params_;
    Options opts_;
    std::vector<std::vector<double>> moment1_;
    std::vector<std::vector<double>> moment2_;
    std::size_t step_ = 0;
};

}  // namespace medvqa
