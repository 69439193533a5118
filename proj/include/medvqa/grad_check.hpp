#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvqa/tensor.hpp"

namespace medvqa {

// A named set of parameter tensors, checked together and reported as one row.
struct ParamGroup {
    std::string name;
    std::vector<Tensor> params;
};

struct GradCheckRow {
    std::string group;
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double tol = 0.0;
    bool all_pass = false;
    double worst() const {
        double w = 0.0;
        for (const auto& r : rows) w = std::max(w, r.max_rel_err);
        return w;
    }
};

// Error metric: |a - n| / (scale + |a| + |n|). The additive scale keeps the
// metric meaningful where the true gradient is near zero, where central
// differences carry ~1e-10 absolute noise of their own.
inline constexpr double kGradCheckScale = 1e-3;

// Central-difference check of reverse-mode gradients. `f` rebuilds the scalar
// loss from the current parameter values on every call; it must be
// deterministic. Mutates parameter data in place and restores it.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<ParamGroup> groups,
                                  double h = 1e-5, double tol = 1e-6) {
    // value-only evaluations skip tape recording
    auto eval = [&f]() {
        NoGradGuard no_grad;
        return f().value();
    };
    const double l0 = eval();
    const double l1 = eval();
    if (l0 != l1)
        throw std::runtime_error("grad_check aborted: two evaluations at the same point differ (" +
                                 std::to_string(l0) + " vs " + std::to_string(l1) + "); f is non-deterministic");

    for (auto& g : groups)
        for (auto& p : g.params) {
            if (!p.requires_grad()) throw std::invalid_argument("grad_check: parameter in group '" + g.name + "' does not require gradients");
            p.zero_grad();
        }
    Tensor loss = f();
    backward(loss);

    GradCheckReport report;
    report.tol = tol;
    report.all_pass = true;
    for (auto& g : groups) {
        GradCheckRow row;
        row.group = g.name;
        for (auto& p : g.params) {
            auto& values = p.data();
            const auto& autograd = p.grad();
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double saved = values[i];
                values[i] = saved + h;
                const double fp = eval();
                values[i] = saved - h;
                const double fm = eval();
                values[i] = saved;
                const double numeric = (fp - fm) / (2.0 * h);
                const double a = autograd[i];
                const double err = std::abs(a - numeric) / (kGradCheckScale + std::abs(a) + std::abs(numeric));
                row.max_rel_err = std::max(row.max_rel_err, err);
                ++row.n_checked;
            }
        }
        row.pass = row.max_rel_err < tol;
        report.all_pass = report.all_pass && row.pass;
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace medvqa
