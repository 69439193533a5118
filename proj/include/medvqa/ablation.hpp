#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvqa/config.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/model.hpp"
#include "medvqa/train.hpp"

namespace medvqa {

enum class AblationAxis { Modules, PromptSize, Eta, ThetaBeta, FusionOrderAxis };

inline AblationAxis parse_axis(const std::string& name) {
    if (name == "modules") return AblationAxis::Modules;
    if (name == "prompt_size") return AblationAxis::PromptSize;
    if (name == "eta") return AblationAxis::Eta;
    if (name == "theta_beta") return AblationAxis::ThetaBeta;
    if (name == "fusion_order") return AblationAxis::FusionOrderAxis;
    throw ConfigError("unknown ablation axis '" + name +
                      "' (expected modules, prompt_size, eta, theta_beta, or fusion_order)");
}

inline std::string axis_name(AblationAxis a) {
    switch (a) {
        case AblationAxis::Modules: return "modules";
        case AblationAxis::PromptSize: return "prompt_size";
        case AblationAxis::Eta: return "eta";
        case AblationAxis::ThetaBeta: return "theta_beta";
        case AblationAxis::FusionOrderAxis: return "fusion_order";
    }
    return "?";
}

struct AblationCell {
    std::string label;
    ModelConfig config;
};

// The sweep grids mirror the published ablations: four module rows, prompt
// sizes 4..256, eta 0.01..1, the 3x3 theta/beta grid, and the two fusion
// orders.
inline std::vector<AblationCell> ablation_cells(AblationAxis axis, const ModelConfig& base) {
    std::vector<AblationCell> cells;
    switch (axis) {
        case AblationAxis::Modules: {
            ModelConfig bl = base;
            bl.gm = GenerationMode::Off;
            bl.lf = false;
            bl.pf = false;
            bl.alpha = 0.0;
            cells.push_back({"BL", bl});
            ModelConfig no_cs = base;
            no_cs.gm = GenerationMode::NoConsistency;
            no_cs.lf = true;
            no_cs.pf = false;
            cells.push_back({"+GM_w/o_cs&LF", no_cs});
            ModelConfig gm_lf = base;
            gm_lf.gm = GenerationMode::WithConsistency;
            gm_lf.lf = true;
            gm_lf.pf = false;
            cells.push_back({"+GM&LF", gm_lf});
            ModelConfig full = base;
            full.gm = GenerationMode::WithConsistency;
            full.lf = true;
            full.pf = true;
            cells.push_back({"+GM&LF+PF", full});
            break;
        }
        case AblationAxis::PromptSize:
            for (int p : {4, 8, 16, 32, 64, 128, 256}) {
                ModelConfig c = base;
                c.prompt_size = p;
                cells.push_back({std::to_string(p), c});
            }
            break;
        case AblationAxis::Eta:
            for (double e : {0.01, 0.05, 0.1, 0.5, 1.0}) {
                ModelConfig c = base;
                c.eta = e;
                std::ostringstream os;
                os << e;
                cells.push_back({os.str(), c});
            }
            break;
        case AblationAxis::ThetaBeta:
            for (double t : {0.01, 0.1, 1.0})
                for (double b : {0.01, 0.1, 1.0}) {
                    ModelConfig c = base;
                    c.theta = t;
                    c.beta = b;
                    std::ostringstream os;
                    os << "theta=" << t << ",beta=" << b;
                    cells.push_back({os.str(), c});
                }
            break;
        case AblationAxis::FusionOrderAxis:
            for (const char* o : {"ILM", "LIM"}) {
                ModelConfig c = base;
                c.fusion_order = FusionOrder::parse(o);
                cells.push_back({c.fusion_order.display(), c});
            }
            break;
    }
    for (auto& c : cells) c.config.validate();
    return cells;
}

struct AblationRow {
    std::string label;
    EvalReport test_eval;
    std::size_t parameter_count = 0;
    std::string config_hash;
};

struct AblationTable {
    AblationAxis axis;
    std::vector<AblationRow> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << std::setprecision(10);
        os << axis_name(axis) << ",open,closed,overall,parameter_count,config_hash\n";
        for (const auto& r : rows) {
            os << '"' << r.label << "\",";
            if (r.test_eval.open_acc) os << *r.test_eval.open_acc;
            os << ',';
            if (r.test_eval.closed_acc) os << *r.test_eval.closed_acc;
            os << ',' << r.test_eval.overall_acc << ',' << r.parameter_count << ',' << r.config_hash << "\n";
        }
        return os.str();
    }
};

// Trains one model per cell with the base seed and reports test accuracy.
inline AblationTable run_ablation(AblationAxis axis, const ModelConfig& base, const LoadedDataset& data) {
    AblationTable table;
    table.axis = axis;
    const int image_size = data.train.front().image.height;
    for (const auto& cell : ablation_cells(axis, base)) {
        TokenVocab tokens = build_token_vocab(data.train, data.vocab, data.graph);
        Model model(cell.config, data.vocab, tokens, data.graph, image_size);
        train(model, data.train, {});
        AblationRow row;
        row.label = cell.label;
        row.test_eval = model.evaluate(data.test);
        row.parameter_count = model.parameter_count();
        row.config_hash = cell.config.hash();
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline void write_ablation_csv(const AblationTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << table.to_csv();
}

}  // namespace medvqa
