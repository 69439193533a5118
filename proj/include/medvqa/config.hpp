#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvqa/fusion.hpp"
#include "medvqa/objective.hpp"

namespace medvqa {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Latent prompt generation toggle: fully off, on without the consistency
// loss, or on with it.
enum class GenerationMode { Off, NoConsistency, WithConsistency };

inline std::string generation_mode_str(GenerationMode m) {
    switch (m) {
        case GenerationMode::Off: return "off";
        case GenerationMode::NoConsistency: return "no_cs";
        case GenerationMode::WithConsistency: return "cs";
    }
    return "?";
}

inline GenerationMode parse_generation_mode(const std::string& s) {
    if (s == "off") return GenerationMode::Off;
    if (s == "no_cs") return GenerationMode::NoConsistency;
    if (s == "cs") return GenerationMode::WithConsistency;
    throw ConfigError("gm must be one of off/no_cs/cs, got '" + s + "'");
}

// All architecture and loss hyperparameters plus the module toggles.
struct ModelConfig {
    int d = 64;
    int heads = 4;
    int n_blocks = 2;
    int prompt_size = 32;
    FusionOrder fusion_order;  // defaults to L=>I=>MM
    double alpha = 1.0;
    double theta = 0.1;
    double beta = 0.1;
    double eta = 0.1;
    int gat_heads = 2;
    double learning_rate = 1e-3;
    int epochs = 200;
    int batch_size = 16;
    std::uint64_t seed = 7;
    GenerationMode gm = GenerationMode::WithConsistency;
    bool lf = true;  // latent prompt fusion inside the blocks
    bool pf = true;  // prior knowledge fusion
    // Eq. 11 key/value choice: the raw prompt by default, the generated
    // prompt when set (ablation toggle).
    bool pf_uses_generated_prompt = false;
    int patch = 8;
    int enc_layers = 2;
    int max_len = 16;

    CombineWeights combine_weights() const { return {alpha, theta, beta}; }
    LossWeights loss_weights() const { return {eta}; }

    // Paper-scale preset; accepted by validation, far above desk scale.
    static ModelConfig paper_preset() {
        ModelConfig c;
        c.d = 768;
        c.heads = 12;
        c.n_blocks = 6;
        c.gat_heads = 8;
        c.learning_rate = 5e-6;
        return c;
    }

    void validate() const {
        if (d < 2) throw ConfigError("d must be >= 2");
        if (heads < 1 || d % heads != 0) throw ConfigError("heads must divide d");
        if (gat_heads < 1 || d % gat_heads != 0) throw ConfigError("gat_heads must divide d");
        if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1");
        if (prompt_size < 1) throw ConfigError("prompt_size must be >= 1");
        fusion_order.validate();
        try {
            combine_weights().validate();
            loss_weights().validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (patch < 1) throw ConfigError("patch must be >= 1");
        if (enc_layers < 1) throw ConfigError("enc_layers must be >= 1");
        if (max_len < 1) throw ConfigError("max_len must be >= 1");
        if (gm == GenerationMode::Off) {
            if (lf) throw ConfigError("lf requires gm to be enabled");
            if (pf) throw ConfigError("pf requires gm to be enabled (Eq. 11 consumes the prompt)");
            if (alpha != 0.0) throw ConfigError("alpha must be 0 when gm is off (no integrated information)");
        }
    }

    // Canonical flat key=value form; also the hashing basis.
    std::string to_text() const {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "d = " << d << "\n";
        os << "heads = " << heads << "\n";
        os << "n_blocks = " << n_blocks << "\n";
        os << "prompt_size = " << prompt_size << "\n";
        os << "fusion_order = " << fusion_order.compact() << "\n";
        os << "alpha = " << alpha << "\n";
        os << "theta = " << theta << "\n";
        os << "beta = " << beta << "\n";
        os << "eta = " << eta << "\n";
        os << "gat_heads = " << gat_heads << "\n";
        os << "learning_rate = " << learning_rate << "\n";
        os << "epochs = " << epochs << "\n";
        os << "batch_size = " << batch_size << "\n";
        os << "seed = " << seed << "\n";
        os << "gm = " << generation_mode_str(gm) << "\n";
        os << "lf = " << (lf ? "true" : "false") << "\n";
        os << "pf = " << (pf ? "true" : "false") << "\n";
        os << "pf_kv = " << (pf_uses_generated_prompt ? "generated" : "raw") << "\n";
        os << "patch = " << patch << "\n";
        os << "enc_layers = " << enc_layers << "\n";
        os << "max_len = " << max_len << "\n";
        return os.str();
    }

    std::string hash() const {
        // FNV-1a 64 over the canonical text
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : to_text()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }

    void set(const std::string& key, const std::string& value) {
        try {
            if (key == "d") d = std::stoi(value);
            else if (key == "heads") heads = std::stoi(value);
            else if (key == "n_blocks") n_blocks = std::stoi(value);
            else if (key == "prompt_size") prompt_size = std::stoi(value);
            else if (key == "fusion_order") fusion_order = FusionOrder::parse(value);
            else if (key == "alpha") alpha = std::stod(value);
            else if (key == "theta") theta = std::stod(value);
            else if (key == "beta") beta = std::stod(value);
            else if (key == "eta") eta = std::stod(value);
            else if (key == "gat_heads") gat_heads = std::stoi(value);
            else if (key == "learning_rate") learning_rate = std::stod(value);
            else if (key == "epochs") epochs = std::stoi(value);
            else if (key == "batch_size") batch_size = std::stoi(value);
            else if (key == "seed") seed = std::stoull(value);
            else if (key == "gm") gm = parse_generation_mode(value);
            else if (key == "lf") lf = parse_bool(value);
            else if (key == "pf") pf = parse_bool(value);
            else if (key == "pf_kv") pf_uses_generated_prompt = parse_pf_kv(value);
            else if (key == "patch") patch = std::stoi(value);
            else if (key == "enc_layers") enc_layers = std::stoi(value);
            else if (key == "max_len") max_len = std::stoi(value);
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
        }
    }

    static ModelConfig parse(const std::string& text) {
        ModelConfig c;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash_pos = line.find('#');
            if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
            c.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
        return c;
    }

    static ModelConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str());
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static bool parse_bool(const std::string& v) {
        if (v == "true") return true;
        if (v == "false") return false;
        throw ConfigError("expected true/false, got '" + v + "'");
    }

    static bool parse_pf_kv(const std::string& v) {
        if (v == "raw") return false;
        if (v == "generated") return true;
        throw ConfigError("pf_kv must be raw or generated, got '" + v + "'");
    }
};

}  // namespace medvqa
