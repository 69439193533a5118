// Command-line harness: synthetic data generation, training, evaluation,
// gradient checking, and the ablation grids.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "medvqa/ablation.hpp"
#include "medvqa/adamw.hpp"
#include "medvqa/config.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/grad_check.hpp"
#include "medvqa/model.hpp"
#include "medvqa/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumeric = 2;

namespace fs = std::filesystem;

medvqa::ModelConfig load_config_or_default(const std::string& path) {
    return path.empty() ? medvqa::ModelConfig{} : medvqa::ModelConfig::from_file(path);
}

int cmd_gen_data(const medvqa::SyntheticSpec& spec, const std::string& out_dir) {
    spec.validate();
    fs::create_directories(out_dir);
    medvqa::SyntheticData data = medvqa::generate(spec);
    medvqa::write_dataset(data, out_dir);
    std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
              << " samples, vocabulary of " << data.vocab.size() << " answers, graph with " << data.graph.size()
              << " nodes to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              std::uint64_t seed_override, bool has_seed_override) {
    medvqa::ModelConfig cfg = load_config_or_default(config_path);
    if (has_seed_override) cfg.seed = seed_override;
    cfg.validate();
    medvqa::LoadedDataset data = medvqa::load_dataset(data_dir);
    medvqa::TokenVocab tokens = medvqa::build_token_vocab(data.train, data.vocab, data.graph);
    medvqa::Model model(cfg, data.vocab, tokens, data.graph, data.train.front().image.height);

    std::cout << "training: " << model.parameter_count() << " parameters, " << data.train.size() << " samples, "
              << cfg.epochs << " epochs\n";
    medvqa::TrainOptions opts;
    opts.on_epoch = [](const medvqa::EpochStats& e) {
        std::cout << "epoch " << e.epoch << "  loss " << std::setprecision(6) << e.loss << "  bce " << e.bce
                  << "  cs " << e.consistency << "\n";
    };
    medvqa::RunReport report = medvqa::train(model, data.train, data.val, opts);

    fs::create_directories(out_dir);
    model.save(out_dir + "/checkpoint.json");
    std::ofstream rep(out_dir + "/run_report.json");
    rep << report.to_json().dump(2) << "\n";
    std::cout << "train acc " << report.train_eval.overall_acc << "  val acc " << report.val_eval.overall_acc
              << "  wall " << std::setprecision(3) << report.wall_seconds << "s\n";
    std::cout << "checkpoint and run_report written to " << out_dir << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir, const std::string& split,
             const std::string& out_dir) {
    medvqa::Model model = medvqa::Model::load(checkpoint_path);
    medvqa::DatasetPaths paths{data_dir};
    std::string split_path;
    if (split == "train") split_path = paths.train();
    else if (split == "val") split_path = paths.val();
    else if (split == "test") split_path = paths.test();
    else throw medvqa::ConfigError("unknown split '" + split + "' (expected train, val, or test)");
    auto samples = medvqa::load_samples(split_path, model.answer_vocab());
    medvqa::EvalReport report = model.evaluate(samples);
    const std::string text = report.to_json().dump(2);
    std::cout << text << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(out_dir + "/eval_" + split + ".json");
        out << text << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, double tol) {
    medvqa::ModelConfig cfg;
    if (!config_path.empty()) {
        cfg = medvqa::ModelConfig::from_file(config_path);
    } else {
        cfg.d = 8;
        cfg.heads = 2;
        cfg.prompt_size = 4;
        cfg.n_blocks = 1;
        cfg.gat_heads = 2;
        cfg.batch_size = 2;
        cfg.enc_layers = 1;
        cfg.patch = 4;
        cfg.max_len = 8;
    }
    cfg.validate();
    if (cfg.d > 16 || cfg.prompt_size > 4 || cfg.n_blocks != 1 || cfg.batch_size > 2)
        throw medvqa::ConfigError("gradcheck requires a tiny config: d <= 16, prompt_size <= 4, n_blocks = 1, batch_size <= 2");

    // two-organ/two-disease task: 4 graph nodes, 2 samples
    medvqa::SyntheticSpec spec;
    spec.organs = 2;
    spec.diseases = 2;
    spec.n_train = cfg.batch_size;
    spec.n_val = 1;
    spec.n_test = 1;
    spec.seed = cfg.seed;
    spec.image_size = cfg.patch * 2;
    spec.noise = 0.0;
    medvqa::SyntheticData data = medvqa::generate(spec);
    medvqa::TokenVocab tokens = medvqa::build_token_vocab(data.train, data.vocab, data.graph);
    medvqa::Model model(cfg, data.vocab, tokens, data.graph, spec.image_size);

    std::vector<const medvqa::QASample*> batch;
    for (const auto& s : data.train) batch.push_back(&s);
    auto loss_fn = [&]() { return model.batch_loss(batch).loss; };

    medvqa::GradCheckReport report = medvqa::grad_check(loss_fn, model.param_groups(), 1e-5, tol);
    std::printf("%-20s %10s %14s  %s\n", "group", "params", "max_rel_err", "result");
    for (const auto& row : report.rows)
        std::printf("%-20s %10zu %14.3e  %s\n", row.group.c_str(), row.n_checked, row.max_rel_err,
                    row.pass ? "PASS" : "FAIL");
    std::printf("worst %.3e against tolerance %.1e\n", report.worst(), tol);
    if (!report.all_pass) {
        std::cerr << "gradient check failed\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_ablate(const std::string& axis_name, const std::string& config_path, const std::string& data_dir,
               const std::string& out_dir) {
    medvqa::AblationAxis axis = medvqa::parse_axis(axis_name);
    medvqa::ModelConfig base = load_config_or_default(config_path);
    base.validate();
    medvqa::LoadedDataset data = medvqa::load_dataset(data_dir);
    medvqa::AblationTable table = medvqa::run_ablation(axis, base, data);
    fs::create_directories(out_dir);
    const std::string path = out_dir + "/ablation_" + medvqa::axis_name(axis) + ".csv";
    medvqa::write_ablation_csv(table, path);
    std::cout << table.to_csv();
    std::cout << "wrote " << path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale medical VQA with latent prompts and prior-knowledge fusion"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    medvqa::SyntheticSpec spec;
    std::string gen_out = "data";
    gen->add_option("--seed", spec.seed, "generation seed");
    gen->add_option("--organs", spec.organs, "number of organs");
    gen->add_option("--diseases", spec.diseases, "number of diseases");
    gen->add_option("--train", spec.n_train, "training sample count");
    gen->add_option("--val", spec.n_val, "validation sample count");
    gen->add_option("--test", spec.n_test, "test sample count");
    gen->add_option("--noise", spec.noise, "Gaussian pixel noise sigma in [0, 0.2]");
    gen->add_option("--image-size", spec.image_size, "square image side length");
    gen->add_option("--out", gen_out, "output directory");

    // train
    auto* tr = app.add_subcommand("train", "train a model on a dataset directory");
    std::string tr_config, tr_data = "data", tr_out = "runs/default";
    std::uint64_t tr_seed = 0;
    tr->add_option("--config", tr_config, "config file (flat key = value)");
    tr->add_option("--data", tr_data, "dataset directory");
    tr->add_option("--out", tr_out, "output directory for checkpoint and report");
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "override the config seed");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string ev_ckpt, ev_data = "data", ev_split = "test", ev_out;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory");
    ev->add_option("--split", ev_split, "train, val, or test");
    ev->add_option("--out", ev_out, "optional output directory for the report");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full loss gradient");
    std::string gc_config;
    double gc_tol = 1e-5;
    gc->add_option("--config", gc_config, "tiny config file");
    gc->add_option("--tol", gc_tol, "relative error tolerance");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run one ablation axis and emit a CSV table");
    std::string ab_axis, ab_config, ab_data = "data", ab_out = "runs/ablation";
    ab->add_option("--axis", ab_axis, "modules, prompt_size, eta, theta_beta, or fusion_order")->required();
    ab->add_option("--config", ab_config, "base config file");
    ab->add_option("--data", ab_data, "dataset directory");
    ab->add_option("--out", ab_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(spec, gen_out);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_seed, tr_seed_opt->count() > 0);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_out);
        if (gc->parsed()) return cmd_gradcheck(gc_config, gc_tol);
        if (ab->parsed()) return cmd_ablate(ab_axis, ab_config, ab_data, ab_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}
