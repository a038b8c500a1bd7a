#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "flare/cli.hpp"

namespace {

struct CommonOpts {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out = ".";
    std::size_t threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required) {
    auto* c = cmd->add_option("--config", opts.config, "run configuration JSON");
    if (config_required) c->required();
    cmd->add_option("--seed", opts.seed, "override the config seed")
        ->each([&](const std::string&) { opts.seed_given = true; });
    cmd->add_option("--threads", opts.threads, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", opts.out, "output directory");
}

flare::RunConfig resolve_config(const CommonOpts& opts) {
    flare::RunConfig cfg;
    if (!opts.config.empty()) {
        cfg = flare::load_run_config(opts.config);
    } else {
        // validate studies run standalone on built-in defaults
        cfg.dataset = "sine";
        cfg.model = flare::preset_model_config("sine");
        cfg.total_steps = cfg.model.total_steps;
        cfg.train = flare::preset_train_config("sine");
        cfg.train.steps = 2000;
        cfg.seed = 1;
        cfg.seed_set = true;
    }
    if (opts.seed_given) {
        cfg.seed = opts.seed;
        cfg.seed_set = true;
    }
    if (!cfg.seed_set) throw flare::SchemaError("no seed: set it in the config or pass --seed");
    return cfg;
}

flare::CliPaths resolve_paths(const CommonOpts& opts) {
    flare::CliPaths paths;
    paths.out_dir = opts.out;
    paths.threads = opts.threads;
    return paths;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"epistemic uncertainty scoring for small diffusion models"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string data, checkpoint, real, samples, study;
    std::vector<std::string> scores;
    std::size_t n_samples_flag = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a benchmark dataset");
    add_common(gen, opts, true);

    CLI::App* train = app.add_subcommand("train", "train a denoiser on a dataset CSV");
    add_common(train, opts, true);
    train->add_option("--data", data, "dataset CSV (default {out}/{dataset}.csv)");
    train->add_option("--checkpoint", checkpoint, "checkpoint output path");

    CLI::App* score = app.add_subcommand("score", "sample and score epistemic uncertainty");
    add_common(score, opts, true);
    score->add_option("--data", data, "dataset CSV for the curvature estimate");
    score->add_option("--checkpoint", checkpoint, "trained checkpoint");
    score->add_option("--n", n_samples_flag, "number of generated samples (default 2000)");

    CLI::App* eval = app.add_subcommand("eval", "filtering evaluation against real data");
    add_common(eval, opts, true);
    eval->add_option("--real", real, "real dataset CSV")->required();
    eval->add_option("--samples", samples, "generated samples CSV")->required();
    eval->add_option("--scores", scores, "score CSV, repeatable per method")->required();

    CLI::App* validate = app.add_subcommand("validate", "run a validation study");
    add_common(validate, opts, false);
    validate
        ->add_option("--study", study,
                     "one of unroll, lemma1, sketch, prop1, cross-term, schedule")
        ->required();

    CLI::App* ablate = app.add_subcommand("ablate-keep", "keep-fraction ablation sweep");
    add_common(ablate, opts, true);
    ablate->add_option("--data", data, "dataset CSV");
    ablate->add_option("--checkpoint", checkpoint, "trained checkpoint");
    ablate->add_option("--n", n_samples_flag, "samples per fraction (default 64)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? flare::kExitOk : flare::kExitUsage;
    }

    try {
        const flare::RunConfig cfg = resolve_config(opts);
        flare::CliPaths paths = resolve_paths(opts);
        paths.data = data;
        paths.checkpoint = checkpoint;
        paths.real = real;
        paths.samples = samples;
        for (const std::string& s : scores) paths.scores.emplace_back(s);
        if (gen->parsed()) return flare::cmd_gen_data(cfg, paths);
        if (train->parsed()) return flare::cmd_train(cfg, paths);
        if (score->parsed()) {
            if (n_samples_flag) paths.n_score_samples = n_samples_flag;
            return flare::cmd_score(cfg, paths);
        }
        if (eval->parsed()) return flare::cmd_eval(cfg, paths);
        if (validate->parsed()) return flare::cmd_validate(cfg, paths, study);
        if (ablate->parsed()) {
            paths.n_score_samples = n_samples_flag ? n_samples_flag : 64;
            return flare::cmd_ablate_keep(cfg, paths);
        }
        return flare::kExitUsage;
    } catch (const flare::SchemaError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return flare::kExitUsage;
    } catch (const flare::InvalidArgument& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return flare::kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return flare::kExitNumerical;
    }
}
