#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "sizevar/cli.hpp"

// Subcommands: gen | train | eval | infer | compare.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

namespace {

struct CommonArgs {
    std::string config_path;
    std::string seed_override;
    std::string out_override;
};

sizevar::cli::RunConfig load_with_overrides(const CommonArgs& args,
                                            const std::string& out_path_key) {
    sizevar::cli::RunConfig cfg = sizevar::cli::load_config(args.config_path);
    if (!args.seed_override.empty()) {
        try {
            cfg.seed = std::stoull(args.seed_override);
        } catch (const std::exception&) {
            throw sizevar::cli::ConfigError("--seed must be an unsigned integer");
        }
        cfg.pipeline_opts.seed = cfg.seed;
        cfg.catalog_cfg.rng_seed = cfg.seed;
        cfg.scene_cfg.rng_seed = cfg.seed;
    }
    if (!args.out_override.empty() && !out_path_key.empty()) cfg.paths[out_path_key] = args.out_override;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"size-variant classification for retail shelf scenes"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string method;
    std::string bundle_path;
    std::string scenes_path;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", args.config_path, "JSON config file")->required();
        cmd->add_option("--seed", args.seed_override, "override config seed");
        cmd->add_option("--out", args.out_override, "override the command's primary output path");
    };

    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic catalog and scene dataset");
    add_common(gen);

    CLI::App* train = app.add_subcommand("train", "train a model bundle on the train split");
    add_common(train);
    train->add_option("-m,--method", method, "gbdt | setnet");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a bundle on the test split");
    add_common(eval);
    eval->add_option("-b,--bundle", bundle_path, "bundle file (defaults to paths.bundle)");

    CLI::App* infer = app.add_subcommand("infer", "predict classes for a scenes file");
    add_common(infer);
    infer->add_option("-b,--bundle", bundle_path, "bundle file (defaults to paths.bundle)");
    infer->add_option("-s,--scenes", scenes_path, "scenes JSONL (defaults to paths.scenes)");

    CLI::App* compare = app.add_subcommand("compare", "train and evaluate both methods on one split");
    add_common(compare);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            return sizevar::cli::cmd_gen(load_with_overrides(args, ""));
        }
        if (train->parsed()) {
            sizevar::cli::RunConfig cfg = load_with_overrides(args, "bundle");
            return sizevar::cli::cmd_train(cfg, method.empty() ? cfg.method : method);
        }
        if (eval->parsed()) {
            sizevar::cli::RunConfig cfg = load_with_overrides(args, "report_json");
            return sizevar::cli::cmd_eval(cfg, bundle_path.empty() ? cfg.path("bundle") : bundle_path);
        }
        if (infer->parsed()) {
            sizevar::cli::RunConfig cfg = load_with_overrides(args, "predictions");
            return sizevar::cli::cmd_infer(cfg,
                                           bundle_path.empty() ? cfg.path("bundle") : bundle_path,
                                           scenes_path.empty() ? cfg.path("scenes") : scenes_path);
        }
        if (compare->parsed()) {
            return sizevar::cli::cmd_compare(load_with_overrides(args, "compare_csv"));
        }
    } catch (const sizevar::cli::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
