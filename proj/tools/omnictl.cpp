// SPDX-License-Identifier: Apache-2.0
// omnictl: runs the pipeline stage by stage from one config file.
#include <CLI11.hpp>

#include <iostream>

#include "omni/errors.hpp"
#include "omni/harness.hpp"

using namespace omni::harness;

int main(int argc, char** argv) {
    CLI::App app{"omnictl: data generation, training, sampling and evaluation for the unified conditioning pipeline"};
    app.footer("Exit codes: 0 success, 2 refusal to overwrite, 3 missing dependency, 4 bad argument.\n"
               "OMNICTL_WORKDIR overrides paths.workdir.");
    app.require_subcommand(1);

    std::string config_file;
    std::vector<std::string> sets;
    bool force = false;
    SampleArgs sargs;
    std::string image, condition, out, ablation;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "JSON config; unspecified keys keep their defaults")->check(CLI::ExistingFile);
        sub->add_option("--set", sets, "Override one key, e.g. --set stage2.steps=100")->take_all()->allow_extra_args(false);
        sub->add_flag("--force", force, "Replace existing outputs");
        return sub;
    };
    common(app.add_subcommand("gen-data", "Generate the synthetic corpus"));
    common(app.add_subcommand("pretrain-base", "Pretrain the frozen text-to-image base"));
    common(app.add_subcommand("train-stage1", "Train the dense predictor"));
    common(app.add_subcommand("invert", "Learn the four task-token embeddings"));
    common(app.add_subcommand("train-stage2", "Train the condition branch"));
    auto* s = common(app.add_subcommand("sample", "Sample a grid [input | condition | k samples]"));
    s->add_option("--prompt", sargs.prompt, "Caption")->required();
    s->add_option("--task", sargs.task, "depth, hed, scribble or animal_pose")->required();
    auto* img = s->add_option("--image", image, "RGB image; stage 1 derives the condition");
    auto* cond = s->add_option("--condition", condition, "Condition map (PGM or PNG); stage 2 alone");
    img->excludes(cond);
    s->add_option("--out", out, "Output PNG");
    common(app.add_subcommand("eval", "Write generation and stage-1 metric reports"));
    auto* a = common(app.add_subcommand("ablate", "Retrain with one flag flipped and compare"));
    a->add_option("name", ablation, "prefix_both, mlp_zeroconv, single_head or text_task_embedding")->required();
    common(app.add_subcommand("all", "gen-data, pretrain-base, train-stage1, invert, train-stage2 and eval in order"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kBadArgument;
    }

    try {
        Context ctx;
        ctx.config = resolve_config(config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file), sets);
        ctx.force = force;
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "gen-data") gen_data(ctx);
        else if (cmd == "pretrain-base") pretrain_base(ctx);
        else if (cmd == "train-stage1") train_stage1(ctx);
        else if (cmd == "invert") invert(ctx);
        else if (cmd == "train-stage2") train_stage2(ctx);
        else if (cmd == "eval") eval(ctx);
        else if (cmd == "ablate") ablate(ctx, ablation);
        else if (cmd == "all") run_all(ctx);
        else if (cmd == "sample") {
            if (!image.empty()) sargs.image = image;
            if (!condition.empty()) sargs.condition = condition;
            if (!out.empty()) sargs.out = out;
            sample(ctx, sargs);
        }
    } catch (const HarnessError& e) {
        std::cerr << "omnictl: " << e.what() << '\n';
        return e.code;
    } catch (const std::exception& e) {
        std::cerr << "omnictl: " << e.what() << '\n';
        return 1;
    }
    return kOk;
}
