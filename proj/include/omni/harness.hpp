// SPDX-License-Identifier: Apache-2.0
#pragma once
// Config-driven pipeline stages behind omnictl. Each stage owns one directory
// under the workdir and records its inputs and outputs in manifest.json.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/stage1.hpp"
#include "omni/stage2.hpp"

namespace omni::harness {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kRefused = 2, kMissingDependency = 3, kBadArgument = 4 };

/// Carries the process exit code for a failed command.
struct HarnessError : std::runtime_error {
    HarnessError(ExitCode c, const std::string& what) : std::runtime_error(what), code(c) {}
    ExitCode code;
};

json default_config();
/// Defaults, then the file, then each "a.b=value" override, then OMNICTL_WORKDIR.
/// Unknown keys and type mismatches raise kBadArgument.
json resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                    bool use_env = true);
/// Overlays `patch` onto `base`, rejecting keys that base does not have.
void merge_checked(json& base, const json& patch, const std::string& where = "");

struct Context {
    json config;
    bool force = false;
    bool quiet = false;
    std::filesystem::path workdir() const;
};

/// SHA-256 over the sorted relative paths and contents of every file below dir.
std::string hash_tree(const std::filesystem::path& dir);

void gen_data(const Context& ctx);
void pretrain_base(const Context& ctx);
void train_stage1(const Context& ctx);
void invert(const Context& ctx);
void train_stage2(const Context& ctx);

struct SampleArgs {
    std::string prompt;
    std::string task;
    std::optional<std::filesystem::path> image;      // integrated mode: stage 1 derives the condition
    std::optional<std::filesystem::path> condition;  // stage-2-only mode
    std::optional<std::filesystem::path> out;        // default: <workdir>/samples/<task>-<n>.png
};
/// Returns the written grid path.
std::filesystem::path sample(const Context& ctx, const SampleArgs& args);

void eval(const Context& ctx);

inline const std::vector<std::string> kAblations = {"prefix_both", "mlp_zeroconv", "single_head",
                                                    "text_task_embedding"};
/// The one (section, key, value) an ablation flips.
struct Flip {
    std::string section, key;
    json value;
};
Flip ablation_flip(const std::string& name);
void ablate(const Context& ctx, const std::string& name);

/// Runs every stage of the pipeline in dependency order.
void run_all(const Context& ctx);

// Loaders shared with the acceptance checks.
scene::Corpus load_corpus(const Context& ctx);
scene::Corpus holdout_corpus(const json& config);
/// Base with the four task tokens registered and, when present, their learned rows.
std::unique_ptr<stage2::BaseModel> load_base(const Context& ctx, bool with_tokens);
std::unique_ptr<stage1::DensePredictor> load_stage1(const Context& ctx);

struct Stage1Scores {
    double rmse = 0, ods = 0, ois = 0, ap = 0, scribble_accuracy = 0, pose_bce = 0;
};
/// Held-out scores of a dense predictor; edge truth is the soft edge map > 0.3.
Stage1Scores score_stage1(const stage1::DensePredictor& model, const scene::Corpus& holdout);
/// Same scores from precomputed maps, one per held-out scene carrying the task, in corpus order.
Stage1Scores score_predictions(const std::map<std::string, std::vector<Tensor>>& preds, const scene::Corpus& holdout);

}  // namespace omni::harness
