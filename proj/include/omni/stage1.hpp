// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "omni/nn.hpp"
#include "omni/scenegen.hpp"

namespace omni::stage1 {

enum class EmbeddingMode { OneHot, Text };
EmbeddingMode parse_embedding_mode(const std::string& s);
const char* embedding_mode_name(EmbeddingMode m);

struct ModelConfig {
    int m = 4;            // FPN heads
    int C = 8;            // channels per head
    int c_bb = 32;        // backbone width at every level
    int fpn_width = 16;   // lateral width inside a head
    int stem = 16;        // full-resolution 3x3 conv width ahead of level 0; 0 disables
    int mlp_hidden = 64;
    EmbeddingMode mode = EmbeddingMode::OneHot;
    int text_dim = 64;    // raw length in text mode
};

/// Four levels at 1/4..1/32 scale, plus the full-resolution stem activations
/// (undefined when the stem is disabled).
struct Pyramid {
    std::array<Tensor, 4> levels;
    Tensor stem;
    Tensor& operator[](std::size_t l) { return levels[l]; }
    const Tensor& operator[](std::size_t l) const { return levels[l]; }
    static constexpr std::size_t size() { return 4; }
};

/// Per-pixel inner product of feature [B,K,S,S] with task vectors [B,K], then sigmoid.
Tensor decode(const Tensor& feature, const Tensor& task_vectors);

class DensePredictor {
public:
    DensePredictor(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Pyramid extract_multiscale(const Tensor& images) const;
    Tensor fpn_forward(const Pyramid& pyramid) const;
    Tensor fpn_head(const Pyramid& pyramid, int head) const;

    /// Raw task vector: one-hot of length 4, or the configured text vector.
    Tensor task_raw(const std::string& task) const;
    /// MLP image of one raw vector per batch item: [B, m*C].
    Tensor project_tasks(const std::vector<std::string>& tasks) const;
    Tensor project_raw(const Tensor& raw_rows) const;

    /// Text-mode raw vectors, one per task (fixed, not trained).
    void set_text_vectors(const std::map<std::string, std::vector<double>>& vectors);
    const std::map<std::string, std::vector<double>>& text_vectors() const { return text_vectors_; }

    /// images [B,3,S,S] -> maps [B,1,S,S], one task per batch item.
    Tensor forward(const Tensor& images, const std::vector<std::string>& tasks) const;

    void save(const std::filesystem::path& dir) const;
    void load(const std::filesystem::path& dir);

private:
    struct Level {
        Conv2d down, conv;
    };
    struct Head {
        std::array<Conv2d, 4> lateral;
        Conv2d smooth;
        ConvTranspose2d up;
        Conv2d fine;  // 1x1 lateral from the stem, added after upsampling
    };

    ModelConfig cfg_;
    ParamStore params_;
    Conv2d stem_;
    std::array<Level, 4> levels_;
    std::vector<Head> heads_;
    Linear mlp1_, mlp2_;
    std::map<std::string, std::vector<double>> text_vectors_;
};

/// Weighted loss per task: depth 0.5*L1, hed 1*BCE, scribble 5*BCE, animal_pose 5*BCE.
Tensor stage1_loss(const Tensor& pred, const Tensor& target, const std::string& task);
double task_weight(const std::string& task);

struct TrainConfig {
    long steps = 3000;
    int batch = 8;
    double lr = 1e-3;
    double lr_floor = 1e-4;
    double momentum = 0.9;
    std::string optimizer = "adamw";  // adamw | sgd
    // Fraction of the run (from the start) in which depth uses squared error
    // instead of L1; see train_stage1.
    double depth_warmup = 0.5;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;  // 0: none
};

struct TrainResult {
    std::vector<double> losses;
};

using CheckpointFn = std::function<void(long step, const DensePredictor&)>;

/// Each batch item contributes the weighted losses of all its tasks; the step
/// loss is the mean over items.
TrainResult train_stage1(DensePredictor& model, const scene::Corpus& corpus, const TrainConfig& cfg,
                         const CheckpointFn& on_checkpoint = {});

/// image [3,S,S] -> [1,S,S]
Tensor predict_condition(const DensePredictor& model, const Tensor& image, const std::string& task);
/// Batched inference over many images for one task.
std::vector<Tensor> predict_many(const DensePredictor& model, const std::vector<Tensor>& images,
                                 const std::string& task, int batch = 16);

}  // namespace omni::stage1
