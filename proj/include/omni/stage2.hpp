// SPDX-License-Identifier: Apache-2.0
#pragma once
// Condition-controlled generation: a trainable copy of the base encoder and
// middle block, fed the condition through a zero-initialized 1x1 conv (Z1)
// and feeding back into the frozen skips through zero-initialized taps (Z2).

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "omni/denoiser.hpp"

namespace omni::stage2 {

/// trainable_only: the copy sees the prefixed prompt, the frozen path the caption.
/// both: every path sees the prefixed prompt. none: no prefix anywhere (single-task variant).
enum class PrefixMode { TrainableOnly, Both, None };
enum class ZeroConvMode { Learned, MlpFromEmbedding };
PrefixMode parse_prefix_mode(const std::string& s);
ZeroConvMode parse_zeroconv_mode(const std::string& s);
const char* prefix_mode_name(PrefixMode m);
const char* zeroconv_mode_name(ZeroConvMode m);

struct ControlConfig {
    PrefixMode prefix_mode = PrefixMode::TrainableOnly;
    ZeroConvMode zeroconv_mode = ZeroConvMode::Learned;
    int cond_width = 32;
    int mlp_hidden = 64;
};

class ControlledModel {
public:
    /// The copy starts from the base encoder/middle weights; Z1, Z2 (or the
    /// MLP's final layer) start at zero.
    ControlledModel(const BaseModel& base, const ControlConfig& cfg, std::uint64_t seed);
    ControlledModel(const ControlledModel&) = delete;
    ControlledModel& operator=(const ControlledModel&) = delete;

    const BaseModel& base() const { return *base_; }
    const ControlConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// Condition maps [B,1,S,S] -> c_f [B,cond_width,S/4,S/4].
    Tensor encode_condition(const Tensor& maps) const;
    /// MLP image of task embeddings [B,d_text] -> [B, latent*cond_width + latent].
    Tensor z1_weights(const Tensor& task_embeddings) const;
    /// Z1 applied to c_f; tasks are consulted only in MLP mode.
    Tensor z1(const Tensor& c_f, const std::vector<std::string>& tasks) const;

    /// D(M(E(z_t,t,c_t) + Z2(E'(Z1(c_f) + z_t, t, prefix_c_t)))), with one Z2 tap per skip and one on the middle.
    Tensor predict_noise(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& c_t,
                         const Tensor& condition_maps, const text::TextEmbedding& prefix_c_t,
                         const std::vector<std::string>& tasks) const;
    /// Builds both encodings from captions according to the prefix mode.
    Tensor predict_noise(const Tensor& z_t, const std::vector<int>& t, const std::vector<std::string>& captions,
                         const std::vector<std::string>& tasks, const Tensor& condition_maps, PromptCache& prompts) const;

    /// Prompt for the frozen path and for the copy.
    std::string frozen_prompt(const std::string& caption, const std::string& task) const;
    std::string control_prompt(const std::string& caption, const std::string& task) const;

    const Conv2d& z2(int i) const { return z2_[static_cast<std::size_t>(i)]; }

    void save(const std::filesystem::path& dir) const;
    static std::unique_ptr<ControlledModel> load(const BaseModel& base, const std::filesystem::path& dir);

private:
    const BaseModel* base_;
    ControlConfig cfg_;
    ParamStore params_;
    EncoderStack copy_;
    Conv2d cond1_, cond2_, cond3_;
    Conv2d z1_;
    std::array<Conv2d, 4> z2_;
    Linear mlp1_, mlp2_;
};

/// Sum of base and control parameter element counts.
std::size_t count_parameters(const ControlledModel& model, bool trainable_only);

struct Example {
    int image = 0;  // index into Stage2Data::images
    std::string task;
    Tensor condition;  // [1,S,S]
};

struct Stage2Data {
    std::vector<Tensor> images;
    std::vector<std::string> captions;
    std::vector<Example> examples;
};

/// One example per (unique scene, task it carries), with ground-truth maps.
Stage2Data stage2_data(const scene::Corpus& corpus);

struct Stage2TrainConfig {
    long steps = 3000;
    int batch = 8;
    double lr = 1e-3;
    double lr_floor = 1e-4;
    std::uint64_t seed = 0;
};

struct Stage2TrainResult {
    std::vector<double> losses;
};

/// Each batch item draws a task uniformly, then an example carrying it. Only
/// the control parameters are optimized.
Stage2TrainResult train_stage2(ControlledModel& model, const Stage2Data& data, const Stage2TrainConfig& cfg);

/// Throws if the prompt names a task token missing from the vocabulary.
void check_task_tokens(const text::Vocabulary& vocab, const std::string& prompt);

struct SampleRequest {
    std::string prompt;
    std::string task;
    Tensor condition;  // [1,S,S]; ignored by base sampling
    std::uint64_t index = 0;  // selects the per-sample noise stream
};

inline constexpr int kDefaultDdimSteps = 50;

/// z_T ~ N(0, I) from stream (seed, index), deterministic DDIM to t = 0,
/// decoded and clamped to [0,1]. Batching never changes a result.
std::vector<Tensor> ddim_sample(const ControlledModel& model, const std::vector<SampleRequest>& requests, int steps,
                                std::uint64_t seed, int batch = 16);
std::vector<Tensor> ddim_sample(const BaseModel& model, const std::vector<SampleRequest>& requests, int steps,
                                std::uint64_t seed, int batch = 16);

}  // namespace omni::stage2
