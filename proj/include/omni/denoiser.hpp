// SPDX-License-Identifier: Apache-2.0
#pragma once
// The frozen text-to-image base: image <-> latent autoencoder, a small UNet
// denoiser with text cross-attention, and the contrastive image/text encoders
// used for CLIP_t scoring.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "omni/diffusion.hpp"
#include "omni/nn.hpp"
#include "omni/scenegen.hpp"
#include "omni/text.hpp"

namespace omni::stage2 {

struct BaseConfig {
    int canvas = 64;
    int latent_channels = 4;
    int ae_width = 32;
    std::array<int, 3> widths = {32, 48, 64};
    int time_dim = 64;
    int clip_dim = 64;
};

/// Sinusoidal features of width dim, one row per timestep: [B, dim].
Tensor timestep_features(const std::vector<int>& t, int dim);

/// conv3x3 -> + time projection -> silu -> residual cross-attention over text tokens.
struct UNetBlock {
    Conv2d conv;
    Linear temb;
    LayerNorm ln;
    Linear q, k, v, o;
    static UNetBlock make(ParamStore& ps, const std::string& name, int cin, int cout, int time_dim, Rng& rng);
    Tensor operator()(const Tensor& x, const Tensor& temb_act, const text::TextEmbedding& ctx) const;
};

/// Encoder blocks plus the middle block. The trainable copy reuses this type
/// under its own prefix, so E and E' share one definition.
struct EncoderStack {
    struct Out {
        std::array<Tensor, 3> skips;  // 1x, 1/2x, 1/4x latent resolution
        Tensor mid;                   // 1/8x
        Tensor temb;                  // silu(time MLP), [B, time_dim]
    };
    Conv2d conv_in;
    Linear time1, time2;
    std::array<UNetBlock, 3> blocks;
    std::array<Conv2d, 3> down;
    UNetBlock mid;
    /// Parameters land under enc_prefix and mid_prefix.
    static EncoderStack make(ParamStore& ps, const std::string& enc_prefix, const std::string& mid_prefix,
                             const BaseConfig& cfg, Rng& rng);
    Out operator()(const Tensor& x, const std::vector<int>& t, const text::TextEmbedding& ctx) const;
};

struct DecoderStack {
    std::array<UNetBlock, 3> blocks;  // deepest first; block i consumes skip (2 - i)
    Conv2d conv_out;
    static DecoderStack make(ParamStore& ps, const std::string& prefix, const BaseConfig& cfg, Rng& rng);
    Tensor operator()(const EncoderStack::Out& enc, const text::TextEmbedding& ctx) const;
};

struct BaseTrainConfig;
struct BaseTrainResult;

class BaseModel {
public:
    BaseModel(const BaseConfig& cfg, std::uint64_t seed);
    BaseModel(const BaseModel&) = delete;
    BaseModel& operator=(const BaseModel&) = delete;

    const BaseConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    text::Vocabulary& vocab() { return vocab_; }
    const text::Vocabulary& vocab() const { return vocab_; }
    text::TextEncoder& text() { return *text_; }
    const text::TextEncoder& text() const { return *text_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    /// images [B,3,S,S] in [0,1] -> scaled latents [B,c,S/4,S/4]
    Tensor encode_images(const Tensor& images) const;
    /// scaled latents -> images in (0,1)
    Tensor decode_latents(const Tensor& z) const;
    double latent_scale() const { return latent_scale_.at(0); }

    EncoderStack::Out encode(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& ctx) const;
    Tensor decode(const EncoderStack::Out& enc, const text::TextEmbedding& ctx) const;
    /// Unconditioned noise estimate D(M(E(z_t, t, c_t))).
    Tensor predict_noise(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& ctx) const;

    /// Unit-norm embeddings for CLIP_t scoring.
    Tensor image_embedding(const Tensor& images) const;
    Tensor text_embedding(const text::TextEmbedding& enc) const;

    /// Adds a frozen row for task ⟨name⟩ (idempotent) and returns its id.
    int register_task_token(const std::string& task, Rng& rng);
    /// Parameter names of the registered task-token rows.
    std::vector<std::string> task_rows() const;
    /// Digest of frozen weights, task-token rows excluded.
    std::string frozen_digest() const;

    void freeze_all();
    void save(const std::filesystem::path& dir) const;
    /// Restores weights and every task token present in dir; all parameters come back frozen.
    static std::unique_ptr<BaseModel> load(const std::filesystem::path& dir);

private:
    friend BaseTrainResult pretrain_base(BaseModel&, const scene::Corpus&, const BaseTrainConfig&);
    BaseConfig cfg_;
    ParamStore params_;
    text::Vocabulary vocab_;
    std::unique_ptr<text::TextEncoder> text_;
    NoiseSchedule schedule_;
    Conv2d ae_enc1_, ae_enc2_;
    ConvTranspose2d ae_dec1_, ae_dec2_;
    Tensor latent_scale_;
    EncoderStack enc_;
    DecoderStack dec_;
    Conv2d img1_, img2_;
    Linear img_proj_, txt_proj_;
};

struct BaseTrainConfig {
    long ae_steps = 1000;
    long clip_steps = 600;
    long steps = 3000;  // denoiser
    int batch = 8;
    int clip_batch = 16;
    double ae_lr = 2e-3;
    double clip_lr = 1e-3;
    double temperature = 0.07;
    double lr = 1e-3;
    double lr_floor = 1e-4;
    std::uint64_t seed = 0;
};

struct BaseTrainResult {
    std::vector<double> ae_losses, clip_losses, losses;
};

/// Autoencoder reconstruction, then the contrastive text/image phase, then
/// epsilon prediction on latents with the text encoder held fixed. Every
/// parameter is frozen on return.
BaseTrainResult pretrain_base(BaseModel& model, const scene::Corpus& corpus, const BaseTrainConfig& cfg);

/// Stacks [C,H,W] tensors into [B,C,H,W].
Tensor stack(const std::vector<Tensor>& items);
/// Gray [1,S,S] -> [3,S,S] by channel replication; RGB inputs pass through.
Tensor to_rgb(const Tensor& map);
/// Single-prompt encodings memoized by prompt text, no graph.
class PromptCache {
public:
    explicit PromptCache(const text::TextEncoder& enc) : enc_(&enc) {}
    const text::TextEmbedding& get(const std::string& prompt);
    text::TextEmbedding batch(const std::vector<std::string>& prompts);

private:
    const text::TextEncoder* enc_;
    std::map<std::string, text::TextEmbedding> cache_;
};

/// Row-wise concatenation of encodings.
text::TextEmbedding stack_embeddings(const std::vector<const text::TextEmbedding*>& parts);

}  // namespace omni::stage2
