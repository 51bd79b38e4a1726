// SPDX-License-Identifier: Apache-2.0
#include "omni/denoiser.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "omni/checkpoint.hpp"
#include "omni/optim.hpp"

namespace fs = std::filesystem;

namespace omni::stage2 {

Tensor timestep_features(const std::vector<int>& t, int dim) {
    require(dim >= 2 && dim % 2 == 0, "timestep_features: dim must be even");
    const int half = dim / 2;
    std::vector<double> v(t.size() * static_cast<std::size_t>(dim));
    for (std::size_t b = 0; b < t.size(); ++b)
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
            v[b * dim + i] = std::sin(t[b] * freq);
            v[b * dim + half + i] = std::cos(t[b] * freq);
        }
    return Tensor::from({static_cast<int>(t.size()), dim}, std::move(v));
}

UNetBlock UNetBlock::make(ParamStore& ps, const std::string& name, int cin, int cout, int time_dim, Rng& rng) {
    UNetBlock b;
    b.conv = Conv2d::make(ps, name + ".conv", cin, cout, 3, 1, 1, rng);
    b.temb = Linear::make(ps, name + ".temb", time_dim, cout, rng, Init::Normal002);
    b.ln = LayerNorm::make(ps, name + ".ln", cout);
    b.q = Linear::make(ps, name + ".q", cout, cout, rng, Init::Normal002);
    b.k = Linear::make(ps, name + ".k", text::kDText, cout, rng, Init::Normal002);
    b.v = Linear::make(ps, name + ".v", text::kDText, cout, rng, Init::Normal002);
    b.o = Linear::make(ps, name + ".o", cout, cout, rng, Init::Normal002);
    return b;
}

Tensor UNetBlock::operator()(const Tensor& x, const Tensor& temb_act, const text::TextEmbedding& ctx) const {
    const Tensor h = silu(add_channel(conv(x), temb(temb_act)));
    const int H = h.dim(2), W = h.dim(3);
    const Tensor n = ln(to_tokens(h));
    const Tensor a = attention(q(n), k(ctx.matrix), v(ctx.matrix), text::kHeads, ctx.mask);
    return add(h, from_tokens(o(a), H, W));
}

EncoderStack EncoderStack::make(ParamStore& ps, const std::string& enc_prefix, const std::string& mid_prefix,
                                const BaseConfig& cfg, Rng& rng) {
    EncoderStack e;
    const auto& w = cfg.widths;
    e.conv_in = Conv2d::make(ps, enc_prefix + "conv_in", cfg.latent_channels, w[0], 3, 1, 1, rng);
    e.time1 = Linear::make(ps, enc_prefix + "time1", cfg.time_dim / 2, cfg.time_dim, rng);
    e.time2 = Linear::make(ps, enc_prefix + "time2", cfg.time_dim, cfg.time_dim, rng);
    for (int i = 0; i < 3; ++i) {
        const std::string n = enc_prefix + "block" + std::to_string(i);
        e.blocks[i] = UNetBlock::make(ps, n, w[i], w[i], cfg.time_dim, rng);
        e.down[i] = Conv2d::make(ps, enc_prefix + "down" + std::to_string(i), w[i], w[std::min(i + 1, 2)], 3, 2, 1, rng);
    }
    e.mid = UNetBlock::make(ps, mid_prefix + "block", w[2], w[2], cfg.time_dim, rng);
    return e;
}

EncoderStack::Out EncoderStack::operator()(const Tensor& x, const std::vector<int>& t, const text::TextEmbedding& ctx) const {
    if (static_cast<int>(t.size()) != x.dim(0)) throw ShapeError("denoiser: one timestep per batch item required");
    if (ctx.batch() != x.dim(0)) throw ShapeError("denoiser: text batch " + std::to_string(ctx.batch()) + " vs latent batch " + std::to_string(x.dim(0)));
    Out out;
    out.temb = silu(time2(silu(time1(timestep_features(t, time1.w.dim(0))))));
    Tensor h = conv_in(x);
    for (int i = 0; i < 3; ++i) {
        out.skips[i] = blocks[i](h, out.temb, ctx);
        h = down[i](out.skips[i]);
    }
    out.mid = mid(h, out.temb, ctx);
    return out;
}

DecoderStack DecoderStack::make(ParamStore& ps, const std::string& prefix, const BaseConfig& cfg, Rng& rng) {
    DecoderStack d;
    const auto& w = cfg.widths;
    d.blocks[0] = UNetBlock::make(ps, prefix + "block0", w[2], w[1], cfg.time_dim, rng);
    d.blocks[1] = UNetBlock::make(ps, prefix + "block1", w[1], w[0], cfg.time_dim, rng);
    d.blocks[2] = UNetBlock::make(ps, prefix + "block2", w[0], w[0], cfg.time_dim, rng);
    d.conv_out = Conv2d::make(ps, prefix + "conv_out", w[0], cfg.latent_channels, 3, 1, 1, rng, Init::Zero);
    return d;
}

Tensor DecoderStack::operator()(const EncoderStack::Out& enc, const text::TextEmbedding& ctx) const {
    Tensor h = enc.mid;
    for (int i = 0; i < 3; ++i) h = blocks[i](add(upsample_nearest(h, 2), enc.skips[2 - i]), enc.temb, ctx);
    return conv_out(h);
}

BaseModel::BaseModel(const BaseConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.canvas % 32 == 0, "BaseModel: canvas must be a multiple of 32, got " + std::to_string(cfg.canvas));
    require(cfg.time_dim % 2 == 0, "BaseModel: time_dim must be even");
    for (int w : cfg.widths) require(w % text::kHeads == 0, "BaseModel: widths must divide into attention heads");
    const Rng root(seed);
    Rng r_text = root.fork(1), r_ae = root.fork(2), r_unet = root.fork(3), r_clip = root.fork(4);
    text_ = std::make_unique<text::TextEncoder>(params_, vocab_, r_text);
    const int aw = cfg.ae_width, lc = cfg.latent_channels;
    ae_enc1_ = Conv2d::make(params_, "ae.enc1", 3, aw, 4, 2, 1, r_ae);
    ae_enc2_ = Conv2d::make(params_, "ae.enc2", aw, lc, 4, 2, 1, r_ae);
    ae_dec1_ = ConvTranspose2d::make(params_, "ae.dec1", lc, aw, 4, 2, 1, r_ae);
    ae_dec2_ = ConvTranspose2d::make(params_, "ae.dec2", aw, 3, 4, 2, 1, r_ae);
    latent_scale_ = params_.add("ae.latent_scale", Tensor::full({1}, 1.0));
    params_.set_frozen("ae.latent_scale", true);
    enc_ = EncoderStack::make(params_, "unet.enc.", "unet.mid.", cfg, r_unet);
    dec_ = DecoderStack::make(params_, "unet.dec.", cfg, r_unet);
    img1_ = Conv2d::make(params_, "clip.img1", 3, 16, 4, 4, 0, r_clip);
    img2_ = Conv2d::make(params_, "clip.img2", 16, 32, 4, 4, 0, r_clip);
    img_proj_ = Linear::make(params_, "clip.img_proj", 32, cfg.clip_dim, r_clip);
    txt_proj_ = Linear::make(params_, "clip.txt_proj", text::kDText, cfg.clip_dim, r_clip);
}

namespace {

Tensor ae_encode_raw(const Conv2d& c1, const Conv2d& c2, const Tensor& images) { return c2(silu(c1(images))); }

void check_images(const Tensor& images, int canvas) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != canvas || images.dim(3) != canvas)
        throw ShapeError("expected images [B,3," + std::to_string(canvas) + "," + std::to_string(canvas) + "], got " +
                         shape_str(images.shape()));
}

}  // namespace

Tensor BaseModel::encode_images(const Tensor& images) const {
    check_images(images, cfg_.canvas);
    return scale(ae_encode_raw(ae_enc1_, ae_enc2_, images), latent_scale());
}

Tensor BaseModel::decode_latents(const Tensor& z) const {
    return sigmoid(ae_dec2_(silu(ae_dec1_(scale(z, 1.0 / latent_scale())))));
}

EncoderStack::Out BaseModel::encode(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& ctx) const {
    return enc_(z_t, t, ctx);
}

Tensor BaseModel::decode(const EncoderStack::Out& enc, const text::TextEmbedding& ctx) const { return dec_(enc, ctx); }

Tensor BaseModel::predict_noise(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& ctx) const {
    return decode(encode(z_t, t, ctx), ctx);
}

Tensor BaseModel::image_embedding(const Tensor& images) const {
    check_images(images, cfg_.canvas);
    return normalize_rows(img_proj_(global_avg_pool(silu(img2_(silu(img1_(images)))))));
}

Tensor BaseModel::text_embedding(const text::TextEmbedding& enc) const { return normalize_rows(txt_proj_(enc.pooled)); }

int BaseModel::register_task_token(const std::string& task, Rng& rng) {
    const int id = text_->register_token(task, rng);
    params_.set_frozen(text_->row_name(id), true);
    return id;
}

std::vector<std::string> BaseModel::task_rows() const {
    const std::string left = text::task_token("").substr(0, 3);
    std::vector<std::string> out;
    for (int id = 0; id < vocab_.size(); ++id)
        if (vocab_.token(id).rfind(left, 0) == 0) out.push_back(text_->row_name(id));
    return out;
}

std::string BaseModel::frozen_digest() const {
    const auto rows = task_rows();
    const std::set<std::string> skip(rows.begin(), rows.end());
    return params_digest(params_, [&](const Parameter& p) { return p.frozen && !skip.count(p.name); });
}

void BaseModel::freeze_all() { params_.freeze_prefix("", true); }

void BaseModel::save(const fs::path& dir) const {
    fs::create_directories(dir);
    save_checkpoint(params_, dir / "weights");
    vocab_.save(dir / "vocab.txt");
    std::ofstream m(dir / "model.txt");
    m << "canvas " << cfg_.canvas << "\nlatent_channels " << cfg_.latent_channels << "\nae_width " << cfg_.ae_width
      << "\nwidths " << cfg_.widths[0] << ' ' << cfg_.widths[1] << ' ' << cfg_.widths[2] << "\ntime_dim " << cfg_.time_dim
      << "\nclip_dim " << cfg_.clip_dim << '\n';
}

std::unique_ptr<BaseModel> BaseModel::load(const fs::path& dir) {
    std::ifstream m(dir / "model.txt");
    if (!m) throw ContractError("no base model at " + dir.string());
    BaseConfig cfg;
    std::string key;
    while (m >> key) {
        if (key == "canvas") m >> cfg.canvas;
        else if (key == "latent_channels") m >> cfg.latent_channels;
        else if (key == "ae_width") m >> cfg.ae_width;
        else if (key == "widths") m >> cfg.widths[0] >> cfg.widths[1] >> cfg.widths[2];
        else if (key == "time_dim") m >> cfg.time_dim;
        else if (key == "clip_dim") m >> cfg.clip_dim;
        else throw ContractError("base model.txt: unknown key " + key);
    }
    auto model = std::make_unique<BaseModel>(cfg, 0);
    const text::Vocabulary saved = text::Vocabulary::load(dir / "vocab.txt");
    const int base_size = model->vocab_.size();
    require(saved.size() >= base_size, "base vocab.txt is shorter than the built-in vocabulary");
    for (int id = 0; id < saved.size(); ++id) {
        if (id < base_size) {
            require(saved.token(id) == model->vocab_.token(id), "base vocab.txt disagrees at id " + std::to_string(id));
            continue;
        }
        const std::string& tok = saved.token(id);
        const std::string left = text::task_token("").substr(0, 3), right = text::task_token("").substr(3);
        require(tok.size() > 6 && tok.rfind(left, 0) == 0, "base vocab.txt: unexpected token " + tok);
        Rng unused(0);
        model->register_task_token(tok.substr(3, tok.size() - 6), unused);
    }
    load_checkpoint(model->params_, dir / "weights");
    model->freeze_all();
    return model;
}

Tensor stack(const std::vector<Tensor>& items) {
    require(!items.empty(), "stack: no items");
    std::vector<Tensor> parts;
    parts.reserve(items.size());
    for (const Tensor& t : items) {
        Shape s = t.shape();
        s.insert(s.begin(), 1);
        parts.push_back(t.reshape(s));
    }
    return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

Tensor to_rgb(const Tensor& map) {
    if (map.rank() != 3 || (map.dim(0) != 1 && map.dim(0) != 3)) throw ShapeError("to_rgb: expected [1|3,H,W], got " + shape_str(map.shape()));
    if (map.dim(0) == 3) return map;
    return concat({map, map, map}, 0);
}

text::TextEmbedding stack_embeddings(const std::vector<const text::TextEmbedding*>& parts) {
    require(!parts.empty(), "stack_embeddings: no parts");
    if (parts.size() == 1) return *parts.front();
    std::vector<Tensor> m, p;
    text::TextEmbedding out;
    for (const auto* e : parts) {
        m.push_back(e->matrix);
        p.push_back(e->pooled);
        out.mask.insert(out.mask.end(), e->mask.begin(), e->mask.end());
    }
    out.matrix = concat(m, 0);
    out.pooled = concat(p, 0);
    return out;
}

const text::TextEmbedding& PromptCache::get(const std::string& prompt) {
    auto it = cache_.find(prompt);
    if (it != cache_.end()) return it->second;
    NoGradGuard no_grad;
    return cache_.emplace(prompt, enc_->encode_prompts({prompt})).first->second;
}

text::TextEmbedding PromptCache::batch(const std::vector<std::string>& prompts) {
    std::vector<const text::TextEmbedding*> parts;
    for (const auto& p : prompts) parts.push_back(&get(p));
    return stack_embeddings(parts);
}

namespace {

void train_only(ParamStore& ps, const std::vector<std::string>& prefixes) {
    ps.freeze_prefix("", true);
    for (const auto& p : prefixes) ps.freeze_prefix(p, false);
}

Tensor stack_samples(const scene::Corpus& corpus, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> imgs;
    for (std::size_t i : idx) imgs.push_back(corpus[i].image);
    return stack(imgs);
}

}  // namespace

BaseTrainResult pretrain_base(BaseModel& model, const scene::Corpus& corpus, const BaseTrainConfig& cfg) {
    if (corpus.size() == 0) throw ContractError("pretrain_base: empty corpus");
    require(cfg.batch >= 1 && cfg.clip_batch >= 2, "pretrain_base: batch sizes must be positive (clip_batch >= 2)");
    BaseTrainResult res;
    ParamStore& ps = model.params_;
    Tape& tape = Tape::current();
    const Rng root(cfg.seed);

    // Autoencoder.
    {
        train_only(ps, {"ae."});
        ps.set_frozen("ae.latent_scale", true);
        Rng rng = root.fork(11);
        AdamW opt(0.9, 0.999, 1e-8, 0.0);
        for (long step = 0; step < cfg.ae_steps; ++step) {
            std::vector<std::size_t> idx;
            for (int b = 0; b < cfg.batch; ++b) idx.push_back(rng.below(corpus.size()));
            ps.zero_grad();
            const Tensor x = stack_samples(corpus, idx);
            const Tensor z = ae_encode_raw(model.ae_enc1_, model.ae_enc2_, x);
            const Tensor rec = sigmoid(model.ae_dec2_(silu(model.ae_dec1_(z))));
            const Tensor loss = mse(rec, x);
            tape.backward(loss);
            res.ae_losses.push_back(loss.item());
            tape.clear();
            opt.step(ps, poly_decay(cfg.ae_lr, step, cfg.ae_steps, cfg.ae_lr * 0.1));
        }
        // Unit-variance latents for the diffusion prior.
        NoGradGuard no_grad;
        double s = 0, s2 = 0;
        std::size_t n = 0;
        for (const auto& u : corpus.unique) {
            const Tensor z = ae_encode_raw(model.ae_enc1_, model.ae_enc2_, stack({u.image}));
            for (double v : z.values()) {
                s += v;
                s2 += v * v;
                ++n;
            }
        }
        const double mean = s / static_cast<double>(n);
        const double var = std::max(s2 / static_cast<double>(n) - mean * mean, 1e-12);
        model.latent_scale_.mutable_values()[0] = 1.0 / std::sqrt(var);
    }

    // Contrastive text/image alignment.
    {
        train_only(ps, {"text.", "clip."});
        Rng rng = root.fork(12);
        AdamW opt(0.9, 0.999, 1e-8, 0.0);
        std::set<std::string> distinct;
        for (const auto& u : corpus.unique) distinct.insert(u.caption);
        const int B = std::min<int>(cfg.clip_batch, static_cast<int>(distinct.size()));
        std::vector<int> diag(static_cast<std::size_t>(B));
        for (int i = 0; i < B; ++i) diag[static_cast<std::size_t>(i)] = i;
        for (long step = 0; B >= 2 && step < cfg.clip_steps; ++step) {
            // Distinct captions per batch so every off-diagonal pair is a true negative.
            std::vector<std::size_t> idx;
            std::set<std::string> seen;
            while (static_cast<int>(idx.size()) < B) {
                const std::size_t i = rng.below(corpus.size());
                if (seen.insert(corpus[i].caption).second) idx.push_back(i);
            }
            std::vector<std::string> prompts;
            for (std::size_t i : idx) prompts.push_back(corpus[i].caption);
            ps.zero_grad();
            const Tensor img = model.image_embedding(stack_samples(corpus, idx));
            const Tensor txt = model.text_embedding(model.text_->encode_prompts(prompts));
            const Tensor logits = scale(matmul(img, transpose2d(txt)), 1.0 / cfg.temperature);
            const Tensor loss = scale(add(cross_entropy_rows(logits, diag), cross_entropy_rows(transpose2d(logits), diag)), 0.5);
            tape.backward(loss);
            res.clip_losses.push_back(loss.item());
            tape.clear();
            opt.step(ps, poly_decay(cfg.clip_lr, step, cfg.clip_steps, cfg.clip_lr * 0.1));
        }
    }

    // Epsilon prediction.
    {
        train_only(ps, {"unet."});
        Rng rng = root.fork(13);
        AdamW opt(0.9, 0.999, 1e-8, 0.0);
        std::vector<Tensor> latents;
        {
            NoGradGuard no_grad;
            for (const auto& u : corpus.unique) latents.push_back(slice(model.encode_images(stack({u.image})), 0, 0, 1).reshape({model.cfg_.latent_channels, model.cfg_.canvas / 4, model.cfg_.canvas / 4}));
        }
        PromptCache prompts(*model.text_);
        const NoiseSchedule& sched = model.schedule_;
        for (long step = 0; step < cfg.steps; ++step) {
            std::vector<Tensor> zs;
            std::vector<std::string> caps;
            std::vector<int> ts;
            for (int b = 0; b < cfg.batch; ++b) {
                const std::size_t i = rng.below(corpus.size());
                zs.push_back(latents[static_cast<std::size_t>(corpus.order[i])]);
                caps.push_back(corpus[i].caption);
                ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T()))));
            }
            const Tensor z = stack(zs);
            const Tensor eps = Tensor::randn(z.shape(), rng);
            ps.zero_grad();
            const Tensor pred = model.predict_noise(add_noise(z, ts, eps, sched), ts, prompts.batch(caps));
            const Tensor loss = diffusion_loss(eps, pred);
            tape.backward(loss);
            res.losses.push_back(loss.item());
            tape.clear();
            opt.step(ps, poly_decay(cfg.lr, step, cfg.steps, cfg.lr_floor));
        }
    }
    model.freeze_all();
    return res;
}

}  // namespace omni::stage2
