// SPDX-License-Identifier: Apache-2.0
#include "omni/stage2.hpp"

#include <algorithm>
#include <fstream>

#include "omni/checkpoint.hpp"
#include "omni/optim.hpp"

namespace fs = std::filesystem;

namespace omni::stage2 {

PrefixMode parse_prefix_mode(const std::string& s) {
    if (s == "trainable_only") return PrefixMode::TrainableOnly;
    if (s == "both") return PrefixMode::Both;
    if (s == "none") return PrefixMode::None;
    throw ContractError("prefix_mode must be trainable_only, both or none, got '" + s + "'");
}

ZeroConvMode parse_zeroconv_mode(const std::string& s) {
    if (s == "learned") return ZeroConvMode::Learned;
    if (s == "mlp_from_embedding") return ZeroConvMode::MlpFromEmbedding;
    throw ContractError("zeroconv_mode must be learned or mlp_from_embedding, got '" + s + "'");
}

const char* prefix_mode_name(PrefixMode m) {
    switch (m) {
        case PrefixMode::TrainableOnly: return "trainable_only";
        case PrefixMode::Both: return "both";
        case PrefixMode::None: return "none";
    }
    return "?";
}

const char* zeroconv_mode_name(ZeroConvMode m) {
    return m == ZeroConvMode::Learned ? "learned" : "mlp_from_embedding";
}

ControlledModel::ControlledModel(const BaseModel& base, const ControlConfig& cfg, std::uint64_t seed)
    : base_(&base), cfg_(cfg) {
    require(cfg.cond_width >= 1 && cfg.mlp_hidden >= 1, "ControlledModel: widths must be positive");
    const BaseConfig& bc = base.config();
    const Rng root(seed);
    Rng r_copy = root.fork(1), r_cond = root.fork(2), r_mlp = root.fork(3);
    copy_ = EncoderStack::make(params_, "control.enc.", "control.mid.", bc, r_copy);
    params_.copy_values_from(base.params(), "unet.enc.", "control.enc.");
    params_.copy_values_from(base.params(), "unet.mid.", "control.mid.");
    const int cw = cfg.cond_width, lc = bc.latent_channels;
    cond1_ = Conv2d::make(params_, "control.cond1", 1, 16, 3, 1, 1, r_cond);
    cond2_ = Conv2d::make(params_, "control.cond2", 16, cw, 4, 2, 1, r_cond);
    cond3_ = Conv2d::make(params_, "control.cond3", cw, cw, 4, 2, 1, r_cond);
    if (cfg.zeroconv_mode == ZeroConvMode::Learned) {
        z1_ = Conv2d::make(params_, "control.z1", cw, lc, 1, 1, 0, r_cond, Init::Zero);
    } else {
        mlp1_ = Linear::make(params_, "control.mlp1", text::kDText, cfg.mlp_hidden, r_mlp);
        mlp2_ = Linear::make(params_, "control.mlp2", cfg.mlp_hidden, lc * cw + lc, r_mlp, Init::Zero);
    }
    const std::array<int, 4> taps = {bc.widths[0], bc.widths[1], bc.widths[2], bc.widths[2]};
    for (int i = 0; i < 4; ++i)
        z2_[static_cast<std::size_t>(i)] =
            Conv2d::make(params_, "control.z2." + std::to_string(i), taps[static_cast<std::size_t>(i)],
                         taps[static_cast<std::size_t>(i)], 1, 1, 0, r_cond, Init::Zero);
}

Tensor ControlledModel::encode_condition(const Tensor& maps) const {
    const int S = base_->config().canvas;
    if (maps.rank() != 4 || maps.dim(1) != 1 || maps.dim(2) != S || maps.dim(3) != S)
        throw ShapeError("condition maps must be [B,1," + std::to_string(S) + "," + std::to_string(S) + "], got " +
                         shape_str(maps.shape()));
    return silu(cond3_(silu(cond2_(silu(cond1_(maps))))));
}

Tensor ControlledModel::z1_weights(const Tensor& task_embeddings) const {
    require(cfg_.zeroconv_mode == ZeroConvMode::MlpFromEmbedding, "z1_weights: model is not in mlp_from_embedding mode");
    if (task_embeddings.rank() != 2 || task_embeddings.dim(1) != mlp1_.w.dim(0))
        throw ContractError("z1_weights: embedding length " + shape_str(task_embeddings.shape()) + " does not match MLP input " +
                            std::to_string(mlp1_.w.dim(0)));
    return mlp2_(silu(mlp1_(task_embeddings)));
}

Tensor ControlledModel::z1(const Tensor& c_f, const std::vector<std::string>& tasks) const {
    if (cfg_.zeroconv_mode == ZeroConvMode::Learned) return z1_(c_f);
    const int B = c_f.dim(0), cw = cfg_.cond_width, lc = base_->config().latent_channels;
    if (static_cast<int>(tasks.size()) != B) throw ShapeError("z1: one task per batch item required");
    std::vector<Tensor> rows;
    for (const auto& t : tasks) {
        const std::string tok = text::task_token(t);
        if (!base_->vocab().contains(tok)) throw ContractError("z1: task token " + tok + " is not registered");
        rows.push_back(base_->text().row(base_->vocab().id(tok)).reshape({1, text::kDText}));
    }
    const Tensor w = z1_weights(rows.size() == 1 ? rows.front() : concat(rows, 0));
    if (w.dim(1) != lc * cw + lc)
        throw ContractError("z1: MLP emits " + std::to_string(w.dim(1)) + " values, Z1 needs " + std::to_string(lc * cw + lc));
    std::vector<Tensor> chans;
    for (int o = 0; o < lc; ++o) chans.push_back(channel_dot(c_f, slice(w, 1, o * cw, cw)));
    return add_channel(concat(chans, 1), slice(w, 1, lc * cw, lc));
}

Tensor ControlledModel::predict_noise(const Tensor& z_t, const std::vector<int>& t, const text::TextEmbedding& c_t,
                                      const Tensor& condition_maps, const text::TextEmbedding& prefix_c_t,
                                      const std::vector<std::string>& tasks) const {
    if (!condition_maps.defined()) throw ContractError("predict_noise: the controlled model needs condition maps");
    if (condition_maps.dim(0) != z_t.dim(0)) throw ShapeError("predict_noise: condition batch differs from latent batch");
    EncoderStack::Out out = base_->encode(z_t, t, c_t);
    const Tensor c_f = encode_condition(condition_maps);
    const EncoderStack::Out ctl = copy_(add(z_t, z1(c_f, tasks)), t, prefix_c_t);
    for (int i = 0; i < 3; ++i) out.skips[i] = add(out.skips[i], z2_[static_cast<std::size_t>(i)](ctl.skips[i]));
    out.mid = add(out.mid, z2_[3](ctl.mid));
    return base_->decode(out, c_t);
}

std::string ControlledModel::frozen_prompt(const std::string& caption, const std::string& task) const {
    return cfg_.prefix_mode == PrefixMode::Both ? text::apply_prefix(base_->vocab(), task, caption) : caption;
}

std::string ControlledModel::control_prompt(const std::string& caption, const std::string& task) const {
    return cfg_.prefix_mode == PrefixMode::None ? caption : text::apply_prefix(base_->vocab(), task, caption);
}

Tensor ControlledModel::predict_noise(const Tensor& z_t, const std::vector<int>& t, const std::vector<std::string>& captions,
                                      const std::vector<std::string>& tasks, const Tensor& condition_maps,
                                      PromptCache& prompts) const {
    if (captions.size() != tasks.size()) throw ShapeError("predict_noise: one task per caption required");
    std::vector<std::string> fp, cp;
    for (std::size_t i = 0; i < captions.size(); ++i) {
        fp.push_back(frozen_prompt(captions[i], tasks[i]));
        cp.push_back(control_prompt(captions[i], tasks[i]));
    }
    return predict_noise(z_t, t, prompts.batch(fp), condition_maps, prompts.batch(cp), tasks);
}

void ControlledModel::save(const fs::path& dir) const {
    fs::create_directories(dir);
    save_checkpoint(params_, dir / "weights");
    std::ofstream m(dir / "control.txt");
    m << "prefix_mode " << prefix_mode_name(cfg_.prefix_mode) << "\nzeroconv_mode " << zeroconv_mode_name(cfg_.zeroconv_mode)
      << "\ncond_width " << cfg_.cond_width << "\nmlp_hidden " << cfg_.mlp_hidden << '\n';
}

std::unique_ptr<ControlledModel> ControlledModel::load(const BaseModel& base, const fs::path& dir) {
    std::ifstream m(dir / "control.txt");
    if (!m) throw ContractError("no stage-2 model at " + dir.string());
    ControlConfig cfg;
    std::string key, val;
    while (m >> key >> val) {
        if (key == "prefix_mode") cfg.prefix_mode = parse_prefix_mode(val);
        else if (key == "zeroconv_mode") cfg.zeroconv_mode = parse_zeroconv_mode(val);
        else if (key == "cond_width") cfg.cond_width = std::stoi(val);
        else if (key == "mlp_hidden") cfg.mlp_hidden = std::stoi(val);
        else throw ContractError("control.txt: unknown key " + key);
    }
    auto model = std::make_unique<ControlledModel>(base, cfg, 0);
    load_checkpoint(model->params_, dir / "weights");
    return model;
}

std::size_t count_parameters(const ControlledModel& model, bool trainable_only) {
    return model.base().params().count_scalars(trainable_only) + model.params().count_scalars(trainable_only);
}

Stage2Data stage2_data(const scene::Corpus& corpus) {
    Stage2Data d;
    for (std::size_t i = 0; i < corpus.unique.size(); ++i) {
        const auto& s = corpus.unique[i];
        d.images.push_back(s.image);
        d.captions.push_back(s.caption);
        for (const auto& t : s.task_mask) d.examples.push_back({static_cast<int>(i), t, s.conditions.at(t)});
    }
    return d;
}

void check_task_tokens(const text::Vocabulary& vocab, const std::string& prompt) {
    const std::string left = text::task_token("").substr(0, 3);
    for (const auto& w : text::split_words(prompt))
        if (w.rfind(left, 0) == 0 && !vocab.contains(w)) throw ContractError("prompt uses unregistered task token " + w);
}

Stage2TrainResult train_stage2(ControlledModel& model, const Stage2Data& data, const Stage2TrainConfig& cfg) {
    if (data.examples.empty()) throw ContractError("train_stage2: no examples");
    require(cfg.batch >= 1, "train_stage2: batch must be positive");
    const BaseModel& base = model.base();
    for (const auto& c : data.captions) check_task_tokens(base.vocab(), c);
    std::vector<std::string> tasks;
    std::map<std::string, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const std::string& t = data.examples[i].task;
        if (!by_task.count(t)) tasks.push_back(t);
        by_task[t].push_back(i);
        if (model.config().prefix_mode != PrefixMode::None || model.config().zeroconv_mode == ZeroConvMode::MlpFromEmbedding)
            require(base.vocab().contains(text::task_token(t)), "train_stage2: task token for '" + t + "' is not registered");
    }
    std::sort(tasks.begin(), tasks.end());

    std::vector<Tensor> latents;
    {
        NoGradGuard no_grad;
        const int lc = base.config().latent_channels, ls = base.config().canvas / 4;
        for (const auto& img : data.images) latents.push_back(base.encode_images(stack({img})).reshape({lc, ls, ls}));
    }
    PromptCache prompts(base.text());
    const NoiseSchedule& sched = base.schedule();
    ParamStore& ps = model.params();
    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    Rng rng = Rng(cfg.seed).fork(0x52);
    Tape& tape = Tape::current();
    Stage2TrainResult res;
    for (long step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> zs, conds;
        std::vector<std::string> caps, ts_names;
        std::vector<int> ts;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::string& task = tasks[rng.below(tasks.size())];
            const auto& pool = by_task.at(task);
            const Example& ex = data.examples[pool[rng.below(pool.size())]];
            zs.push_back(latents[static_cast<std::size_t>(ex.image)]);
            conds.push_back(ex.condition);
            caps.push_back(data.captions[static_cast<std::size_t>(ex.image)]);
            ts_names.push_back(task);
            ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T()))));
        }
        const Tensor z = stack(zs);
        const Tensor eps = Tensor::randn(z.shape(), rng);
        ps.zero_grad();
        const Tensor pred = model.predict_noise(add_noise(z, ts, eps, sched), ts, caps, ts_names, stack(conds), prompts);
        const Tensor loss = diffusion_loss(eps, pred);
        tape.backward(loss);
        res.losses.push_back(loss.item());
        tape.clear();
        opt.step(ps, poly_decay(cfg.lr, step, cfg.steps, cfg.lr_floor));
    }
    return res;
}

namespace {

using EpsFn = std::function<Tensor(const Tensor& z, const std::vector<int>& t, std::size_t begin, std::size_t end)>;

std::vector<Tensor> run_ddim(const BaseModel& base, std::size_t n, const std::vector<std::uint64_t>& indices, int steps,
                             std::uint64_t seed, int batch, const EpsFn& eps_fn) {
    require(batch >= 1, "ddim_sample: batch must be positive");
    const NoiseSchedule& sched = base.schedule();
    const std::vector<int> ts = sched.ddim_timesteps(steps);
    const int lc = base.config().latent_channels, ls = base.config().canvas / 4;
    const std::size_t per = static_cast<std::size_t>(lc) * ls * ls;
    NoGradGuard no_grad;
    std::vector<Tensor> out;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(n, begin + static_cast<std::size_t>(batch));
        const int B = static_cast<int>(end - begin);
        std::vector<double> z(per * static_cast<std::size_t>(B));
        for (std::size_t i = begin; i < end; ++i) {
            Rng r = Rng(seed).fork(indices[i]);
            for (std::size_t k = 0; k < per; ++k) z[(i - begin) * per + k] = r.normal();
        }
        for (std::size_t s = 0; s < ts.size(); ++s) {
            const int t = ts[s], t_prev = s + 1 < ts.size() ? ts[s + 1] : 0;
            const Tensor eps = eps_fn(Tensor::from({B, lc, ls, ls}, z), std::vector<int>(static_cast<std::size_t>(B), t), begin, end);
            z = ddim_step(z, {eps.values().begin(), eps.values().end()}, t, t_prev, sched);
        }
        const Tensor img = base.decode_latents(Tensor::from({B, lc, ls, ls}, std::move(z)));
        const int S = img.dim(2);
        const std::size_t plane = static_cast<std::size_t>(3) * S * S;
        for (int b = 0; b < B; ++b) {
            std::vector<double> v(img.values().begin() + static_cast<std::ptrdiff_t>(b * plane),
                                  img.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * plane));
            for (double& x : v) x = std::clamp(x, 0.0, 1.0);
            out.push_back(Tensor::from({3, S, S}, std::move(v)));
        }
    }
    return out;
}

std::vector<std::uint64_t> request_indices(const std::vector<SampleRequest>& req) {
    std::vector<std::uint64_t> idx;
    for (const auto& r : req) idx.push_back(r.index);
    return idx;
}

}  // namespace

std::vector<Tensor> ddim_sample(const ControlledModel& model, const std::vector<SampleRequest>& requests, int steps,
                                std::uint64_t seed, int batch) {
    for (const auto& r : requests) {
        check_task_tokens(model.base().vocab(), r.prompt);
        if (!r.condition.defined()) throw ContractError("ddim_sample: request without a condition map");
    }
    PromptCache prompts(model.base().text());
    return run_ddim(model.base(), requests.size(), request_indices(requests), steps, seed, batch,
                    [&](const Tensor& z, const std::vector<int>& t, std::size_t begin, std::size_t end) {
                        std::vector<std::string> caps, tasks;
                        std::vector<Tensor> conds;
                        for (std::size_t i = begin; i < end; ++i) {
                            caps.push_back(requests[i].prompt);
                            tasks.push_back(requests[i].task);
                            conds.push_back(requests[i].condition);
                        }
                        return model.predict_noise(z, t, caps, tasks, stack(conds), prompts);
                    });
}

std::vector<Tensor> ddim_sample(const BaseModel& model, const std::vector<SampleRequest>& requests, int steps,
                                std::uint64_t seed, int batch) {
    for (const auto& r : requests) check_task_tokens(model.vocab(), r.prompt);
    PromptCache prompts(model.text());
    return run_ddim(model, requests.size(), request_indices(requests), steps, seed, batch,
                    [&](const Tensor& z, const std::vector<int>& t, std::size_t begin, std::size_t end) {
                        std::vector<std::string> caps;
                        for (std::size_t i = begin; i < end; ++i) caps.push_back(requests[i].prompt);
                        return model.predict_noise(z, t, prompts.batch(caps));
                    });
}

}  // namespace omni::stage2
