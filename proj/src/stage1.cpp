// SPDX-License-Identifier: Apache-2.0
#include "omni/stage1.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "omni/checkpoint.hpp"
#include "omni/optim.hpp"

namespace omni::stage1 {

namespace fs = std::filesystem;

EmbeddingMode parse_embedding_mode(const std::string& s) {
    if (s == "one_hot") return EmbeddingMode::OneHot;
    if (s == "text") return EmbeddingMode::Text;
    throw ContractError("unknown stage1 embedding_mode '" + s + "' (one_hot|text)");
}

const char* embedding_mode_name(EmbeddingMode m) { return m == EmbeddingMode::OneHot ? "one_hot" : "text"; }

Tensor decode(const Tensor& feature, const Tensor& task_vectors) {
    if (task_vectors.rank() != 2 || task_vectors.dim(1) != feature.dim(1))
        throw ContractError("decode: task vector " + shape_str(task_vectors.shape()) + " does not match " +
                            std::to_string(feature.dim(1)) + " feature channels");
    return sigmoid(channel_dot(feature, task_vectors));
}

DensePredictor::DensePredictor(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.m >= 1 && cfg.C >= 1, "stage1: m and C must be >= 1");
    Rng rng(seed);
    const int cb = cfg.c_bb;
    if (cfg.stem > 0) stem_ = Conv2d::make(params_, "stage1.backbone.stem", 3, cfg.stem, 3, 1, 1, rng);
    const int c0 = cfg.stem > 0 ? cfg.stem : 3;
    for (int l = 0; l < 4; ++l) {
        const std::string n = "stage1.backbone.l" + std::to_string(l);
        // Level 0 is a 4x4 patch embedding; later levels merge 2x2 patches.
        levels_[l].down = l == 0 ? Conv2d::make(params_, n + ".down", c0, cb, 4, 4, 0, rng)
                                 : Conv2d::make(params_, n + ".down", cb, cb, 2, 2, 0, rng);
        // Zero residual branch: every level starts as relu(down(x)).
        levels_[l].conv = Conv2d::make(params_, n + ".conv", cb, cb, 3, 1, 1, rng, Init::Zero);
    }
    for (int h = 0; h < cfg.m; ++h) {
        const std::string n = "stage1.fpn.h" + std::to_string(h);
        Head head;
        for (int l = 0; l < 4; ++l)
            head.lateral[l] = Conv2d::make(params_, n + ".lat" + std::to_string(l), cb, cfg.fpn_width, 1, 1, 0, rng);
        head.smooth = Conv2d::make(params_, n + ".smooth", cfg.fpn_width, cfg.fpn_width, 3, 1, 1, rng);
        head.up = ConvTranspose2d::make(params_, n + ".up", cfg.fpn_width, cfg.C, 8, 4, 2, rng);
        if (cfg.stem > 0) head.fine = Conv2d::make(params_, n + ".fine", cfg.stem, cfg.C, 1, 1, 0, rng);
        heads_.push_back(head);
    }
    const int raw = cfg.mode == EmbeddingMode::OneHot ? static_cast<int>(scene::kTasks.size()) : cfg.text_dim;
    mlp1_ = Linear::make(params_, "stage1.task_mlp.fc1", raw, cfg.mlp_hidden, rng);
    mlp2_ = Linear::make(params_, "stage1.task_mlp.fc2", cfg.mlp_hidden, cfg.m * cfg.C, rng, Init::Normal002);
}

Pyramid DensePredictor::extract_multiscale(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("extract_multiscale expects [B,3,S,S], got " + shape_str(images.shape()));
    const int S = images.dim(2);
    if (S % 32 != 0 || images.dim(3) != S)
        throw ContractError("extract_multiscale: canvas S=" + std::to_string(S) + " must be square and divisible by 32");
    Pyramid out;
    Tensor x = images;
    if (cfg_.stem > 0) {
        x = relu(stem_(images));
        out.stem = x;
    }
    for (int l = 0; l < 4; ++l) {
        x = relu(levels_[l].down(x));
        x = relu(add(x, levels_[l].conv(x)));
        out[l] = x;
    }
    return out;
}

Tensor DensePredictor::fpn_head(const Pyramid& p, int h) const {
    const Head& head = heads_[static_cast<std::size_t>(h)];
    Tensor top = head.lateral[3](p[3]);
    for (int l = 2; l >= 0; --l) top = add(head.lateral[l](p[l]), upsample_nearest(top, 2));
    const Tensor up = head.up(relu(head.smooth(top)));
    return p.stem.defined() ? add(up, head.fine(p.stem)) : up;
}

Tensor DensePredictor::fpn_forward(const Pyramid& p) const {
    std::vector<Tensor> outs;
    for (int h = 0; h < cfg_.m; ++h) outs.push_back(fpn_head(p, h));
    return cfg_.m == 1 ? outs[0] : concat(outs, 1);
}

Tensor DensePredictor::task_raw(const std::string& task) const {
    const int idx = scene::task_index(task);
    if (cfg_.mode == EmbeddingMode::OneHot) {
        std::vector<double> v(scene::kTasks.size(), 0.0);
        v[static_cast<std::size_t>(idx)] = 1.0;
        return Tensor::from({1, static_cast<int>(v.size())}, v);
    }
    auto it = text_vectors_.find(task);
    if (it == text_vectors_.end()) throw ContractError("stage1 text mode: no text vector for task '" + task + "'");
    return Tensor::from({1, cfg_.text_dim}, it->second);
}

Tensor DensePredictor::project_raw(const Tensor& raw_rows) const { return mlp2_(relu(mlp1_(raw_rows))); }

Tensor DensePredictor::project_tasks(const std::vector<std::string>& tasks) const {
    std::vector<Tensor> rows;
    for (const auto& t : tasks) rows.push_back(task_raw(t));
    return project_raw(rows.size() == 1 ? rows[0] : concat(rows, 0));
}

void DensePredictor::set_text_vectors(const std::map<std::string, std::vector<double>>& vectors) {
    for (const auto& [task, v] : vectors) {
        scene::task_index(task);
        if (static_cast<int>(v.size()) != cfg_.text_dim) throw ShapeError("text vector for " + task + " has wrong length");
    }
    text_vectors_ = vectors;
}

Tensor DensePredictor::forward(const Tensor& images, const std::vector<std::string>& tasks) const {
    if (static_cast<int>(tasks.size()) != images.dim(0)) throw ContractError("forward: one task per batch item required");
    return decode(fpn_forward(extract_multiscale(images)), project_tasks(tasks));
}

void DensePredictor::save(const fs::path& dir) const {
    save_checkpoint(params_, dir);
    std::ofstream cfg(dir / "model.txt");
    cfg << "m " << cfg_.m << "\nC " << cfg_.C << "\nc_bb " << cfg_.c_bb << "\nfpn_width " << cfg_.fpn_width << "\nstem " << cfg_.stem
        << "\nmlp_hidden " << cfg_.mlp_hidden << "\nembedding_mode " << embedding_mode_name(cfg_.mode) << "\ntext_dim "
        << cfg_.text_dim << '\n';
    if (!text_vectors_.empty()) {
        ParamStore tv;
        for (const auto& [task, v] : text_vectors_) tv.add(task, Tensor::from({static_cast<int>(v.size())}, v));
        save_checkpoint(tv, dir / "task_text");
    }
}

void DensePredictor::load(const fs::path& dir) {
    load_checkpoint(params_, dir);
    if (fs::exists(dir / "task_text" / "manifest.txt")) {
        std::map<std::string, std::vector<double>> tv;
        for (const Parameter& p : read_checkpoint(dir / "task_text"))
            tv[p.name] = {p.tensor.values().begin(), p.tensor.values().end()};
        set_text_vectors(tv);
    }
}

double task_weight(const std::string& task) {
    static const std::map<std::string, double> w = {{"depth", 0.5}, {"hed", 1.0}, {"scribble", 5.0}, {"animal_pose", 5.0}};
    auto it = w.find(task);
    if (it == w.end()) throw ContractError("stage1_loss: unknown task '" + task + "'");
    return it->second;
}

Tensor stage1_loss(const Tensor& pred, const Tensor& target, const std::string& task) {
    const double w = task_weight(task);
    return scale(task == "depth" ? l1_mean(pred, target) : bce_mean(pred, target), w);
}

namespace {

Tensor stack_images(const std::vector<const Tensor*>& items) {
    const Shape& s = items.front()->shape();
    std::vector<double> v;
    v.reserve(items.size() * items.front()->numel());
    for (const Tensor* t : items) {
        if (t->shape() != s) throw ShapeError("stack: mixed shapes");
        v.insert(v.end(), t->values().begin(), t->values().end());
    }
    Shape out = {static_cast<int>(items.size())};
    out.insert(out.end(), s.begin(), s.end());
    return Tensor::from(out, std::move(v));
}

}  // namespace

TrainResult train_stage1(DensePredictor& model, const scene::Corpus& corpus, const TrainConfig& cfg,
                         const CheckpointFn& on_checkpoint) {
    if (corpus.size() == 0) throw ContractError("train_stage1: empty corpus");
    TrainResult result;
    Rng rng = Rng(cfg.seed).fork(0x5731);
    require(cfg.optimizer == "sgd" || cfg.optimizer == "adamw", "train_stage1: optimizer must be sgd or adamw, got '" + cfg.optimizer + "'");
    Sgd opt(cfg.momentum);
    AdamW adam(0.9, 0.999, 1e-8, 0.0);
    ParamStore& params = model.params();
    Tape& tape = Tape::current();
    const long warm_steps = std::lround(cfg.depth_warmup * static_cast<double>(cfg.steps));
    for (long step = 0; step < cfg.steps; ++step) {
        std::vector<const scene::Sample*> items;
        std::vector<const Tensor*> images;
        for (int b = 0; b < cfg.batch; ++b) {
            const scene::Sample& s = corpus[rng.below(corpus.size())];
            items.push_back(&s);
            images.push_back(&s.image);
        }
        params.zero_grad();
        const Tensor feature = model.fpn_forward(model.extract_multiscale(stack_images(images)));
        // Gather every (item, task) pair and decode them in one batched call.
        std::vector<int> owner;
        std::vector<std::string> tasks;
        for (int b = 0; b < cfg.batch; ++b)
            for (const auto& t : items[static_cast<std::size_t>(b)]->task_mask) {
                owner.push_back(b);
                tasks.push_back(t);
            }
        std::vector<Tensor> feats;
        for (int b : owner) feats.push_back(slice(feature, 0, b, 1));
        const Tensor preds = decode(concat(feats, 0), model.project_tasks(tasks));
        Tensor total;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const Tensor& target = items[static_cast<std::size_t>(owner[i])]->conditions.at(tasks[i]);
            const Tensor p = slice(preds, 0, static_cast<int>(i), 1);
            const Tensor t = target.reshape({1, 1, target.dim(1), target.dim(2)});
            // L1 through a sigmoid keeps pushing the zero background down with
            // undiminished force; regions that saturate early lose their gradient
            // and stay at 0. Squared error first lets the features separate.
            Tensor l = tasks[i] == "depth" && step < warm_steps ? scale(mse(p, t), task_weight("depth"))
                                                                     : stage1_loss(p, t, tasks[i]);
            total = total.defined() ? add(total, l) : l;
        }
        total = scale(total, 1.0 / cfg.batch);
        tape.backward(total);
        result.losses.push_back(total.item());
        tape.clear();
        const double lr = poly_decay(cfg.lr, step, cfg.steps, cfg.lr_floor);
        if (cfg.optimizer == "adamw")
            adam.step(params, lr);
        else
            opt.step(params, lr);
        if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) on_checkpoint(step + 1, model);
    }
    return result;
}

std::vector<Tensor> predict_many(const DensePredictor& model, const std::vector<Tensor>& images, const std::string& task,
                                 int batch) {
    NoGradGuard no_grad;
    std::vector<Tensor> out;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch));
        std::vector<const Tensor*> chunk;
        for (std::size_t i = start; i < end; ++i) chunk.push_back(&images[i]);
        const Tensor pred = model.forward(stack_images(chunk), std::vector<std::string>(chunk.size(), task));
        const int S = pred.dim(2);
        const std::size_t plane = static_cast<std::size_t>(S) * pred.dim(3);
        for (std::size_t i = 0; i < chunk.size(); ++i)
            out.push_back(Tensor::from({1, S, pred.dim(3)}, {pred.values().begin() + static_cast<std::ptrdiff_t>(i * plane),
                                                             pred.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * plane)}));
    }
    return out;
}

Tensor predict_condition(const DensePredictor& model, const Tensor& image, const std::string& task) {
    return predict_many(model, {image}, task, 1).front();
}

}  // namespace omni::stage1
