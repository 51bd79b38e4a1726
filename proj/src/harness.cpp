// SPDX-License-Identifier: Apache-2.0
#include "omni/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "omni/checkpoint.hpp"
#include "omni/image_io.hpp"
#include "omni/inversion.hpp"
#include "omni/kernels.hpp"
#include "omni/metrics.hpp"

namespace fs = std::filesystem;

namespace omni::harness {

json default_config() {
    return json::parse(R"({
  "corpus": {"size": 240, "pose": 40, "seed": 0, "canvas": 64, "holdout_seed": 1000, "holdout_size": 128},
  "base": {"ae_steps": 1000, "clip_steps": 600, "steps": 3000, "batch": 8, "lr": 0.001, "seed": 0},
  "stage1": {"m": 4, "C": 8, "lr": 0.001, "lr_floor": 0.0001, "steps": 3000, "batch": 8,
             "embedding_mode": "one_hot", "optimizer": "adamw", "depth_warmup": 0.5, "seed": 0},
  "inversion": {"steps": 2000, "lr": 0.005, "batch": 4, "seed": 0},
  "stage2": {"lr": 0.001, "lr_floor": 0.0001, "steps": 3000, "batch": 8, "ddim_steps": 50,
             "prefix_mode": "trainable_only", "zeroconv_mode": "learned", "condition_source": "stage1", "seed": 0},
  "sample": {"k": 4, "seed": 0},
  "eval": {"tasks": ["depth", "hed", "scribble", "animal_pose"], "n_samples": 64, "seed": 0},
  "paths": {"workdir": "runs/default"},
  "workers": 1
})");
}

namespace {

[[noreturn]] void bad(const std::string& msg) { throw HarnessError(kBadArgument, msg); }

bool same_kind(const json& def, const json& v) {
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_array()) {
        if (!v.is_array()) return false;
        if (def.empty()) return true;
        return std::all_of(v.begin(), v.end(), [&](const json& e) { return same_kind(def.front(), e); });
    }
    return def.is_object() && v.is_object();
}

void validate(const json& c) {
    auto positive = [&](const char* s, const char* k) {
        if (c[s][k].get<long>() < 1) bad(std::string(s) + "." + k + " must be positive");
    };
    auto nonneg = [&](const char* s, const char* k) {
        if (c[s][k].get<long>() < 0) bad(std::string(s) + "." + k + " must not be negative");
    };
    const auto& co = c["corpus"];
    if (co["pose"].get<long>() < 1 || co["size"].get<long>() <= co["pose"].get<long>())
        bad("corpus.size must exceed corpus.pose and corpus.pose must be positive");
    if (co["canvas"].get<long>() < 32 || co["canvas"].get<long>() % 32 != 0) bad("corpus.canvas must be a positive multiple of 32");
    if (co["holdout_size"].get<long>() < 4) bad("corpus.holdout_size must be at least 4");
    for (const char* k : {"ae_steps", "clip_steps", "steps"}) nonneg("base", k);
    positive("base", "batch");
    positive("stage1", "m");
    positive("stage1", "C");
    positive("stage1", "batch");
    nonneg("stage1", "steps");
    nonneg("inversion", "steps");
    positive("inversion", "batch");
    nonneg("stage2", "steps");
    positive("stage2", "batch");
    positive("sample", "k");
    if (c["eval"]["n_samples"].get<long>() < 2) bad("eval.n_samples must be at least 2");
    if (c["workers"].get<long>() < 1) bad("workers must be positive");
    const long ddim = c["stage2"]["ddim_steps"].get<long>();
    if (ddim < 1 || ddim > 1000) bad("stage2.ddim_steps must be in [1, 1000]");
    const std::string opt = c["stage1"]["optimizer"];
    if (opt != "adamw" && opt != "sgd") bad("stage1.optimizer must be adamw or sgd");
    const std::string src = c["stage2"]["condition_source"];
    if (src != "stage1" && src != "gt") bad("stage2.condition_source must be stage1 or gt");
    try {
        stage1::parse_embedding_mode(c["stage1"]["embedding_mode"]);
        stage2::parse_prefix_mode(c["stage2"]["prefix_mode"]);
        stage2::parse_zeroconv_mode(c["stage2"]["zeroconv_mode"]);
    } catch (const ContractError& e) {
        bad(e.what());
    }
    if (c["eval"]["tasks"].empty()) bad("eval.tasks must not be empty");
    for (const auto& t : c["eval"]["tasks"])
        if (std::find(scene::kTasks.begin(), scene::kTasks.end(), t.get<std::string>()) == scene::kTasks.end())
            bad("eval.tasks: unknown task '" + t.get<std::string>() + "'");
}

}  // namespace

void merge_checked(json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) bad("config" + (where.empty() ? "" : " section " + where) + " must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = where.empty() ? it.key() : where + "." + it.key();
        if (!base.contains(it.key())) bad("unknown config key '" + key + "'");
        json& slot = base[it.key()];
        if (slot.is_object()) {
            merge_checked(slot, it.value(), key);
        } else {
            if (!same_kind(slot, it.value())) bad("config key '" + key + "' expects " + std::string(slot.type_name()) + ", got " + it.value().dump());
            slot = slot.is_number_float() ? json(it.value().get<double>()) : it.value();
        }
    }
}

json resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& sets, bool use_env) {
    json cfg = default_config();
    if (file) {
        std::ifstream in(*file);
        if (!in) bad("cannot read config " + file->string());
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::parse_error& e) {
            bad("config " + file->string() + ": " + e.what());
        }
        merge_checked(cfg, doc);
    }
    for (const std::string& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) bad("--set expects key=value, got '" + s + "'");
        const std::string path = s.substr(0, eq), text = s.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        json patch = value;
        std::vector<std::string> parts;
        std::stringstream ss(path);
        for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
        merge_checked(cfg, patch);
    }
    if (use_env)
        if (const char* w = std::getenv("OMNICTL_WORKDIR"); w && *w) cfg["paths"]["workdir"] = w;
    validate(cfg);
    return cfg;
}

fs::path Context::workdir() const { return fs::path(config["paths"]["workdir"].get<std::string>()); }

std::string hash_tree(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) {
        std::ifstream in(dir / f, std::ios::binary);
        const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        listing += f.generic_string() + '\0' + sha256_hex(bytes.data(), bytes.size()) + '\n';
    }
    return sha256_hex(listing.data(), listing.size());
}

namespace {

const std::map<std::string, std::string> kProducer = {{"corpus", "gen-data"}, {"base", "pretrain-base"},
                                                      {"stage1", "train-stage1"}, {"tokens", "invert"},
                                                      {"stage2", "train-stage2"}, {"eval", "eval"}};

fs::path manifest_path(const Context& ctx) { return ctx.workdir() / "manifest.json"; }

json read_manifest(const Context& ctx) {
    std::ifstream in(manifest_path(ctx));
    if (!in) return json{{"entries", json::array()}};
    return json::parse(in);
}

void log(const Context& ctx, const std::string& msg) {
    if (!ctx.quiet) std::cout << msg << std::endl;
}

/// Hash of a finished upstream stage; refuses when the stage never ran or its files changed since.
std::string require_stage(const Context& ctx, const std::string& stage) {
    const fs::path dir = ctx.workdir() / stage;
    const json m = read_manifest(ctx);
    const json* last = nullptr;
    for (const auto& e : m["entries"])
        if (e["stage"] == stage) last = &e;
    const std::string hint = "missing dependency: " + stage + " (run `omnictl " + kProducer.at(stage) + "` first)";
    if (!last || !fs::exists(dir)) throw HarnessError(kMissingDependency, hint);
    const std::string h = hash_tree(dir);
    if ((*last)["outputs"][stage] != h)
        throw HarnessError(kMissingDependency, "dependency " + stage + " changed since it was recorded; rerun `omnictl " + kProducer.at(stage) + "`");
    return h;
}

void echo_config(const Context& ctx) {
    fs::create_directories(ctx.workdir());
    std::ofstream(ctx.workdir() / "config.json") << ctx.config.dump(2) << '\n';
}

/// Refuses to replace a non-empty stage directory unless forced.
fs::path prepare_output(const Context& ctx, const std::string& stage) {
    const fs::path dir = ctx.workdir() / stage;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!ctx.force) throw HarnessError(kRefused, dir.string() + " already exists; pass --force to overwrite");
        fs::remove_all(dir);
    }
    echo_config(ctx);
    fs::create_directories(dir);
    return dir;
}

void record(const Context& ctx, const std::string& stage, const std::map<std::string, std::string>& inputs,
            std::uint64_t seed, double seconds, const json& extra = json::object()) {
    json m = read_manifest(ctx);
    json entry = extra;
    entry["stage"] = stage;
    entry["inputs"] = inputs;
    entry["outputs"] = {{stage, hash_tree(ctx.workdir() / stage)}};
    entry["seed"] = seed;
    const std::string cfg = ctx.config.dump();
    entry["config_sha256"] = sha256_hex(cfg.data(), cfg.size());
    entry["wall_clock_s"] = seconds;
    m["entries"].push_back(entry);
    std::ofstream(manifest_path(ctx)) << m.dump(2) << '\n';
}

class Timer {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void write_losses(const fs::path& file, const std::vector<double>& losses) {
    std::ofstream out(file);
    out << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g\n", i, losses[i]);
        out << buf;
    }
}

template <class T>
T get(const json& c, const char* section, const char* key) {
    return c[section][key].get<T>();
}

void apply_workers(const Context& ctx) { kernels::set_num_workers(ctx.config["workers"].get<int>()); }

int canvas_of(const json& c) { return c["corpus"]["canvas"].get<int>(); }

}  // namespace

scene::Corpus load_corpus(const Context& ctx) {
    require_stage(ctx, "corpus");
    return scene::read_corpus(ctx.workdir() / "corpus");
}

scene::Corpus holdout_corpus(const json& c) {
    const int n = c["corpus"]["holdout_size"].get<int>();
    return scene::generate_corpus(c["corpus"]["holdout_seed"].get<std::uint64_t>(), n - n / 2, n / 2, canvas_of(c), false);
}

void gen_data(const Context& ctx) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    const fs::path dir = prepare_output(ctx, "corpus");
    const int size = get<int>(c, "corpus", "size"), pose = get<int>(c, "corpus", "pose");
    const auto seed = get<std::uint64_t>(c, "corpus", "seed");
    const scene::Corpus corpus = scene::generate_corpus(seed, size - pose, pose, canvas_of(c), true);
    scene::write_corpus(corpus, dir);
    log(ctx, "gen-data: " + std::to_string(corpus.unique.size()) + " scenes, " + std::to_string(corpus.size()) +
                 " balanced entries -> " + dir.string());
    record(ctx, "corpus", {}, seed, timer.seconds());
}

void pretrain_base(const Context& ctx) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    const std::string corpus_hash = require_stage(ctx, "corpus");
    const scene::Corpus corpus = load_corpus(ctx);
    const fs::path dir = prepare_output(ctx, "base");
    stage2::BaseConfig bc;
    bc.canvas = canvas_of(c);
    const auto seed = get<std::uint64_t>(c, "base", "seed");
    stage2::BaseModel model(bc, seed);
    stage2::BaseTrainConfig tc;
    tc.ae_steps = get<long>(c, "base", "ae_steps");
    tc.clip_steps = get<long>(c, "base", "clip_steps");
    tc.steps = get<long>(c, "base", "steps");
    tc.batch = get<int>(c, "base", "batch");
    tc.lr = get<double>(c, "base", "lr");
    tc.seed = seed;
    log(ctx, "pretrain-base: " + std::to_string(tc.ae_steps) + " autoencoder, " + std::to_string(tc.clip_steps) +
                 " contrastive, " + std::to_string(tc.steps) + " denoiser steps");
    const auto res = stage2::pretrain_base(model, corpus, tc);
    model.save(dir / "model");
    write_losses(dir / "loss_autoencoder.csv", res.ae_losses);
    write_losses(dir / "loss_contrastive.csv", res.clip_losses);
    write_losses(dir / "loss.csv", res.losses);
    record(ctx, "base", {{"corpus", corpus_hash}}, seed, timer.seconds());
}

std::unique_ptr<stage2::BaseModel> load_base(const Context& ctx, bool with_tokens) {
    require_stage(ctx, "base");
    auto base = stage2::BaseModel::load(ctx.workdir() / "base" / "model");
    const Rng reg(get<std::uint64_t>(ctx.config, "inversion", "seed"));
    for (std::size_t i = 0; i < scene::kTasks.size(); ++i) {
        Rng r = reg.fork(i);
        base->register_task_token(scene::kTasks[i], r);
    }
    if (with_tokens) {
        require_stage(ctx, "tokens");
        for (const auto& task : scene::kTasks) {
            const std::vector<double> v = inversion::load_token(ctx.workdir() / "tokens", task);
            Tensor row = base->params().tensor(base->text().row_name(base->vocab().id(text::task_token(task))));
            if (v.size() != row.numel()) throw HarnessError(kMissingDependency, "token file for " + task + " has the wrong length");
            std::copy(v.begin(), v.end(), row.mutable_values().begin());
        }
    }
    return base;
}

namespace {

stage1::ModelConfig stage1_model_config(const json& c) {
    stage1::ModelConfig mc;
    mc.m = get<int>(c, "stage1", "m");
    mc.C = get<int>(c, "stage1", "C");
    mc.mode = stage1::parse_embedding_mode(get<std::string>(c, "stage1", "embedding_mode"));
    return mc;
}

std::map<std::string, std::vector<double>> text_task_vectors(const stage2::BaseModel& base) {
    NoGradGuard no_grad;
    std::map<std::string, std::vector<double>> out;
    for (const auto& task : scene::kTasks) {
        const Tensor pooled = base.text().encode_prompts({task}).pooled;
        out[task] = {pooled.values().begin(), pooled.values().end()};
    }
    return out;
}

}  // namespace

void train_stage1(const Context& ctx) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    std::map<std::string, std::string> inputs = {{"corpus", require_stage(ctx, "corpus")}};
    const stage1::ModelConfig mc = stage1_model_config(c);
    std::unique_ptr<stage2::BaseModel> base;
    if (mc.mode == stage1::EmbeddingMode::Text) {
        inputs["base"] = require_stage(ctx, "base");
        base = load_base(ctx, false);
    }
    const scene::Corpus corpus = load_corpus(ctx);
    const fs::path dir = prepare_output(ctx, "stage1");
    const auto seed = get<std::uint64_t>(c, "stage1", "seed");
    stage1::DensePredictor model(mc, seed);
    if (base) model.set_text_vectors(text_task_vectors(*base));
    stage1::TrainConfig tc;
    tc.steps = get<long>(c, "stage1", "steps");
    tc.batch = get<int>(c, "stage1", "batch");
    tc.lr = get<double>(c, "stage1", "lr");
    tc.lr_floor = get<double>(c, "stage1", "lr_floor");
    tc.optimizer = get<std::string>(c, "stage1", "optimizer");
    tc.depth_warmup = get<double>(c, "stage1", "depth_warmup");
    tc.seed = seed;
    log(ctx, "train-stage1: " + std::to_string(tc.steps) + " steps, m=" + std::to_string(mc.m) + " C=" + std::to_string(mc.C) +
                 " embedding " + stage1::embedding_mode_name(mc.mode));
    const auto res = stage1::train_stage1(model, corpus, tc);
    model.save(dir / "model");
    write_losses(dir / "loss.csv", res.losses);
    record(ctx, "stage1", inputs, seed, timer.seconds());
}

std::unique_ptr<stage1::DensePredictor> load_stage1(const Context& ctx) {
    require_stage(ctx, "stage1");
    auto model = std::make_unique<stage1::DensePredictor>(stage1_model_config(ctx.config), 0);
    model->load(ctx.workdir() / "stage1" / "model");
    return model;
}

void invert(const Context& ctx) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    const std::map<std::string, std::string> inputs = {{"corpus", require_stage(ctx, "corpus")}, {"base", require_stage(ctx, "base")}};
    const scene::Corpus corpus = load_corpus(ctx);
    auto base = load_base(ctx, false);
    const fs::path dir = prepare_output(ctx, "tokens");
    const auto seed = get<std::uint64_t>(c, "inversion", "seed");
    const Rng root(seed);
    json extra;
    extra["frozen_sha256_before"] = base->frozen_digest();
    for (std::size_t i = 0; i < scene::kTasks.size(); ++i) {
        const std::string& task = scene::kTasks[i];
        std::vector<const scene::Sample*> pool;
        for (const auto& s : corpus.unique)
            if (s.has(task)) pool.push_back(&s);
        if (pool.size() < inversion::kExemplars)
            throw HarnessError(kBadArgument, "invert: corpus has only " + std::to_string(pool.size()) + " scenes with " + task);
        Rng pick = root.fork(100 + i);
        for (std::size_t k = 0; k < inversion::kExemplars; ++k) std::swap(pool[k], pool[k + pick.below(pool.size() - k)]);
        inversion::InversionJob job;
        job.task = task;
        for (std::size_t k = 0; k < inversion::kExemplars; ++k) job.exemplars.push_back(stage2::to_rgb(pool[k]->conditions.at(task)));
        job.steps = get<long>(c, "inversion", "steps");
        job.lr = get<double>(c, "inversion", "lr");
        job.batch = get<int>(c, "inversion", "batch");
        job.seed = root.fork(200 + i).next_u64();
        log(ctx, "invert: " + text::task_token(task) + " for " + std::to_string(job.steps) + " steps");
        std::vector<std::vector<double>> before;
        for (const auto& p : base->params().all()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
        const auto res = inversion::learn_embedding(*base, job);
        json changed = json::array();
        for (std::size_t k = 0; k < before.size(); ++k) {
            const auto& p = base->params().all()[k];
            if (!std::equal(before[k].begin(), before[k].end(), p.tensor.values().begin())) changed.push_back(p.name);
        }
        extra["changed"][task] = changed;
        extra["row"][task] = base->text().row_name(res.token_id);
        inversion::save_token(dir, task, res.token_id, res.v, job.seed, job.steps);
        write_losses(dir / ("loss_" + task + ".csv"), res.losses);
    }
    extra["frozen_sha256_after"] = base->frozen_digest();
    record(ctx, "tokens", inputs, seed, timer.seconds(), extra);
}

namespace {

stage2::ControlConfig control_config(const json& c) {
    stage2::ControlConfig cc;
    cc.prefix_mode = stage2::parse_prefix_mode(get<std::string>(c, "stage2", "prefix_mode"));
    cc.zeroconv_mode = stage2::parse_zeroconv_mode(get<std::string>(c, "stage2", "zeroconv_mode"));
    return cc;
}

/// Stage-1 predictions for every (image, task) pair, batched per task.
void replace_with_predictions(stage2::Stage2Data& data, const stage1::DensePredictor& model) {
    for (const auto& task : scene::kTasks) {
        std::vector<std::size_t> idx;
        std::vector<Tensor> imgs;
        for (std::size_t i = 0; i < data.examples.size(); ++i)
            if (data.examples[i].task == task) {
                idx.push_back(i);
                imgs.push_back(data.images[static_cast<std::size_t>(data.examples[i].image)]);
            }
        if (idx.empty()) continue;
        const auto preds = stage1::predict_many(model, imgs, task);
        for (std::size_t k = 0; k < idx.size(); ++k) data.examples[idx[k]].condition = preds[k];
    }
}

}  // namespace

void train_stage2(const Context& ctx) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    std::map<std::string, std::string> inputs = {{"corpus", require_stage(ctx, "corpus")},
                                                 {"base", require_stage(ctx, "base")},
                                                 {"tokens", require_stage(ctx, "tokens")}};
    const bool from_stage1 = get<std::string>(c, "stage2", "condition_source") == "stage1";
    std::unique_ptr<stage1::DensePredictor> s1;
    if (from_stage1) {
        inputs["stage1"] = require_stage(ctx, "stage1");
        s1 = load_stage1(ctx);
    }
    const scene::Corpus corpus = load_corpus(ctx);
    auto base = load_base(ctx, true);
    const fs::path dir = prepare_output(ctx, "stage2");
    stage2::Stage2Data data = stage2::stage2_data(corpus);
    if (s1) replace_with_predictions(data, *s1);
    const auto seed = get<std::uint64_t>(c, "stage2", "seed");
    stage2::ControlledModel model(*base, control_config(c), seed);
    stage2::Stage2TrainConfig tc;
    tc.steps = get<long>(c, "stage2", "steps");
    tc.batch = get<int>(c, "stage2", "batch");
    tc.lr = get<double>(c, "stage2", "lr");
    tc.lr_floor = get<double>(c, "stage2", "lr_floor");
    tc.seed = seed;
    log(ctx, "train-stage2: " + std::to_string(tc.steps) + " steps, prefix " + stage2::prefix_mode_name(model.config().prefix_mode) +
                 ", zero-conv " + stage2::zeroconv_mode_name(model.config().zeroconv_mode) + ", conditions from " +
                 (from_stage1 ? "stage 1" : "ground truth"));
    json extra;
    extra["frozen_sha256_before"] = base->frozen_digest();
    const std::string all_before = params_digest(base->params(), std::function<bool(const Parameter&)>([](const Parameter&) { return true; }));
    const auto res = stage2::train_stage2(model, data, tc);
    extra["frozen_sha256_after"] = base->frozen_digest();
    extra["base_unchanged"] = all_before == params_digest(base->params(), std::function<bool(const Parameter&)>([](const Parameter&) { return true; }));
    model.save(dir / "model");
    write_losses(dir / "loss.csv", res.losses);
    record(ctx, "stage2", inputs, seed, timer.seconds(), extra);
}

namespace {

Tensor read_map(const fs::path& file) {
    if (!fs::exists(file)) bad("no such file " + file.string());
    try {
        if (file.extension() == ".pgm") return read_pgm(file);
        const Tensor rgb = read_png(file);
        return slice(rgb, 0, 0, 1);
    } catch (const std::exception& e) {
        bad("cannot read " + file.string() + ": " + e.what());
    }
}

/// [input | condition | samples...] side by side.
Tensor grid(const Tensor& input, const Tensor& condition, const std::vector<Tensor>& samples) {
    std::vector<Tensor> panels = {input, stage2::to_rgb(condition)};
    panels.insert(panels.end(), samples.begin(), samples.end());
    return concat(panels, 2);
}

const std::vector<std::string>& task_list() {
    static const std::vector<std::string> t(scene::kTasks.begin(), scene::kTasks.end());
    return t;
}

}  // namespace

fs::path sample(const Context& ctx, const SampleArgs& args) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    if (args.image.has_value() == args.condition.has_value()) bad("sample: pass exactly one of --image and --condition");
    const auto& tasks = task_list();
    if (std::find(tasks.begin(), tasks.end(), args.task) == tasks.end()) bad("sample: unregistered task token for '" + args.task + "'");
    std::map<std::string, std::string> inputs = {{"base", require_stage(ctx, "base")},
                                                 {"tokens", require_stage(ctx, "tokens")},
                                                 {"stage2", require_stage(ctx, "stage2")}};
    if (args.image) inputs["stage1"] = require_stage(ctx, "stage1");
    auto base = load_base(ctx, true);
    try {
        stage2::check_task_tokens(base->vocab(), args.prompt);
    } catch (const ContractError& e) {
        bad(std::string("sample: ") + e.what());
    }
    const int S = canvas_of(c);
    Tensor input, condition;
    std::string mode;
    if (args.image) {
        if (!fs::exists(*args.image)) bad("no such file " + args.image->string());
        input = read_png(*args.image);
        if (input.dim(1) != S || input.dim(2) != S) bad("sample: image must be " + std::to_string(S) + "x" + std::to_string(S));
        condition = stage1::predict_condition(*load_stage1(ctx), input, args.task);
        mode = "unified-stage1+2";
    } else {
        condition = read_map(*args.condition);
        if (condition.dim(1) != S || condition.dim(2) != S) bad("sample: condition must be " + std::to_string(S) + "x" + std::to_string(S));
        input = stage2::to_rgb(condition);
        mode = "unified-stage2";
    }
    const fs::path out = args.out ? *args.out : ctx.workdir() / "samples" / (args.task + ".png");
    fs::path run = out;
    run.replace_extension(".run.txt");
    if (fs::exists(out) && !ctx.force) throw HarnessError(kRefused, out.string() + " already exists; pass --force to overwrite");
    echo_config(ctx);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());

    const auto model = stage2::ControlledModel::load(*base, ctx.workdir() / "stage2" / "model");
    const int k = get<int>(c, "sample", "k");
    const auto seed = get<std::uint64_t>(c, "sample", "seed");
    const int steps = get<int>(c, "stage2", "ddim_steps");
    std::vector<stage2::SampleRequest> reqs;
    for (int i = 0; i < k; ++i) reqs.push_back({args.prompt, args.task, condition, static_cast<std::uint64_t>(i)});
    const auto samples = stage2::ddim_sample(*model, reqs, steps, seed);
    write_png(out, grid(input, condition, samples));
    std::ofstream r(run);
    r << "mode " << mode << "\nprompt " << args.prompt << "\ntask " << args.task << "\nk " << k << "\nseed " << seed
      << "\nddim_steps " << steps << "\ninput " << (args.image ? *args.image : *args.condition).string() << '\n';
    for (const auto& [name, h] : inputs) r << "sha256 " << name << ' ' << h << '\n';
    log(ctx, "sample: " + mode + " -> " + out.string());
    return out;
}

Stage1Scores score_stage1(const stage1::DensePredictor& model, const scene::Corpus& holdout) {
    std::map<std::string, std::vector<Tensor>> preds;
    for (const auto& task : scene::kTasks) {
        std::vector<Tensor> imgs;
        for (const auto& smp : holdout.unique)
            if (smp.has(task)) imgs.push_back(smp.image);
        if (!imgs.empty()) preds[task] = stage1::predict_many(model, imgs, task);
    }
    return score_predictions(preds, holdout);
}

Stage1Scores score_predictions(const std::map<std::string, std::vector<Tensor>>& all, const scene::Corpus& holdout) {
    Stage1Scores s;
    for (const auto& task : scene::kTasks) {
        std::vector<Tensor> gts;
        for (const auto& smp : holdout.unique)
            if (smp.has(task)) gts.push_back(smp.conditions.at(task));
        if (gts.empty()) continue;
        const auto it = all.find(task);
        if (it == all.end() || it->second.size() != gts.size())
            throw ContractError("score_predictions: need one prediction per held-out scene with " + task);
        const std::vector<Tensor>& preds = it->second;
        double acc = 0, bce = 0, se = 0, n = 0;
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (std::size_t j = 0; j < gts[i].numel(); ++j) {
                const double p = preds[i].at(j), t = gts[i].at(j);
                se += (p - t) * (p - t);
                acc += (p > 0.5) == (t > 0.5);
                const double q = std::clamp(p, 1e-7, 1 - 1e-7);
                bce -= t * std::log(q) + (1 - t) * std::log(1 - q);
                n += 1;
            }
        if (task == "depth") s.rmse = std::sqrt(se / n);
        if (task == "scribble") s.scribble_accuracy = acc / n;
        if (task == "animal_pose") s.pose_bce = bce / n;
        if (task == "hed") {
            std::vector<Tensor> bin;
            for (const Tensor& g : gts) {
                std::vector<double> v(g.numel());
                for (std::size_t j = 0; j < v.size(); ++j) v[j] = g.at(j) > 0.3 ? 1.0 : 0.0;
                bin.push_back(Tensor::from(g.shape(), std::move(v)));
            }
            s.ods = metrics::ods(preds, bin).f;
            s.ois = metrics::ois(preds, bin);
            s.ap = metrics::ap(preds, bin);
        }
    }
    return s;
}

namespace {

std::vector<metrics::Row> stage1_rows(const Stage1Scores& s, const std::string& variant) {
    return {{"RMSE", "depth", variant, s.rmse},           {"ODS", "hed", variant, s.ods},
            {"OIS", "hed", variant, s.ois},               {"AP", "hed", variant, s.ap},
            {"accuracy", "scribble", variant, s.scribble_accuracy}, {"BCE", "animal_pose", variant, s.pose_bce}};
}

struct GenScores {
    double fid = 0, clip = 0;
};

GenScores score_generation(const stage2::BaseModel& base, const std::vector<Tensor>& samples, const std::vector<Tensor>& refs,
                           const std::vector<std::string>& captions) {
    const auto ex = metrics::toy_fid_extractor(base);
    return {metrics::frechet(metrics::feature_stats(samples, ex), metrics::feature_stats(refs, ex)),
            metrics::clip_score(base, samples, captions)};
}

void write_reports(const fs::path& dir, const std::string& stem, const std::string& title, const std::vector<metrics::Row>& gen,
                   const std::vector<metrics::Row>& s1) {
    std::vector<metrics::Row> all = gen;
    all.insert(all.end(), s1.begin(), s1.end());
    metrics::write_csv(dir / (stem + ".csv"), all);
    std::ostringstream md;
    if (!gen.empty()) {
        metrics::write_markdown(dir / (stem + ".gen.md"), title + ": generation", gen);
        std::ifstream in(dir / (stem + ".gen.md"));
        md << in.rdbuf() << '\n';
        fs::remove(dir / (stem + ".gen.md"));
    }
    if (!s1.empty()) {
        metrics::write_markdown(dir / (stem + ".s1.md"), title + ": stage 1", s1);
        std::ifstream in(dir / (stem + ".s1.md"));
        md << in.rdbuf();
        fs::remove(dir / (stem + ".s1.md"));
    }
    std::ofstream(dir / (stem + ".md")) << md.str();
}

void eval_impl(const Context& ctx, bool stage1_only) {
    apply_workers(ctx);
    const Timer timer;
    const json& c = ctx.config;
    std::map<std::string, std::string> inputs = {{"stage1", require_stage(ctx, "stage1")}};
    if (!stage1_only) {
        inputs["base"] = require_stage(ctx, "base");
        inputs["tokens"] = require_stage(ctx, "tokens");
        inputs["stage2"] = require_stage(ctx, "stage2");
    }
    const auto s1 = load_stage1(ctx);
    const fs::path dir = prepare_output(ctx, "eval");
    const scene::Corpus hold = holdout_corpus(c);
    log(ctx, "eval: stage 1 on " + std::to_string(hold.unique.size()) + " held-out scenes");
    const std::vector<metrics::Row> s1_rows = stage1_rows(score_stage1(*s1, hold), "stage1");
    std::vector<metrics::Row> gen, zeroed;
    if (!stage1_only) {
        auto base = load_base(ctx, true);
        const auto model = stage2::ControlledModel::load(*base, ctx.workdir() / "stage2" / "model");
        const int n = get<int>(c, "eval", "n_samples"), steps = get<int>(c, "stage2", "ddim_steps");
        const auto seed = get<std::uint64_t>(c, "eval", "seed");
        for (const auto& tj : c["eval"]["tasks"]) {
            const std::string task = tj.get<std::string>();
            std::vector<Tensor> refs, gts;
            std::vector<std::string> caps;
            for (const auto& smp : hold.unique)
                if (smp.has(task) && static_cast<int>(refs.size()) < n) {
                    refs.push_back(smp.image);
                    gts.push_back(smp.conditions.at(task));
                    caps.push_back(smp.caption);
                }
            if (refs.size() < 2) throw HarnessError(kMissingDependency, "eval: held-out split has fewer than 2 scenes with " + task);
            const auto preds = stage1::predict_many(*s1, refs, task);
            auto run = [&](const std::vector<Tensor>& conds) {
                std::vector<stage2::SampleRequest> reqs;
                for (std::size_t i = 0; i < conds.size(); ++i) reqs.push_back({caps[i], task, conds[i], i});
                return score_generation(*base, stage2::ddim_sample(*model, reqs, steps, seed), refs, caps);
            };
            log(ctx, "eval: sampling " + std::to_string(3 * refs.size()) + " images for " + task);
            const GenScores a = run(gts), b = run(preds);
            std::vector<Tensor> zero(gts.size(), Tensor::zeros(gts[0].shape()));
            const GenScores z = run(zero);
            gen.push_back({"toy-FID", task, "unified-stage2", a.fid});
            gen.push_back({"CLIP_t", task, "unified-stage2", a.clip});
            gen.push_back({"toy-FID", task, "unified-stage1+2", b.fid});
            gen.push_back({"CLIP_t", task, "unified-stage1+2", b.clip});
            zeroed.push_back({"toy-FID", task, "conditioned", a.fid});
            zeroed.push_back({"CLIP_t", task, "conditioned", a.clip});
            zeroed.push_back({"toy-FID", task, "zeroed-condition", z.fid});
            zeroed.push_back({"CLIP_t", task, "zeroed-condition", z.clip});
        }
        write_reports(dir, "conditioning", "Conditioned vs zeroed condition maps", zeroed, {});
    }
    write_reports(dir, "report", "Evaluation", gen, s1_rows);
    log(ctx, "eval: reports in " + dir.string());
    record(ctx, "eval", inputs, get<std::uint64_t>(c, "eval", "seed"), timer.seconds());
}

std::vector<metrics::Row> read_rows(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw HarnessError(kMissingDependency, "missing report " + file.string());
    std::vector<metrics::Row> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        metrics::Row r;
        std::string v;
        std::getline(ss, r.metric, ',');
        std::getline(ss, r.task, ',');
        std::getline(ss, r.variant, ',');
        std::getline(ss, v);
        r.value = std::stod(v);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace

void eval(const Context& ctx) { eval_impl(ctx, false); }

Flip ablation_flip(const std::string& name) {
    if (name == "prefix_both") return {"stage2", "prefix_mode", "both"};
    if (name == "mlp_zeroconv") return {"stage2", "zeroconv_mode", "mlp_from_embedding"};
    if (name == "single_head") return {"stage1", "m", 1};
    if (name == "text_task_embedding") return {"stage1", "embedding_mode", "text"};
    std::string valid;
    for (const auto& a : kAblations) valid += (valid.empty() ? "" : ", ") + a;
    bad("unknown ablation '" + name + "'; valid names: " + valid);
}

void ablate(const Context& ctx, const std::string& name) {
    const Flip flip = ablation_flip(name);
    const bool stage2_flip = flip.section == "stage2";
    require_stage(ctx, "eval");
    for (const char* s : {"corpus", "base", "tokens", "stage1"}) require_stage(ctx, s);
    if (stage2_flip) require_stage(ctx, "stage2");
    const std::vector<metrics::Row> baseline = read_rows(ctx.workdir() / "eval" / "report.csv");

    Context v = ctx;
    const fs::path vdir = ctx.workdir() / "ablate" / name;
    if (fs::exists(vdir) && !fs::is_empty(vdir)) {
        if (!ctx.force) throw HarnessError(kRefused, vdir.string() + " already exists; pass --force to overwrite");
        fs::remove_all(vdir);
    }
    v.config["paths"]["workdir"] = vdir.string();
    v.config[flip.section][flip.key] = flip.value;
    v.force = false;
    fs::create_directories(vdir);
    // Everything upstream of the flipped stage is reused as is.
    std::vector<std::string> reuse = {"corpus", "base", "tokens"};
    if (stage2_flip) reuse.push_back("stage1");
    for (const auto& s : reuse) fs::copy(ctx.workdir() / s, vdir / s, fs::copy_options::recursive);
    json m = read_manifest(ctx), kept = {{"entries", json::array()}};
    for (const auto& e : m["entries"])
        if (std::find(reuse.begin(), reuse.end(), e["stage"].get<std::string>()) != reuse.end()) kept["entries"].push_back(e);
    std::ofstream(vdir / "manifest.json") << kept.dump(2) << '\n';
    log(ctx, "ablate: " + name + " sets " + flip.section + "." + flip.key + " = " + flip.value.dump());

    if (stage2_flip) {
        train_stage2(v);
        eval_impl(v, false);
    } else {
        train_stage1(v);
        eval_impl(v, true);
    }
    const std::vector<metrics::Row> variant = read_rows(vdir / "eval" / "report.csv");
    std::vector<metrics::Row> table;
    auto wanted = [&](const metrics::Row& r) {
        return stage2_flip ? r.variant == "unified-stage2" : r.variant == "stage1";
    };
    for (const auto& r : baseline)
        if (wanted(r)) table.push_back({r.metric, r.task, "baseline", r.value});
    for (const auto& r : variant)
        if (wanted(r)) table.push_back({r.metric, r.task, name, r.value});
    metrics::write_csv(vdir / "comparison.csv", table);
    metrics::write_markdown(vdir / "comparison.md", "Ablation " + name + " (" + flip.section + "." + flip.key + ")", table);
    std::ofstream md(vdir / "comparison.md", std::ios::app);
    md << "\n| task | metric | change |\n|---|---|---|\n";
    for (const auto& b : table) {
        if (b.variant != "baseline") continue;
        for (const auto& r : table)
            if (r.variant == name && r.metric == b.metric && r.task == b.task)
                md << "| " << b.task << " | " << b.metric << " | "
                   << (r.value > b.value ? "higher" : r.value < b.value ? "lower" : "equal") << " by "
                   << metrics::format_value(std::fabs(r.value - b.value)) << " |\n";
    }
    log(ctx, "ablate: comparison in " + (vdir / "comparison.md").string());
}

void run_all(const Context& ctx) {
    gen_data(ctx);
    pretrain_base(ctx);
    train_stage1(ctx);
    invert(ctx);
    train_stage2(ctx);
    eval(ctx);
}

}  // namespace omni::harness
