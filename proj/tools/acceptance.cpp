// SPDX-License-Identifier: Apache-2.0
// Checks the ten acceptance criteria and prints one PASS/FAIL line for each.
// Criteria 3-6 use a full default-config pipeline run, 9-10 two smoke runs.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "omni/checkpoint.hpp"
#include "omni/gradcheck.hpp"
#include "omni/harness.hpp"
#include "omni/image_io.hpp"
#include "omni/inversion.hpp"
#include "omni/metrics.hpp"

namespace fs = std::filesystem;
using namespace omni;
using harness::Context;
using harness::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void jitter(ParamStore& ps, const std::string& prefix, std::uint64_t seed, double s = 0.2) {
    Rng r(seed);
    for (auto& p : ps.all())
        if (p.name.rfind(prefix, 0) == 0)
            for (double& v : p.tensor.mutable_values()) v += s * r.normal();
}

stage2::BaseConfig tiny_base_config() {
    stage2::BaseConfig c;
    c.canvas = 32;
    c.ae_width = 8;
    c.widths = {8, 8, 12};
    c.time_dim = 8;
    c.clip_dim = 8;
    return c;
}

void register_tokens(stage2::BaseModel& m) {
    Rng r(5);
    for (const auto& t : scene::kTasks) m.register_task_token(t, r);
}

// ---- 1 ------------------------------------------------------------------

Verdict gradient_integrity() {
    double worst_prim = 0;
    std::size_t probes = 0;
    for (const GradCase& c : primitive_grad_cases())
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(1000 + seed);
            worst_prim = std::max(worst_prim, grad_check(c.f, c.make(rng)));
            ++probes;
        }

    const auto corpus = scene::generate_corpus(3, 2, 1, 32, false);
    // Stage-1 loss path.
    stage1::ModelConfig mc;
    mc.m = 2;
    mc.C = 4;
    mc.c_bb = 8;
    mc.fpn_width = 8;
    mc.stem = 8;
    mc.mlp_hidden = 8;
    stage1::DensePredictor dp(mc, 1);
    jitter(dp.params(), "stage1.backbone", 2, 0.05);
    const Tensor img = stage2::stack({corpus.unique[0].image});
    auto s1_loss = [&] {
        Tensor total;
        for (const auto& task : {"depth", "hed", "scribble"}) {
            const Tensor pred = dp.forward(img, {task});
            const Tensor l = stage1::stage1_loss(pred, stage2::stack({corpus.unique[0].conditions.at(task)}), task);
            total = total.defined() ? add(total, l) : l;
        }
        return total;
    };
    std::vector<Tensor> s1_params;
    for (const char* n : {"stage1.backbone.stem.bias", "stage1.backbone.l3.conv.bias", "stage1.fpn.h0.lat3.kernel",
                          "stage1.fpn.h1.up.bias", "stage1.fpn.h0.fine.kernel", "stage1.task_mlp.fc1.weight",
                          "stage1.task_mlp.fc2.bias"})
        s1_params.push_back(dp.params().tensor(n));
    const double e_s1 = grad_check_inplace(s1_loss, s1_params);

    // Conditioned noise prediction through Z2 (and Z1, the copy and the condition encoder).
    stage2::BaseModel base(tiny_base_config(), 11);
    register_tokens(base);
    jitter(base.params(), "unet.dec.conv_out", 3);
    base.freeze_all();
    stage2::ControlledModel cm(base, {}, 4);
    jitter(cm.params(), "control.z", 6, 0.1);
    Rng r(7);
    const Tensor z = Tensor::randn({2, 4, 8, 8}, r);
    const Tensor eps = Tensor::randn({2, 4, 8, 8}, r);
    const std::vector<int> ts = {120, 640};
    const Tensor maps = stage2::stack({corpus.unique[0].conditions.at("depth"), corpus.unique[1].conditions.at("hed")});
    const std::vector<std::string> caps = {corpus.unique[0].caption, corpus.unique[1].caption}, tasks = {"depth", "hed"};
    stage2::PromptCache prompts(base.text());
    auto eq1 = [&] { return diffusion_loss(eps, cm.predict_noise(add_noise(z, ts, eps, base.schedule()), ts, caps, tasks, maps, prompts)); };
    std::vector<Tensor> z_params;
    for (const char* n : {"control.z2.0.bias", "control.z2.2.kernel", "control.z2.3.bias", "control.z1.kernel", "control.cond1.bias",
                          "control.enc.conv_in.bias", "control.mid.block.o.bias"})
        z_params.push_back(cm.params().tensor(n));
    const double e_eq1 = grad_check_inplace(eq1, z_params);

    // Inversion objective with respect to the token row.
    const int id = base.vocab().id(text::task_token("scribble"));
    const std::string row = base.text().row_name(id);
    base.params().set_frozen(row, false);
    const std::vector<int> ids = text::tokenize(base.vocab(), inversion::inversion_prompt("scribble"));
    Tensor zi;
    {
        NoGradGuard g;
        zi = base.encode_images(stage2::stack({stage2::to_rgb(corpus.unique[0].conditions.at("scribble")),
                                               stage2::to_rgb(corpus.unique[1].conditions.at("scribble"))}));
    }
    const Tensor ei = Tensor::randn(zi.shape(), r);
    auto inv = [&] {
        const text::TextEmbedding c = base.text().encode(std::vector<std::vector<int>>{ids, ids});
        return diffusion_loss(ei, base.predict_noise(add_noise(zi, ts, ei, base.schedule()), ts, c));
    };
    const double e_inv = grad_check_inplace(inv, {base.params().tensor(row)});
    base.params().set_frozen(row, true);

    const double worst = std::max({worst_prim, e_s1, e_eq1, e_inv});
    return {worst < 1e-5, std::to_string(probes) + " primitive probes max " + fmt("%.2e", worst_prim) + "; stage-1 loss " +
                              fmt("%.2e", e_s1) + ", conditioned noise prediction " + fmt("%.2e", e_eq1) + ", inversion objective " +
                              fmt("%.2e", e_inv) + " (limit 1e-5)"};
}

// ---- 2 ------------------------------------------------------------------

Verdict init_transparency() {
    stage2::BaseModel base(stage2::BaseConfig{}, 21);
    register_tokens(base);
    jitter(base.params(), "unet.dec", 22);
    base.freeze_all();
    stage2::ControlledModel cm(base, {}, 23);
    const auto corpus = scene::generate_corpus(24, 20, 5, 64, false);
    Rng r(25);
    int mismatched = 0, probes = 0;
    double max_out = 0;
    stage2::PromptCache prompts(base.text());
    NoGradGuard g;
    for (int batch = 0; batch < 25; ++batch) {
        std::vector<std::string> caps, tasks, frozen;
        std::vector<int> ts;
        std::vector<Tensor> maps;
        for (int i = 0; i < 4; ++i) {
            const auto& s = corpus.unique[r.below(corpus.unique.size())];
            caps.push_back(s.caption);
            tasks.push_back(s.task_mask[r.below(s.task_mask.size())]);
            frozen.push_back(cm.frozen_prompt(caps.back(), tasks.back()));
            ts.push_back(1 + static_cast<int>(r.below(1000)));
            std::vector<double> m(64 * 64);
            for (double& x : m) x = r.uniform();
            maps.push_back(Tensor::from({1, 64, 64}, m));
        }
        const Tensor zt = Tensor::randn({4, 4, 16, 16}, r);
        const Tensor a = cm.predict_noise(zt, ts, caps, tasks, stage2::stack(maps), prompts);
        const Tensor b = base.predict_noise(zt, ts, base.text().encode_prompts(frozen));
        for (int i = 0; i < 4; ++i) {
            bool same = true;
            for (std::size_t k = 0; k < a.numel() / 4; ++k) {
                const std::size_t j = static_cast<std::size_t>(i) * (a.numel() / 4) + k;
                same = same && a.at(j) == b.at(j);
                max_out = std::max(max_out, std::fabs(b.at(j)));
            }
            mismatched += !same;
            ++probes;
        }
    }
    return {mismatched == 0 && max_out > 0,
            std::to_string(probes - mismatched) + "/" + std::to_string(probes) + " probes bitwise equal to the frozen base (max |eps| " +
                fmt("%.3f", max_out) + ")"};
}

// ---- 3-6: default pipeline ---------------------------------------------------

const json* last_entry(const json& manifest, const std::string& stage) {
    const json* e = nullptr;
    for (const auto& x : manifest["entries"])
        if (x["stage"] == stage) e = &x;
    return e;
}

json manifest_of(const Context& ctx) {
    std::ifstream in(ctx.workdir() / "manifest.json");
    return json::parse(in);
}

Verdict frozen_conservation(const Context& ctx) {
    const json m = manifest_of(ctx);
    const json* inv = last_entry(m, "tokens");
    const json* s2 = last_entry(m, "stage2");
    if (!inv || !s2) return {false, "pipeline records missing"};
    const std::string disk = harness::load_base(ctx, false)->frozen_digest();
    const bool ok = (*inv)["frozen_sha256_before"] == disk && (*inv)["frozen_sha256_after"] == disk &&
                    (*s2)["frozen_sha256_before"] == disk && (*s2)["frozen_sha256_after"] == disk && (*s2)["base_unchanged"] == true;
    return {ok, "frozen base SHA-256 " + disk.substr(0, 16) + "... before/after the four inversions " +
                    ((*inv)["frozen_sha256_after"] == disk ? "equal" : "DIFFERENT") + ", before/after stage-2 training " +
                    ((*s2)["frozen_sha256_after"] == disk ? "equal" : "DIFFERENT")};
}

std::vector<double> read_loss_csv(const fs::path& file) {
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);
    std::vector<double> v;
    while (std::getline(in, line)) v.push_back(std::stod(line.substr(line.find(',') + 1)));
    return v;
}

Verdict inversion_isolation(const Context& ctx) {
    const json m = manifest_of(ctx);
    const json* inv = last_entry(m, "tokens");
    if (!inv) return {false, "inversion record missing"};
    bool ok = true;
    std::string detail;
    std::vector<std::vector<double>> vs;
    for (const auto& task : scene::kTasks) {
        const json& changed = (*inv)["changed"][task];
        const bool one = changed.size() == 1 && changed[0] == (*inv)["row"][task];
        const auto loss = read_loss_csv(ctx.workdir() / "tokens" / ("loss_" + task + ".csv"));
        const std::size_t w = std::min<std::size_t>(200, loss.size() / 2);
        double first = 0, last = 0;
        for (std::size_t i = 0; i < w; ++i) {
            first += loss[i] / static_cast<double>(w);
            last += loss[loss.size() - w + i] / static_cast<double>(w);
        }
        const bool dec = w > 0 && last < first;
        ok = ok && one && dec;
        detail += task + ": " + std::to_string(changed.size()) + " row changed, window " + fmt("%.5f", first) + " -> " + fmt("%.5f", last) + "; ";
        vs.push_back(inversion::load_token(ctx.workdir() / "tokens", task));
    }
    double max_cos = -1;
    for (std::size_t a = 0; a < vs.size(); ++a)
        for (std::size_t b = a + 1; b < vs.size(); ++b) {
            double d = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < vs[a].size(); ++k) {
                d += vs[a][k] * vs[b][k];
                na += vs[a][k] * vs[a][k];
                nb += vs[b][k] * vs[b][k];
            }
            max_cos = std::max(max_cos, d / std::sqrt(na * nb));
        }
    return {ok, detail + "max pairwise cosine " + fmt("%.3f", max_cos)};
}

Verdict stage1_learning(const Context& ctx) {
    const auto s = harness::score_stage1(*harness::load_stage1(ctx), harness::holdout_corpus(ctx.config));
    const bool ok = s.rmse < 0.15 && s.ods > 0.70 && s.scribble_accuracy > 0.95 && s.pose_bce < 0.1;
    return {ok, "depth RMSE " + fmt("%.4f", s.rmse) + " (<0.15), edge ODS " + fmt("%.4f", s.ods) + " (>0.70), scribble accuracy " +
                    fmt("%.4f", s.scribble_accuracy) + " (>0.95), pose BCE " + fmt("%.4f", s.pose_bce) + " (<0.1)"};
}

std::map<std::string, double> read_csv_map(const fs::path& file) {
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);
    std::map<std::string, double> out;
    while (std::getline(in, line)) {
        const auto p = line.rfind(',');
        out[line.substr(0, p)] = std::stod(line.substr(p + 1));
    }
    return out;
}

Verdict conditioning_effect(const Context& ctx) {
    const auto c = read_csv_map(ctx.workdir() / "eval" / "conditioning.csv");
    const auto rep = read_csv_map(ctx.workdir() / "eval" / "report.csv");
    const auto hold = harness::holdout_corpus(ctx.config);
    bool ok = ctx.config["eval"]["n_samples"].get<int>() >= 64;
    std::string detail;
    for (const auto& task : scene::kTasks) {
        int n = 0;
        for (const auto& s : hold.unique) n += s.has(task);
        const int used = std::min(n, ctx.config["eval"]["n_samples"].get<int>());
        ok = ok && used >= 64;
        const double fc = c.at("toy-FID," + task + ",conditioned"), fz = c.at("toy-FID," + task + ",zeroed-condition");
        const double cc = c.at("CLIP_t," + task + ",conditioned"), cz = c.at("CLIP_t," + task + ",zeroed-condition");
        ok = ok && fc < fz && cc > cz;
        detail += task + " (" + std::to_string(used) + " prompts) FID " + fmt("%.4f", fc) + " vs " + fmt("%.4f", fz) + ", CLIP_t " +
                  fmt("%.4f", cc) + " vs " + fmt("%.4f", cz) + "; ";
    }
    int ordered = 0;
    for (const auto& task : scene::kTasks)
        ordered += rep.at("toy-FID," + task + ",unified-stage2") <= rep.at("toy-FID," + task + ",unified-stage1+2");
    return {ok, detail + "[non-blocking] unified-stage2 FID <= unified-stage1+2 FID on " + std::to_string(ordered) + "/4 tasks"};
}

// ---- 7 ------------------------------------------------------------------

Verdict zero_extra_parameters() {
    stage2::BaseModel unified(stage2::BaseConfig{}, 31);
    register_tokens(unified);
    unified.freeze_all();
    stage2::ControlledModel a(unified, {}, 32);
    stage2::BaseModel single(stage2::BaseConfig{}, 31);
    single.freeze_all();
    stage2::ControlConfig sc;
    sc.prefix_mode = stage2::PrefixMode::None;
    stage2::ControlledModel b(single, sc, 32);
    const std::size_t ta = stage2::count_parameters(a, true), tb = stage2::count_parameters(b, true);
    const std::size_t fa = stage2::count_parameters(a, false), fb = stage2::count_parameters(b, false);
    const std::size_t want = 4 * static_cast<std::size_t>(text::kDText);
    return {ta == tb && fa - fb == want && fa > fb, "trainable " + std::to_string(ta) + " vs " + std::to_string(tb) + "; total delta " +
                                                        std::to_string(fa - fb) + " (expected " + std::to_string(want) + ")"};
}

// ---- 8 ------------------------------------------------------------------

Tensor rand_binary(Rng& r, double density, int s) {
    std::vector<double> v(static_cast<std::size_t>(s * s));
    for (double& x : v) x = r.uniform() < density ? 1.0 : 0.0;
    return Tensor::from({1, s, s}, std::move(v));
}

Tensor noisy(Rng& r, const Tensor& g, double noise) {
    std::vector<double> v(g.numel());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = std::clamp((1 - noise) * g.at(j) + noise * r.uniform(), 0.0, 1.0);
    return Tensor::from(g.shape(), v);
}

std::array<double, 3> sweep_oracle(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    auto prf = [](long tp, long fp, long fn) {
        const double p = tp + fp == 0 ? (fn == 0 ? 1.0 : 0.0) : double(tp) / double(tp + fp);
        const double r = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
        return std::array<double, 3>{p, r, p + r == 0 ? 0.0 : 2 * p * r / (p + r)};
    };
    double ods = 0, ois = 0, ap = 0;
    std::vector<double> best(preds.size(), 0.0);
    std::vector<std::array<double, 2>> pts;
    for (int k = 1; k <= 99; ++k) {
        const double tau = k / 100.0;
        long TP = 0, FP = 0, FN = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            long tp = 0, fp = 0, fn = 0;
            for (std::size_t j = 0; j < gts[i].numel(); ++j) {
                const bool p = preds[i].at(j) > tau, g = gts[i].at(j) == 1.0;
                tp += p && g;
                fp += p && !g;
                fn += !p && g;
            }
            best[i] = std::max(best[i], prf(tp, fp, fn)[2]);
            TP += tp;
            FP += fp;
            FN += fn;
        }
        const auto m = prf(TP, FP, FN);
        ods = std::max(ods, m[2]);
        pts.push_back({m[1], m[0]});
    }
    for (double b : best) ois += b;
    ois /= static_cast<double>(preds.size());
    std::vector<double> rs;
    for (const auto& p : pts) rs.push_back(p[0]);
    std::sort(rs.begin(), rs.end());
    rs.erase(std::unique(rs.begin(), rs.end()), rs.end());
    auto env = [&](double r) {
        double e = 0;
        for (const auto& p : pts)
            if (p[0] >= r) e = std::max(e, p[1]);
        return e;
    };
    double pr = 0, pe = env(rs.front());
    for (double r : rs) {
        const double e = env(r);
        ap += (r - pr) * (e + pe) / 2;
        pr = r;
        pe = e;
    }
    return {ods, ois, ap};
}

Verdict metric_oracles() {
    Rng r(81);
    double worst_fd = 0;
    for (int i = 0; i < 10; ++i) {
        const double m1 = r.uniform(-3, 3), m2 = r.uniform(-3, 3), s1 = r.uniform(0.1, 3), s2 = r.uniform(0.1, 3);
        metrics::GaussianStats a{Eigen::VectorXd::Constant(1, m1), Eigen::MatrixXd::Constant(1, 1, s1 * s1)};
        metrics::GaussianStats b{Eigen::VectorXd::Constant(1, m2), Eigen::MatrixXd::Constant(1, 1, s2 * s2)};
        worst_fd = std::max(worst_fd, std::fabs(metrics::frechet(a, b) - ((m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2))));
    }
    int exact = 0;
    for (int f = 0; f < 5; ++f) {
        std::vector<Tensor> preds, gts;
        for (int i = 0; i < 3; ++i) {
            gts.push_back(rand_binary(r, 0.15 + 0.1 * i, 8));
            preds.push_back(noisy(r, gts.back(), 0.5));
        }
        const auto o = sweep_oracle(preds, gts);
        exact += metrics::ods(preds, gts).f == o[0] && metrics::ois(preds, gts) == o[1] && metrics::ap(preds, gts) == o[2];
    }
    int held = 0;
    Rng rd(42);
    for (int d = 0; d < 50; ++d) {
        const int n = 2 + static_cast<int>(rd.below(5));
        const double density = rd.uniform(0.05, 0.5), nz = rd.uniform(0.1, 0.9);
        std::vector<Tensor> preds, gts;
        for (int i = 0; i < n; ++i) {
            gts.push_back(rand_binary(rd, density, 12));
            preds.push_back(noisy(rd, gts.back(), nz));
        }
        held += metrics::ods(preds, gts).f <= metrics::ois(preds, gts);
    }
    auto flat = [](double g) { return Tensor::full({3, 4, 4}, g); };
    const bool boundary = scene::derive_scribble(flat(128 / 255.0)).at(0) == 1.0 && scene::derive_scribble(flat(127 / 255.0)).at(0) == 0.0;
    const bool ok = worst_fd < 1e-9 && exact == 5 && held == 50 && boundary;
    return {ok, "1-D Frechet max error " + fmt("%.1e", worst_fd) + " (limit 1e-9); ODS/OIS/AP exact on " + std::to_string(exact) +
                    "/5 fixtures; ODS <= OIS on " + std::to_string(held) + "/50 random datasets; scribble 127/128 boundary " +
                    (boundary ? "exact" : "wrong")};
}

// ---- 9-10: smoke runs ----------------------------------------------------------

Context smoke_context(const fs::path& workdir, int workers) {
    Context c;
    c.config = harness::resolve_config(fs::path(OMNI_SOURCE_DIR) / "configs" / "smoke.json",
                                       {"paths.workdir=\"" + workdir.string() + "\"", "workers=" + std::to_string(workers)}, false);
    c.force = true;
    c.quiet = true;
    return c;
}

struct SmokeRun {
    std::map<std::string, std::string> hashes;
};

SmokeRun run_smoke(const Context& ctx) {
    fs::remove_all(ctx.workdir());
    harness::run_all(ctx);
    const auto hold = harness::holdout_corpus(ctx.config);
    const auto& s = hold.unique.front();
    write_png(ctx.workdir() / "input.png", s.image);
    write_pgm(ctx.workdir() / "condition.pgm", s.conditions.at(s.task_mask.front()));
    harness::SampleArgs a{s.caption, s.task_mask.front(), ctx.workdir() / "input.png", std::nullopt, ctx.workdir() / "grid_integrated.png"};
    harness::sample(ctx, a);
    harness::SampleArgs b{s.caption, s.task_mask.front(), std::nullopt, ctx.workdir() / "condition.pgm", ctx.workdir() / "grid_condition.png"};
    harness::sample(ctx, b);
    SmokeRun out;
    for (const char* st : {"corpus", "base", "stage1", "tokens", "stage2", "eval"}) out.hashes[st] = harness::hash_tree(ctx.workdir() / st);
    for (const char* f : {"grid_integrated.png", "grid_condition.png"}) {
        std::ifstream in(ctx.workdir() / f, std::ios::binary);
        const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        out.hashes[f] = sha256_hex(bytes.data(), bytes.size());
    }
    return out;
}

Verdict determinism(const SmokeRun& a, const SmokeRun& b) {
    std::string diff;
    for (const auto& [k, h] : a.hashes)
        if (b.hashes.at(k) != h) diff += " " + k;
    return {diff.empty(), diff.empty() ? std::to_string(a.hashes.size()) + " artifacts identical across two smoke runs (workers 1 and 2)"
                                       : "differs:" + diff};
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    } else {
        out[prefix] = j.dump();
    }
}

Verdict ablation_harness(const Context& ctx) {
    auto read = [](const fs::path& p) {
        std::ifstream in(p);
        return json::parse(in);
    };
    std::map<std::string, std::string> base_cfg;
    flatten(read(ctx.workdir() / "config.json"), "", base_cfg);
    bool ok = true;
    std::string detail;
    for (const auto& name : harness::kAblations) {
        harness::ablate(ctx, name);
        const fs::path dir = ctx.workdir() / "ablate" / name;
        std::map<std::string, std::string> v;
        flatten(read(dir / "config.json"), "", v);
        std::vector<std::string> changed;
        for (const auto& [k, val] : v)
            if (k != "paths.workdir" && base_cfg.at(k) != val) changed.push_back(k);
        const harness::Flip f = harness::ablation_flip(name);
        std::ifstream md(dir / "comparison.md");
        const std::string text((std::istreambuf_iterator<char>(md)), std::istreambuf_iterator<char>());
        const bool shaped = text.find("| baseline |") != std::string::npos && text.find("| " + name + " |") != std::string::npos;
        const bool one = changed.size() == 1 && changed[0] == f.section + "." + f.key;
        ok = ok && shaped && one;
        detail += name + (one ? " (1 key)" : " (config diff wrong)") + (shaped ? "" : " no table") + "; ";
    }
    return {ok, detail + "directions in each comparison.md"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    fs::path workdir = "acceptance_runs";
    bool reuse = false;
    std::vector<int> only;
    app.add_option("--workdir", workdir, "Where the pipeline runs are kept");
    app.add_flag("--reuse", reuse, "Reuse a complete recorded default run in the workdir");
    app.add_option("--only", only, "Criteria to check (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

    std::map<int, Verdict> verdicts;
    auto run = [&](int c, const std::function<Verdict()>& f) {
        if (!wanted(c)) return;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            verdicts[c] = f();
        } catch (const std::exception& e) {
            verdicts[c] = {false, std::string("error: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "C" << c << ' ' << (verdicts[c].pass ? "PASS" : "FAIL") << "  " << verdicts[c].detail << " [" << fmt("%.0f", s)
                  << " s]" << std::endl;
    };

    run(1, gradient_integrity);
    run(2, init_transparency);
    if (wanted(3) || wanted(4) || wanted(5) || wanted(6)) {
        Context ctx;
        ctx.config = harness::resolve_config(std::nullopt, {"paths.workdir=\"" + (workdir / "default").string() + "\""}, false);
        ctx.force = true;
        bool complete = false;
        if (reuse) {
            try {
                harness::load_stage1(ctx);
                harness::load_base(ctx, true);
                std::ifstream cfg(ctx.workdir() / "config.json");
                complete = fs::exists(ctx.workdir() / "eval" / "conditioning.csv") && json::parse(cfg) == ctx.config;
                const json m = manifest_of(ctx);
                for (const char* st : {"corpus", "base", "stage1", "tokens", "stage2", "eval"}) {
                    const json* e = last_entry(m, st);
                    complete = complete && e && (*e)["outputs"][st] == harness::hash_tree(ctx.workdir() / st);
                }
            } catch (const std::exception&) {
            }
        }
        std::string failure;
        if (!complete) {
            std::cout << "running the default pipeline in " << ctx.workdir() << std::endl;
            try {
                harness::run_all(ctx);
            } catch (const std::exception& e) {
                failure = e.what();
            }
        }
        auto guarded = [&](int c, std::function<Verdict(const Context&)> f) {
            run(c, [&] { return failure.empty() ? f(ctx) : Verdict{false, "pipeline failed: " + failure}; });
        };
        guarded(3, frozen_conservation);
        guarded(4, inversion_isolation);
        guarded(5, stage1_learning);
        guarded(6, conditioning_effect);
    }
    run(7, zero_extra_parameters);
    run(8, metric_oracles);
    if (wanted(9) || wanted(10)) {
        const Context a = smoke_context(workdir / "smoke_a", 1), b = smoke_context(workdir / "smoke_b", 2);
        std::optional<SmokeRun> ra, rb;
        std::string failure;
        try {
            ra = run_smoke(a);
            rb = run_smoke(b);
        } catch (const std::exception& e) {
            failure = e.what();
        }
        run(9, [&] { return failure.empty() ? determinism(*ra, *rb) : Verdict{false, "smoke run failed: " + failure}; });
        run(10, [&] { return ra ? ablation_harness(a) : Verdict{false, "smoke run failed: " + failure}; });
    }
    int failed = 0;
    for (const auto& [c, v] : verdicts) failed += !v.pass;
    std::cout << verdicts.size() - static_cast<std::size_t>(failed) << "/" << verdicts.size() << " criteria pass" << std::endl;
    return failed == 0 ? 0 : 1;
}
