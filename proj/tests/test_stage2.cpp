// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "omni/checkpoint.hpp"
#include "omni/gradcheck.hpp"
#include "omni/optim.hpp"
#include "omni/stage2.hpp"

using namespace omni;
using namespace omni::stage2;

namespace {

BaseConfig tiny() {
    BaseConfig c;
    c.canvas = 32;
    c.ae_width = 8;
    c.widths = {8, 8, 12};
    c.time_dim = 8;
    c.clip_dim = 8;
    return c;
}

bool equal_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (!(a.at(i) == b.at(i))) return false;
    return true;
}

void register_all(BaseModel& m) {
    Rng r(5);
    for (const auto& t : scene::kTasks) m.register_task_token(t, r);
}

// Gives the zero-initialized weights of a base some spread so outputs are not trivially zero.
void jitter(ParamStore& ps, const std::string& prefix, std::uint64_t seed, double s = 0.2) {
    Rng r(seed);
    for (auto& p : ps.all())
        if (p.name.rfind(prefix, 0) == 0)
            for (double& v : p.tensor.mutable_values()) v += s * r.normal();
}

text::TextEmbedding encode(const BaseModel& m, const std::vector<std::string>& prompts) {
    NoGradGuard g;
    return m.text().encode_prompts(prompts);
}

}  // namespace

TEST_CASE("schedule tables") {
    const NoiseSchedule s;
    CHECK(s.T() == 1000);
    CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta(1000) == doctest::Approx(2e-2).epsilon(1e-12));
    CHECK(s.alpha_bar(1) > 0.999);
    CHECK(s.alpha_bar(1000) < 0.01);
    for (int t = 1; t <= s.T(); ++t) {
        CHECK(s.alpha_bar(t) > 0.0);
        CHECK(s.alpha_bar(t) < 1.0);
        CHECK(s.sqrt_one_minus_alpha_bar(t) > 0.0);
        CHECK(s.sqrt_one_minus_alpha_bar(t) < 1.0);
        if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK_THROWS_AS(s.alpha_bar(1001), ContractError);
}

TEST_CASE("add_noise endpoints and errors") {
    const NoiseSchedule s;
    Rng r(1);
    const Tensor z = Tensor::randn({2, 4, 4, 4}, r);
    const Tensor eps = Tensor::randn({2, 4, 4, 4}, r);
    // At t=1 the noise coefficient is exactly 1e-2, so the deviation is 1e-2 per unit of noise.
    const Tensor z1 = add_noise(z, 1, eps, s);
    for (std::size_t i = 0; i < z.numel(); ++i)
        CHECK(std::fabs(z1.at(i) - z.at(i)) < 1e-2 * std::max(1.0, std::fabs(eps.at(i))) + 1e-4 * std::fabs(z.at(i)));

    const Tensor zero = Tensor::zeros(z.shape());
    for (int t : {1, 250, 999, 1000}) {
        const Tensor zt = add_noise(z, t, zero, s);
        for (std::size_t i = 0; i < z.numel(); ++i) CHECK(zt.at(i) == s.sqrt_alpha_bar(t) * z.at(i));
    }

    for (int draw = 0; draw < 10; ++draw) {
        Rng rd(100 + draw);
        const Tensor zz = Tensor::randn({1, 4, 16, 16}, rd);
        const Tensor e = Tensor::randn({1, 4, 16, 16}, rd);
        const Tensor zt = add_noise(zz, 1000, e, s);
        double mx = 0, me = 0;
        const double n = static_cast<double>(zt.numel());
        for (std::size_t i = 0; i < zt.numel(); ++i) {
            mx += zt.at(i) / n;
            me += e.at(i) / n;
        }
        double sxy = 0, sxx = 0, syy = 0;
        for (std::size_t i = 0; i < zt.numel(); ++i) {
            sxy += (zt.at(i) - mx) * (e.at(i) - me);
            sxx += (zt.at(i) - mx) * (zt.at(i) - mx);
            syy += (e.at(i) - me) * (e.at(i) - me);
        }
        CHECK(sxy / std::sqrt(sxx * syy) > 0.99);
    }

    CHECK_THROWS_AS(add_noise(z, 0, eps, s), ContractError);
    CHECK_THROWS_AS(add_noise(z, 1001, eps, s), ContractError);
    CHECK_THROWS_AS(add_noise(z, 5, Tensor::zeros({2, 4, 4, 3}), s), ShapeError);

    // Per-item timesteps agree with the scalar form.
    const Tensor per = add_noise(z, std::vector<int>{10, 700}, eps, s);
    const Tensor a = add_noise(slice(z, 0, 0, 1), 10, slice(eps, 0, 0, 1), s);
    const Tensor b = add_noise(slice(z, 0, 1, 1), 700, slice(eps, 0, 1, 1), s);
    CHECK(equal_values(per, concat({a, b}, 0)));
}

TEST_CASE("diffusion loss values and gradient") {
    Rng r(2);
    const Tensor e = Tensor::randn({2, 3, 2, 2}, r);
    CHECK(diffusion_loss(e, e).item() == 0.0);
    CHECK(diffusion_loss(e, add_scalar(e, -1.0)).item() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK_THROWS_AS(diffusion_loss(e, Tensor::zeros({2, 3, 2, 1})), ShapeError);

    const Tensor p = Tensor::randn(e.shape(), r, 1.0, true);
    const Tensor loss = diffusion_loss(e, p);
    Tape::current().backward(loss);
    const double n = static_cast<double>(e.numel());
    for (std::size_t i = 0; i < e.numel(); ++i) CHECK(p.grad()[i] == doctest::Approx(2 * (p.at(i) - e.at(i)) / n).epsilon(1e-12));
    Tape::current().clear();
    CHECK(grad_check([&](const std::vector<Tensor>& in) { return diffusion_loss(e, in[0]); }, {p}) < 1e-5);
    CHECK(diffusion_loss(e, p).item() > 0.0);
}

TEST_CASE("ddim timesteps and single-step reconstruction") {
    const NoiseSchedule s;
    const auto ts = s.ddim_timesteps(kDefaultDdimSteps);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 20);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i - 1] - ts[i] == 20);
    CHECK(s.ddim_timesteps(1000).back() == 1);
    CHECK_THROWS_AS(s.ddim_timesteps(1001), ContractError);
    CHECK_THROWS_AS(s.ddim_timesteps(0), ContractError);

    Rng r(3);
    const Tensor z = Tensor::randn({1, 4, 8, 8}, r);
    const Tensor eps = Tensor::randn({1, 4, 8, 8}, r);
    for (int t : {1, 20, 500, 1000}) {
        const Tensor zt = add_noise(z, t, eps, s);
        const auto back = ddim_step({zt.values().begin(), zt.values().end()}, {eps.values().begin(), eps.values().end()}, t, 0, s);
        double worst = 0;
        for (std::size_t i = 0; i < z.numel(); ++i) worst = std::max(worst, std::fabs(back[i] - z.at(i)));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("zero-initialized control is transparent over 100 probes") {
    BaseModel base(tiny(), 7);
    register_all(base);
    jitter(base.params(), "unet.dec.conv_out", 8);
    const ControlledModel ctl(base, {}, 9);
    for (const auto& p : ctl.params().all())
        if (p.name.rfind("control.z", 0) == 0)
            for (double v : p.tensor.values()) CHECK(v == 0.0);
    for (const auto& p : ctl.params().all())
        if (p.name.rfind("control.enc.", 0) == 0 || p.name.rfind("control.mid.", 0) == 0) {
            const std::string src = "unet." + p.name.substr(8);
            CHECK(equal_values(p.tensor, base.params().tensor(src)));
        }

    Rng r(10);
    const std::vector<std::string> captions = {"a red circle on a blue background", "a stick figure walking on a gray background",
                                               "a green triangle and a yellow rectangle on a black background"};
    int checked = 0;
    NoGradGuard g;
    for (int probe = 0; probe < 100; ++probe) {
        const int B = 1 + probe % 2;
        const Tensor z = Tensor::randn({B, 4, 8, 8}, r);
        std::vector<int> t;
        std::vector<std::string> caps, tasks;
        for (int b = 0; b < B; ++b) {
            t.push_back(1 + static_cast<int>(r.below(1000)));
            caps.push_back(captions[r.below(captions.size())]);
            tasks.push_back(scene::kTasks[r.below(4)]);
        }
        const Tensor cf = Tensor::randn({B, 1, 32, 32}, r);
        const Tensor cf2 = Tensor::randn({B, 1, 32, 32}, r);
        PromptCache pc(base.text());
        const Tensor want = base.predict_noise(z, t, pc.batch(caps));
        const Tensor got = ctl.predict_noise(z, t, caps, tasks, cf, pc);
        const Tensor got2 = ctl.predict_noise(z, t, caps, tasks, cf2, pc);
        CHECK(equal_values(want, got));
        CHECK(equal_values(got, got2));
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("a nonzero Z2 weight changes the output and its gradient checks") {
    BaseModel base(tiny(), 11);
    register_all(base);
    jitter(base.params(), "unet.dec.conv_out", 12);
    ControlledModel ctl(base, {}, 13);
    Tensor w = ctl.params().tensor("control.z2.0.kernel");
    w.mutable_values()[3] = 1e-3;
    Rng r(14);
    const Tensor z = Tensor::randn({2, 4, 8, 8}, r);
    const Tensor cf = Tensor::randn({2, 1, 32, 32}, r);
    const Tensor target = Tensor::randn({2, 4, 8, 8}, r);
    const std::vector<int> t = {100, 800};
    const std::vector<std::string> caps = {"a red circle on a blue background", "a cyan triangle on a white background"};
    const std::vector<std::string> tasks = {"depth", "hed"};
    PromptCache pc(base.text());
    {
        NoGradGuard g;
        CHECK_FALSE(equal_values(base.predict_noise(z, t, pc.batch(caps)), ctl.predict_noise(z, t, caps, tasks, cf, pc)));
    }
    const auto f = [&] { return diffusion_loss(target, ctl.predict_noise(z, t, caps, tasks, cf, pc)); };
    CHECK(grad_check_inplace(f, {w, ctl.params().tensor("control.z2.0.bias")}) < 1e-5);
}

TEST_CASE("controlled model requires condition maps") {
    BaseModel base(tiny(), 15);
    register_all(base);
    const ControlledModel ctl(base, {}, 16);
    const Tensor z = Tensor::zeros({1, 4, 8, 8});
    const auto c = encode(base, {"a red circle on a blue background"});
    CHECK_THROWS_AS(ctl.predict_noise(z, {5}, c, Tensor(), c, {"depth"}), ContractError);
    CHECK_THROWS_AS(ctl.predict_noise(z, {5}, c, Tensor::zeros({1, 1, 16, 16}), c, {"depth"}), ShapeError);
}

TEST_CASE("pretraining lowers the loss, freezes everything, and is reproducible") {
    const auto corpus = scene::generate_corpus(21, 12, 4, 32);
    BaseTrainConfig cfg;
    cfg.ae_steps = 60;
    cfg.clip_steps = 20;
    cfg.steps = 600;
    cfg.clip_batch = 4;
    cfg.batch = 4;
    cfg.seed = 3;
    BaseModel a(tiny(), 1), b(tiny(), 1);
    const auto ra = pretrain_base(a, corpus, cfg);
    const auto rb = pretrain_base(b, corpus, cfg);
    REQUIRE(ra.losses.size() == 600);
    REQUIRE(ra.ae_losses.size() == 60);
    double first = 0, last = 0;
    for (int i = 0; i < 100; ++i) {
        first += ra.losses[static_cast<std::size_t>(i)] / 100;
        last += ra.losses[ra.losses.size() - 100 + static_cast<std::size_t>(i)] / 100;
    }
    CHECK(last < 0.9 * first);
    CHECK(a.params().count_scalars(true) == 0);
    CHECK(params_digest(a.params(), false) == params_digest(b.params(), false));
    CHECK(ra.losses == rb.losses);
    CHECK(a.latent_scale() > 0.0);

    // An optimizer step after freezing touches nothing.
    const std::string before = params_digest(a.params(), false);
    a.params().zero_grad();
    AdamW opt;
    opt.step(a.params(), 1.0);
    Sgd sgd;
    sgd.step(a.params(), 1.0);
    CHECK(params_digest(a.params(), false) == before);

    const auto dir = std::filesystem::temp_directory_path() / "omni_test_base";
    std::filesystem::remove_all(dir);
    register_all(a);
    a.save(dir);
    const auto back = BaseModel::load(dir);
    CHECK(params_digest(back->params(), false) == params_digest(a.params(), false));
    CHECK(back->vocab().size() == a.vocab().size());
    CHECK(back->task_rows().size() == 4);
    CHECK(back->params().count_scalars(true) == 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("stage-2 training leaves frozen weights alone and sampling contracts hold") {
    const auto corpus = scene::generate_corpus(31, 6, 2, 32);
    BaseModel base(tiny(), 2);
    register_all(base);
    jitter(base.params(), "unet.dec.conv_out", 17);
    base.freeze_all();
    ControlledModel ctl(base, {}, 3);
    const Stage2Data data = stage2_data(corpus);
    CHECK(data.examples.size() == 6 * 3 + 2);

    std::vector<SampleRequest> req;
    for (int i = 0; i < 3; ++i)
        req.push_back({data.captions[static_cast<std::size_t>(i)], "depth", corpus.unique[static_cast<std::size_t>(i)].conditions.at("depth"),
                       static_cast<std::uint64_t>(i)});
    // Zero steps: identical to sampling the base alone.
    const auto s_ctl = ddim_sample(ctl, req, 10, 4);
    const auto s_base = ddim_sample(base, req, 10, 4);
    for (std::size_t i = 0; i < req.size(); ++i) CHECK(equal_values(s_ctl[i], s_base[i]));

    const std::string frozen = base.frozen_digest();
    const std::string all_base = params_digest(base.params(), false);
    const std::string control0 = params_digest(ctl.params(), false);
    Stage2TrainConfig cfg;
    cfg.steps = 6;
    cfg.batch = 3;
    const auto res = train_stage2(ctl, data, cfg);
    CHECK(res.losses.size() == 6);
    CHECK(base.frozen_digest() == frozen);
    CHECK(params_digest(base.params(), false) == all_base);
    CHECK(params_digest(ctl.params(), false) != control0);

    // Determinism, batch invariance, and a halved step count.
    const auto s1 = ddim_sample(ctl, req, 10, 4, 3);
    const auto s2 = ddim_sample(ctl, req, 10, 4, 1);
    const auto s3 = ddim_sample(ctl, req, 5, 4, 2);
    const auto s4 = ddim_sample(ctl, req, 5, 4, 2);
    for (std::size_t i = 0; i < req.size(); ++i) {
        CHECK(equal_values(s1[i], s2[i]));
        CHECK(equal_values(s3[i], s4[i]));
        CHECK_FALSE(equal_values(s1[i], s3[i]));
        CHECK(s1[i].shape() == Shape{3, 32, 32});
        for (double v : s1[i].values()) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK_THROWS_AS(ddim_sample(ctl, req, 1001, 4), ContractError);

    // Same seed, same losses.
    ControlledModel again(base, {}, 3);
    CHECK(train_stage2(again, data, cfg).losses == res.losses);
    CHECK(params_digest(again.params(), false) == params_digest(ctl.params(), false));

    const auto dir = std::filesystem::temp_directory_path() / "omni_test_control";
    std::filesystem::remove_all(dir);
    ctl.save(dir);
    const auto back = ControlledModel::load(base, dir);
    CHECK(params_digest(back->params(), false) == params_digest(ctl.params(), false));
    std::filesystem::remove_all(dir);
}

TEST_CASE("unregistered task tokens are rejected") {
    const auto corpus = scene::generate_corpus(32, 2, 0, 32);
    BaseModel base(tiny(), 4);
    ControlledModel none(base, {PrefixMode::None}, 1);
    Stage2Data data = stage2_data(corpus);
    data.captions[0] = "a red circle <depth> on a blue background";
    Stage2TrainConfig cfg;
    cfg.steps = 1;
    CHECK_THROWS_AS(train_stage2(none, data, cfg), ContractError);
    ControlledModel prefixed(base, {}, 1);
    CHECK_THROWS_AS(train_stage2(prefixed, stage2_data(corpus), cfg), ContractError);
    CHECK_THROWS_AS(parse_prefix_mode("all"), ContractError);
    CHECK_THROWS_AS(parse_zeroconv_mode("mlp"), ContractError);
    CHECK(parse_prefix_mode(prefix_mode_name(PrefixMode::Both)) == PrefixMode::Both);
}

TEST_CASE("parameter counts: integrated model adds only vocabulary rows") {
    BaseModel integrated(tiny(), 5), single(tiny(), 5);
    const std::size_t before = integrated.params().count_scalars(false);
    Rng r(1);
    integrated.register_task_token("depth", r);
    CHECK(integrated.params().count_scalars(false) - before == static_cast<std::size_t>(text::kDText));
    for (const auto& t : scene::kTasks) integrated.register_task_token(t, r);
    integrated.freeze_all();
    single.freeze_all();
    const ControlledModel a(integrated, {}, 1);
    const ControlledModel b(single, {PrefixMode::None}, 1);
    CHECK(count_parameters(a, true) == count_parameters(b, true));
    CHECK(count_parameters(a, false) - count_parameters(b, false) == 4u * text::kDText);
    for (const ControlledModel* m : {&a, &b}) {
        const std::size_t frozen = count_parameters(*m, false) - count_parameters(*m, true);
        std::size_t frozen_direct = 0;
        for (const auto& p : m->base().params().all()) frozen_direct += p.frozen ? p.tensor.numel() : 0;
        for (const auto& p : m->params().all()) frozen_direct += p.frozen ? p.tensor.numel() : 0;
        CHECK(frozen == frozen_direct);
        CHECK(count_parameters(*m, true) == m->params().count_scalars(false));
    }
}

TEST_CASE("MLP-generated Z1: transparent at init, length checked, gradients reach MLP and embedding") {
    const auto corpus = scene::generate_corpus(41, 6, 2, 32);
    BaseModel base(tiny(), 6);
    register_all(base);
    jitter(base.params(), "unet.dec.conv_out", 18);
    base.freeze_all();
    ControlConfig cc;
    cc.zeroconv_mode = ZeroConvMode::MlpFromEmbedding;
    ControlledModel ctl(base, cc, 7);
    for (double v : ctl.params().tensor("control.mlp2.weight").values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(ctl.z1_weights(Tensor::zeros({1, text::kDText + 1})), ContractError);

    Rng r(19);
    const Tensor z = Tensor::randn({2, 4, 8, 8}, r);
    const Tensor cf = Tensor::randn({2, 1, 32, 32}, r);
    const std::vector<int> t = {10, 600};
    const std::vector<std::string> caps = {"a red circle on a blue background", "a stick figure jumping on a white background"};
    const std::vector<std::string> tasks = {"depth", "animal_pose"};
    PromptCache pc(base.text());
    {
        NoGradGuard g;
        const Tensor w = ctl.z1_weights(concat({base.text().row(base.vocab().id(text::task_token("depth"))).reshape({1, text::kDText}),
                                                base.text().row(base.vocab().id(text::task_token("hed"))).reshape({1, text::kDText})},
                                               0));
        for (double v : w.values()) CHECK(v == 0.0);
        CHECK(equal_values(base.predict_noise(z, t, pc.batch(caps)), ctl.predict_noise(z, t, caps, tasks, cf, pc)));
    }

    Stage2TrainConfig cfg;
    cfg.steps = 2;
    cfg.batch = 4;
    train_stage2(ctl, stage2_data(corpus), cfg);

    const std::string row = base.text().row_name(base.vocab().id(text::task_token("depth")));
    base.params().set_frozen(row, false);
    ctl.params().zero_grad();
    base.params().zero_grad();
    const Tensor target = Tensor::randn(z.shape(), r);
    const Tensor loss = diffusion_loss(target, ctl.predict_noise(z, t, caps, tasks, cf, pc));
    Tape::current().backward(loss);
    double g_mlp = 0, g_row = 0;
    for (double g : ctl.params().tensor("control.mlp1.weight").grad()) g_mlp += std::fabs(g);
    for (double g : base.params().tensor(row).grad()) g_row += std::fabs(g);
    Tape::current().clear();
    base.params().set_frozen(row, true);
    CHECK(g_mlp > 0.0);
    CHECK(g_row > 0.0);

    NoGradGuard g;
    const Tensor e = concat({base.text().row(base.vocab().id(text::task_token("depth"))).reshape({1, text::kDText}),
                             base.text().row(base.vocab().id(text::task_token("hed"))).reshape({1, text::kDText})},
                            0);
    const Tensor w = ctl.z1_weights(e);
    const int n = w.dim(1);
    double d2 = 0;
    for (int i = 0; i < n; ++i) d2 += std::pow(w.at(static_cast<std::size_t>(i)) - w.at(static_cast<std::size_t>(n + i)), 2);
    CHECK(d2 > 0.0);
}
