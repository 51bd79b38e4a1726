// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "omni/denoiser.hpp"
#include "omni/metrics.hpp"

using namespace omni;
using namespace omni::metrics;

namespace {

Tensor rand_map(Rng& r, int s = 8) {
    std::vector<double> v(static_cast<std::size_t>(s * s));
    for (double& x : v) x = r.uniform();
    return Tensor::from({1, s, s}, std::move(v));
}

Tensor rand_binary(Rng& r, double density, int s = 8) {
    std::vector<double> v(static_cast<std::size_t>(s * s));
    for (double& x : v) x = r.uniform() < density ? 1.0 : 0.0;
    return Tensor::from({1, s, s}, std::move(v));
}

// Independent sweep used as the oracle for ods/ois/ap.
struct Oracle {
    double ods = 0, ois = 0, ap = 0;
};

Oracle brute_force(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    auto prf = [](long tp, long fp, long fn) {
        const double p = tp + fp == 0 ? (fn == 0 ? 1.0 : 0.0) : double(tp) / double(tp + fp);
        const double r = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
        const double f = p + r == 0 ? 0.0 : 2 * p * r / (p + r);
        return std::array<double, 3>{p, r, f};
    };
    Oracle o;
    std::vector<double> best_img(preds.size(), 0.0);
    std::vector<std::array<double, 2>> pts;  // (recall, precision)
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
            best_img[i] = std::max(best_img[i], prf(tp, fp, fn)[2]);
            TP += tp;
            FP += fp;
            FN += fn;
        }
        const auto m = prf(TP, FP, FN);
        o.ods = std::max(o.ods, m[2]);
        pts.push_back({m[1], m[0]});
    }
    for (double b : best_img) o.ois += b;
    o.ois /= static_cast<double>(preds.size());
    std::vector<double> recalls;
    for (const auto& p : pts) recalls.push_back(p[0]);
    std::sort(recalls.begin(), recalls.end());
    recalls.erase(std::unique(recalls.begin(), recalls.end()), recalls.end());
    auto env = [&](double r) {
        double e = 0;
        for (const auto& p : pts)
            if (p[0] >= r) e = std::max(e, p[1]);
        return e;
    };
    double prev_r = 0, prev_e = env(recalls.front());
    for (double r : recalls) {
        const double e = env(r);
        o.ap += (r - prev_r) * (e + prev_e) / 2;
        prev_r = r;
        prev_e = e;
    }
    return o;
}

}  // namespace

TEST_CASE("rmse examples, oracle and triangle inequality") {
    Rng r(1);
    const Tensor a = rand_map(r);
    CHECK(rmse(a, a) == 0.0);
    CHECK(rmse(add_scalar(a, 0.5), a) == doctest::Approx(0.5).epsilon(1e-12));
    const Tensor b = rand_map(r);
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
    const double mean_sq = s / static_cast<double>(a.numel());
    CHECK(std::fabs(rmse(a, b) - std::sqrt(mean_sq)) < 1e-12);
    CHECK_THROWS_AS(rmse(a, Tensor::zeros({1, 8, 7})), ShapeError);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = rand_map(r), y = rand_map(r), z = rand_map(r);
        CHECK(rmse(x, z) <= rmse(x, y) + rmse(y, z) + 1e-15);
    }
    CHECK(rmse(a, b) == rmse(a, b));
}

TEST_CASE("pr_at_threshold examples") {
    Rng r(2);
    const Tensor g = rand_binary(r, 0.3);
    for (double tau : {0.01, 0.5, 0.99}) {
        const PRPoint p = pr_at_threshold(g, g, tau);
        CHECK(p.precision == 1.0);
        CHECK(p.recall == 1.0);
        CHECK(p.f == 1.0);
    }
    const PRPoint z = pr_at_threshold(Tensor::zeros(g.shape()), g, 0.5);
    CHECK(z.recall == 0.0);
    CHECK(z.f == 0.0);

    // 4x4 checkerboard truth against a left-half prediction: 4 TP, 4 FP, 4 FN.
    std::vector<double> cb(16), left(16);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            cb[static_cast<std::size_t>(y * 4 + x)] = (x + y) % 2 == 0 ? 1.0 : 0.0;
            left[static_cast<std::size_t>(y * 4 + x)] = x < 2 ? 0.8 : 0.1;
        }
    const Tensor gt = Tensor::from({1, 4, 4}, cb), pred = Tensor::from({1, 4, 4}, left);
    const Counts c = confusion(pred, gt, 0.5);
    CHECK(c.tp == 4);
    CHECK(c.fp == 4);
    CHECK(c.fn == 4);
    const PRPoint p = pr_at_threshold(pred, gt, 0.5);
    CHECK(p.precision == 0.5);
    CHECK(p.recall == 0.5);
    CHECK(p.f == 0.5);
    // Strictly greater than tau counts as an edge.
    CHECK(confusion(pred, gt, 0.8).tp == 0);

    std::vector<double> bad(cb);
    bad[3] = 0.5;
    CHECK_THROWS_AS(confusion(pred, Tensor::from({1, 4, 4}, bad), 0.5), DomainError);
    CHECK_THROWS_AS(confusion(pred, Tensor::zeros({1, 4, 3}), 0.5), ShapeError);
}

TEST_CASE("threshold grid") {
    const auto& g = threshold_grid();
    REQUIRE(g.size() == 99);
    CHECK(g.front() == 0.01);
    CHECK(g.back() == 0.99);
}

TEST_CASE("perfect edge predictions score 1") {
    Rng r(3);
    std::vector<Tensor> gts;
    for (int i = 0; i < 4; ++i) gts.push_back(rand_binary(r, 0.2));
    CHECK(ods(gts, gts).f == 1.0);
    CHECK(ois(gts, gts) == 1.0);
    CHECK(ap(gts, gts) == 1.0);
    CHECK_THROWS_AS(ods({}, {}), ContractError);
    CHECK_THROWS_AS(ois(gts, {gts[0]}), ContractError);
}

TEST_CASE("ods, ois and ap match a brute-force sweep on 3-image fixtures") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng r(10 + seed);
        std::vector<Tensor> preds, gts;
        for (int i = 0; i < 3; ++i) {
            gts.push_back(rand_binary(r, 0.15 + 0.1 * i));
            std::vector<double> v(gts.back().numel());
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = std::clamp(0.6 * gts.back().at(j) + 0.5 * r.uniform(), 0.0, 1.0);
            preds.push_back(Tensor::from(gts.back().shape(), v));
        }
        const Oracle o = brute_force(preds, gts);
        CHECK(ods(preds, gts).f == o.ods);
        CHECK(ois(preds, gts) == o.ois);
        CHECK(ap(preds, gts) == o.ap);
    }
}

// Known to fail: with TP/FP/FN pooled before F, ODS is not bounded by OIS.
// Images here are drawn iid within a dataset and the inequality still breaks
// on a few of the 50 datasets by about 3e-3. Kept as a live check so a change
// in either metric shows up as this case starting to pass.
TEST_CASE("ODS <= OIS over 50 random datasets" * doctest::should_fail()) {
    Rng r(42);
    for (int d = 0; d < 50; ++d) {
        const int n = 2 + static_cast<int>(r.below(5));
        const double density = r.uniform(0.05, 0.5), noise = r.uniform(0.1, 0.9);
        std::vector<Tensor> preds, gts;
        for (int i = 0; i < n; ++i) {
            gts.push_back(rand_binary(r, density, 12));
            std::vector<double> v(gts.back().numel());
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = std::clamp((1 - noise) * gts.back().at(j) + noise * r.uniform(), 0.0, 1.0);
            preds.push_back(Tensor::from(gts.back().shape(), v));
        }
        CHECK(ods(preds, gts).f <= ois(preds, gts));
    }
}

TEST_CASE("mean per-image F at the ODS threshold never exceeds OIS") {
    Rng r(43);
    for (int d = 0; d < 50; ++d) {
        const int n = 2 + static_cast<int>(r.below(5));
        std::vector<Tensor> preds, gts;
        for (int i = 0; i < n; ++i) {
            gts.push_back(rand_binary(r, r.uniform(0.05, 0.5), 12));
            const double noise = r.uniform(0.1, 0.9);
            std::vector<double> v(gts.back().numel());
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = std::clamp((1 - noise) * gts.back().at(j) + noise * r.uniform(), 0.0, 1.0);
            preds.push_back(Tensor::from(gts.back().shape(), v));
        }
        const double tau = ods(preds, gts).threshold;
        double mean_f = 0;
        for (int i = 0; i < n; ++i) mean_f += pr_at_threshold(preds[static_cast<std::size_t>(i)], gts[static_cast<std::size_t>(i)], tau).f;
        CHECK(mean_f / n <= ois(preds, gts) + 1e-15);
    }
}

TEST_CASE("pooled ODS can exceed OIS when edge counts are very unequal") {
    // One image with many perfectly found edges, one whose single edge is never found.
    std::vector<double> ga(64, 0.0), gb(64, 0.0);
    for (int i = 0; i < 40; ++i) ga[static_cast<std::size_t>(i)] = 1.0;
    gb[0] = 1.0;
    const Tensor a = Tensor::from({1, 8, 8}, ga), b = Tensor::from({1, 8, 8}, gb);
    const std::vector<Tensor> gts = {a, b}, preds = {a, Tensor::zeros({1, 8, 8})};
    CHECK(ois(preds, gts) == 0.5);
    CHECK(ods(preds, gts).f > 0.98);
}

TEST_CASE("frechet: closed forms, symmetry and errors") {
    auto g1 = [](double mu, double var) {
        GaussianStats s;
        s.mu = Eigen::VectorXd::Constant(1, mu);
        s.sigma = Eigen::MatrixXd::Constant(1, 1, var);
        return s;
    };
    CHECK(frechet(g1(0, 1), g1(0, 1)) == 0.0);
    CHECK(frechet(g1(0, 1), g1(1, 1)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(frechet(g1(0, 1), g1(0, 4)) == doctest::Approx(1.0).epsilon(1e-12));
    Rng r(5);
    for (int i = 0; i < 10; ++i) {
        const double m1 = r.uniform(-3, 3), m2 = r.uniform(-3, 3), s1 = r.uniform(0.1, 3), s2 = r.uniform(0.1, 3);
        const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        CHECK(std::fabs(frechet(g1(m1, s1 * s1), g1(m2, s2 * s2)) - want) < 1e-9);
    }

    auto random_stats = [&](int d) {
        Eigen::MatrixXd f(3 * d, d);
        for (Eigen::Index i = 0; i < f.rows(); ++i)
            for (Eigen::Index j = 0; j < f.cols(); ++j) f(i, j) = r.normal() + 0.3 * static_cast<double>(j);
        return stats_from_features(f);
    };
    for (int trial = 0; trial < 5; ++trial) {
        const GaussianStats a = random_stats(6), b = random_stats(6);
        const double ab = frechet(a, b), ba = frechet(b, a);
        CHECK(ab >= 0.0);
        CHECK(std::fabs(ab - ba) < 1e-9);
        CHECK(frechet(a, a) < 1e-9);
        CHECK(ab > 1e-6);
    }
    const GaussianStats a = random_stats(3), b = random_stats(4);
    CHECK_THROWS_AS(frechet(a, b), ShapeError);
    GaussianStats skew = a;
    skew.sigma(0, 1) += 0.5;
    CHECK_THROWS_AS(frechet(skew, a), DomainError);
    GaussianStats neg = a;
    neg.sigma = -Eigen::MatrixXd::Identity(3, 3);
    CHECK_THROWS_AS(frechet(neg, a), DomainError);
}

TEST_CASE("feature_stats: regularizer, order invariance and a two-pass oracle") {
    // Features: per-channel means and the top-left pixel of each channel.
    const Extractor ex = [](const Tensor& images) {
        const int B = images.dim(0), S = images.dim(2);
        std::vector<double> f;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < 3; ++c) {
                double m = 0;
                for (int i = 0; i < S * S; ++i) m += images.at(static_cast<std::size_t>((b * 3 + c) * S * S + i));
                f.push_back(m / (S * S));
                f.push_back(images.at(static_cast<std::size_t>((b * 3 + c) * S * S)));
            }
        return Tensor::from({B, 6}, f);
    };
    Rng r(6);
    auto img = [&] {
        std::vector<double> v(3 * 4 * 4);
        for (double& x : v) x = r.uniform();
        return Tensor::from({3, 4, 4}, v);
    };
    const Tensor one = img();
    const GaussianStats dup = feature_stats({one, one, one}, ex);
    CHECK((dup.sigma - 1e-6 * Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-18);

    std::vector<Tensor> set;
    for (int i = 0; i < 12; ++i) set.push_back(img());
    const GaussianStats s = feature_stats(set, ex, 5);
    std::vector<Tensor> rev(set.rbegin(), set.rend());
    const GaussianStats sr = feature_stats(rev, ex, 3);
    CHECK((s.mu - sr.mu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s.sigma - sr.sigma).cwiseAbs().maxCoeff() < 1e-12);

    const Tensor f = ex(stage2::stack(set));
    const int n = 12, d = 6;
    std::vector<double> mu(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += f.at(static_cast<std::size_t>(i * d + j)) / n;
    for (int j = 0; j < d; ++j) CHECK(std::fabs(s.mu[j] - mu[static_cast<std::size_t>(j)]) < 1e-10);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) {
            double c = 0;
            for (int i = 0; i < n; ++i)
                c += (f.at(static_cast<std::size_t>(i * d + j)) - mu[static_cast<std::size_t>(j)]) *
                     (f.at(static_cast<std::size_t>(i * d + k)) - mu[static_cast<std::size_t>(k)]);
            CHECK(std::fabs(s.sigma(j, k) - c / (n - 1)) < 1e-10);
        }
    CHECK_THROWS_AS(feature_stats({}, ex), ContractError);
}

TEST_CASE("clip_sim and the corpus mean") {
    const std::vector<double> u = {0.6, 0.8, 0.0}, w = {0.0, 0.0, 1.0};
    CHECK(clip_sim(u, u) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(clip_sim(u, w) == 0.0);
    CHECK_THROWS_AS(clip_sim(u, std::vector<double>{1.0, 0.0}), ShapeError);

    stage2::BaseConfig cfg;
    cfg.canvas = 32;
    cfg.ae_width = 8;
    cfg.widths = {8, 8, 8};
    cfg.time_dim = 8;
    cfg.clip_dim = 8;
    const stage2::BaseModel base(cfg, 3);
    const auto corpus = scene::generate_corpus(7, 5, 2, 32);
    std::vector<Tensor> images;
    std::vector<std::string> caps;
    for (const auto& s : corpus.unique) {
        images.push_back(s.image);
        caps.push_back(s.caption);
    }
    double naive = 0;
    {
        NoGradGuard g;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const Tensor ie = base.image_embedding(stage2::stack({images[i]}));
            const Tensor te = base.text_embedding(base.text().encode_prompts({caps[i]}));
            naive += clip_sim(ie.values(), te.values());
        }
    }
    naive /= static_cast<double>(images.size());
    const double score = clip_score(base, images, caps);
    CHECK(std::fabs(score - naive) < 1e-12);
    CHECK(score >= -1.0);
    CHECK(score <= 1.0);
    CHECK(clip_score(base, images, caps) == score);

    const auto fex = toy_fid_extractor(base);
    const Tensor feats = fex(stage2::stack(images));
    CHECK(feats.shape() == Shape{static_cast<int>(images.size()), 32 + cfg.clip_dim});
}

TEST_CASE("reports are byte-stable") {
    const std::vector<Row> rows = {{"toy-FID", "depth", "unified-stage2", 1.5},
                                   {"CLIP_t", "depth", "unified-stage2", 0.25},
                                   {"toy-FID", "depth", "unified-stage1+2", 2.0 / 3.0}};
    const auto dir = std::filesystem::temp_directory_path() / "omni_test_metrics";
    std::filesystem::create_directories(dir);
    write_csv(dir / "a.csv", rows);
    write_csv(dir / "b.csv", rows);
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(slurp(dir / "a.csv") ==
          "metric,task,variant,value\ntoy-FID,depth,unified-stage2,1.500000\nCLIP_t,depth,unified-stage2,0.250000\n"
          "toy-FID,depth,unified-stage1+2,0.666667\n");
    write_markdown(dir / "r.md", "Generation", rows);
    const std::string md = slurp(dir / "r.md");
    CHECK(md.find("| variant | depth toy-FID | depth CLIP_t |") != std::string::npos);
    CHECK(md.find("| unified-stage1+2 | 0.666667 | - |") != std::string::npos);
    std::filesystem::remove_all(dir);
}
