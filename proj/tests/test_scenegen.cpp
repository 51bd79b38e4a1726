// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "omni/image_io.hpp"
#include "omni/scenegen.hpp"
#include "omni/text.hpp"

using namespace omni;
using namespace omni::scene;

namespace {
std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
bool same(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}
double px(const Tensor& t, int c, int y, int x) { return t.at((static_cast<std::size_t>(c) * t.dim(1) + y) * t.dim(2) + x); }

Tensor flat_image(int S, double r, double g, double b) {
    std::vector<double> v(3 * S * S);
    for (int i = 0; i < S * S; ++i) {
        v[i] = r;
        v[S * S + i] = g;
        v[2 * S * S + i] = b;
    }
    return Tensor::from({3, S, S}, v);
}

SceneSpec skeleton_spec(std::array<std::array<double, 2>, 5> joints) {
    SceneSpec s;
    s.canvas = 64;
    s.background = 9;
    Skeleton sk;
    sk.joints = joints;
    sk.color = 0;
    s.skeleton = sk;
    return s;
}
}  // namespace

TEST_CASE("render: empty scene, determinism, occlusion") {
    SceneSpec empty;
    empty.background = 9;
    Tensor img = render_scene(empty);
    for (int c = 0; c < 3; ++c) CHECK(px(img, c, 10, 20) == 128 / 255.0);
    for (double v : vec(derive_depth(empty))) CHECK(v == 0.0);
    CHECK(caption(empty) == "a plain gray background");

    SceneSpec two;
    two.background = 8;
    two.prims.push_back({ShapeKind::Circle, 30, 30, 10, 0.4, 0});
    two.prims.push_back({ShapeKind::Rectangle, 38, 30, 8, 0.9, 2});
    Tensor a = render_scene(two), b = render_scene(two);
    CHECK(same(a, b));
    // (35,30) is inside both; the nearer blue rectangle wins.
    REQUIRE(two.prims[0].contains(35.5, 30.5));
    REQUIRE(two.prims[1].contains(35.5, 30.5));
    CHECK(px(a, 2, 30, 35) == 220 / 255.0);
    CHECK(px(a, 0, 30, 35) == 40 / 255.0);
    Tensor d = derive_depth(two);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            double want = 0;
            for (const auto& p : two.prims)
                if (p.contains(x + 0.5, y + 0.5)) want = std::max(want, p.depth);
            CHECK(px(d, 0, y, x) == want);
        }
}

TEST_CASE("depth of a single circle") {
    SceneSpec s;
    s.prims.push_back({ShapeKind::Circle, 32, 32, 9, 0.8, 1});
    Tensor d = derive_depth(s);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const double dx = x + 0.5 - 32, dy = y + 0.5 - 32;
            CHECK(px(d, 0, y, x) == (dx * dx + dy * dy <= 81 ? 0.8 : 0.0));
        }
}

TEST_CASE("sobel edges") {
    for (double v : vec(derive_edges(flat_image(16, 0.3, 0.3, 0.3)))) CHECK(v == 0.0);
    // Vertical step between columns 7 and 8: hand Sobel gives 4 in columns 7 and 8.
    std::vector<double> v(3 * 16 * 16, 0.0);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 8; x < 16; ++x) v[(c * 16 + y) * 16 + x] = 1.0;
    Tensor e = derive_edges(Tensor::from({3, 16, 16}, v));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const double want = (x == 7 || x == 8) ? 1.0 : 0.0;
            CHECK(std::fabs(px(e, 0, y, x) - want) < 1e-12);
        }
    double mx = 0;
    for (double x : e.values()) mx = std::max(mx, x);
    CHECK(mx == 1.0);
}

TEST_CASE("scribble threshold") {
    CHECK(derive_scribble(flat_image(4, 128 / 255.0, 128 / 255.0, 128 / 255.0)).at(0) == 1.0);
    CHECK(derive_scribble(flat_image(4, 127 / 255.0, 127 / 255.0, 127 / 255.0)).at(0) == 0.0);
    for (double x : vec(derive_scribble(flat_image(4, 0, 0, 0)))) CHECK(x == 0.0);
    Rng rng(5);
    for (int k = 0; k < 100; ++k) {
        std::vector<double> v(3 * 8 * 8);
        for (double& x : v) x = rng.uniform();
        for (double x : vec(derive_scribble(Tensor::from({3, 8, 8}, v)))) CHECK((x == 0.0 || x == 1.0));
    }
}

TEST_CASE("pose raster") {
    auto single = skeleton_spec({{{32, 32}, {32, 32}, {32, 32}, {32, 32}, {32, 32}}});
    Tensor m = derive_pose(single);
    int ones = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const bool in = (x - 32) * (x - 32) + (y - 32) * (y - 32) <= 4;
            CHECK(px(m, 0, y, x) == (in ? 1.0 : 0.0));
            ones += in;
        }
    CHECK(ones == 13);

    // A rounding rasterizer; dx is odd so no half-pixel ties occur.
    auto line = skeleton_spec({{{10, 10}, {39, 21}, {39, 21}, {39, 21}, {39, 21}}});
    Tensor l = derive_pose(line);
    for (int x = 10; x <= 39; ++x) {
        const int y = static_cast<int>(std::lround(10 + (x - 10) * 11.0 / 29.0));
        CHECK(px(l, 0, y, x) == 1.0);
    }
    SceneSpec none;
    CHECK_THROWS_AS(derive_pose(none), ContractError);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        double s = 0;
        for (double x : vec(derive_pose(random_pose_spec(64, seed)))) s += x;
        CHECK(s > 0);
    }
}

TEST_CASE("captions") {
    SceneSpec s;
    s.background = 8;
    s.prims.push_back({ShapeKind::Circle, 20, 20, 6, 0.3, 0});
    s.prims.push_back({ShapeKind::Rectangle, 40, 40, 6, 0.6, 2});
    CHECK(caption(s) == "a red circle and a blue rectangle on a white background");
    SceneSpec t = s;
    t.prims[1].color = 1;
    auto words = [](const std::string& c) {
        std::vector<std::string> w;
        std::istringstream ss(c);
        std::string x;
        while (ss >> x) w.push_back(x);
        return w;
    };
    auto a = words(caption(s)), b = words(caption(t));
    REQUIRE(a.size() == b.size());
    int diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
    CHECK(diff == 1);
    text::Vocabulary v;
    for (std::uint64_t seed = 0; seed < 50; ++seed)
        for (const auto& spec : {random_shapes_spec(64, seed), random_pose_spec(64, seed)})
            for (int id : text::tokenize(v, caption(spec))) CHECK(id != text::kUnk);
}

TEST_CASE("corpus generation and balancing") {
    Corpus c = generate_corpus(42, 100, 20, 64);
    CHECK(c.unique.size() == 120);
    CHECK(c.size() == 200);
    int pose = 0;
    for (std::size_t i = 0; i < c.size(); ++i) pose += c[i].has("animal_pose");
    CHECK(pose == 100);
    std::map<int, int> copies;
    for (int i : c.order)
        if (i >= 100) ++copies[i];
    for (const auto& [i, n] : copies) CHECK(n == 5);

    Corpus d = generate_corpus(42, 100, 20, 64);
    for (std::size_t i = 0; i < c.unique.size(); ++i) {
        CHECK(same(c.unique[i].image, d.unique[i].image));
        CHECK(c.unique[i].caption == d.unique[i].caption);
    }

    for (const Sample& s : c.unique) {
        for (double v : s.image.values()) CHECK((v >= 0.0 && v <= 1.0));
        for (const auto& [task, m] : s.conditions) {
            CHECK(m.shape() == Shape{1, 64, 64});
            for (double v : m.values()) CHECK((v >= 0.0 && v <= 1.0));
        }
        if (s.has("scribble"))
            for (double v : s.conditions.at("scribble").values()) CHECK((v == 0.0 || v == 1.0));
        CHECK(s.has("animal_pose") == !s.has("depth"));
        CHECK(s.task_mask.size() == s.conditions.size());
    }

    Corpus uneven = generate_corpus(1, 10, 4, 32);
    int up = 0;
    for (std::size_t i = 0; i < uneven.size(); ++i) up += uneven[i].has("animal_pose");
    CHECK(up == 10);
}

TEST_CASE("derivations are stable and consistent with rendering") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        SceneSpec spec = random_shapes_spec(64, seed);
        Tensor img = render_scene(spec);
        CHECK(same(derive_edges(img), derive_edges(img)));
        CHECK(same(derive_scribble(img), derive_scribble(img)));
        Tensor d = derive_depth(spec);
        CHECK(same(d, derive_depth(spec)));
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const double dv = px(d, 0, y, x);
                int color = spec.background;
                for (const auto& p : spec.prims)
                    if (dv > 0 && p.depth == dv) color = p.color;
                const auto& c = palette()[static_cast<std::size_t>(color)];
                CHECK(px(img, 0, y, x) == c.r / 255.0);
                CHECK(px(img, 1, y, x) == c.g / 255.0);
                CHECK(px(img, 2, y, x) == c.b / 255.0);
            }
        for (std::size_t i = 0; i < spec.prims.size(); ++i)
            for (std::size_t j = i + 1; j < spec.prims.size(); ++j) CHECK(spec.prims[i].depth != spec.prims[j].depth);
    }
}

TEST_CASE("corpus disk round trip") {
    Corpus c = generate_corpus(3, 6, 2, 32);
    const auto dir = std::filesystem::temp_directory_path() / "omni_corpus_test";
    std::filesystem::remove_all(dir);
    write_corpus(c, dir);
    Corpus r = read_corpus(dir);
    CHECK(r.order == c.order);
    REQUIRE(r.unique.size() == c.unique.size());
    for (std::size_t i = 0; i < c.unique.size(); ++i) {
        CHECK(same(r.unique[i].image, c.unique[i].image));
        CHECK(r.unique[i].caption == c.unique[i].caption);
        CHECK(r.unique[i].task_mask == c.unique[i].task_mask);
        for (const auto& [t, m] : c.unique[i].conditions) {
            const Tensor& q = r.unique[i].conditions.at(t);
            for (std::size_t k = 0; k < m.numel(); ++k) CHECK(std::fabs(q.at(k) - m.at(k)) <= 0.5 / 255.0 + 1e-12);
        }
    }
    std::filesystem::remove_all(dir);
}
