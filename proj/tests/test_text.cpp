// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "omni/gradcheck.hpp"
#include "omni/text.hpp"

using namespace omni;
using namespace omni::text;

namespace {
std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
bool same(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}
}  // namespace

TEST_CASE("tokenize empty prompt") {
    Vocabulary v;
    auto ids = tokenize(v, "");
    REQUIRE(ids.size() == 32);
    CHECK(ids[0] == kBos);
    CHECK(ids[1] == kEos);
    for (int i = 2; i < 32; ++i) CHECK(ids[i] == kPad);
}

TEST_CASE("task tokens are single tokens") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(1);
    TextEncoder enc(ps, v, rng);
    const int depth = enc.register_token("depth", rng);
    auto ids = tokenize(v, "an image of ⟨depth⟩");
    CHECK(ids[1] == v.id("an"));
    CHECK(ids[4] == depth);
    CHECK(ids[5] == kEos);
    CHECK(tokenize(v, "an image of <depth>") == ids);
    CHECK(tokenize(v, "An IMAGE of ⟨depth⟩") == ids);
}

TEST_CASE("detokenize inverts tokenize on known words") {
    Vocabulary v;
    for (const std::string p : {"a red circle and a blue rectangle on a white background",
                                "a stick figure walking on a gray background", "a plain black background",
                                "use as a feature, an image of"}) {
        auto ids = tokenize(v, p);
        CHECK(detokenize(v, ids) == p);
        CHECK(tokenize(v, detokenize(v, ids)) == ids);
        for (int id : ids) CHECK(id != kUnk);
    }
    CHECK(tokenize(v, "zebra")[1] == kUnk);
}

TEST_CASE("long prompts truncate without error") {
    Vocabulary v;
    std::string p;
    for (int i = 0; i < 40; ++i) p += "a ";
    bool cut = false;
    auto ids = tokenize(v, p, &cut);
    CHECK(cut);
    CHECK(ids.size() == 32);
    CHECK(ids[31] == kEos);
}

TEST_CASE("register_token is idempotent and appends one row") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(2);
    TextEncoder enc(ps, v, rng);
    const int before = v.size();
    const std::size_t scalars = ps.count_scalars();
    auto snapshot = vec(enc.row(5));
    const int a = enc.register_token("depth", rng);
    auto row = vec(enc.row(a));
    CHECK(v.size() == before + 1);
    CHECK(ps.count_scalars() == scalars + kDText);
    const int b = enc.register_token("depth", rng);
    CHECK(a == b);
    CHECK(v.size() == before + 1);
    CHECK(same(vec(enc.row(a)), row));
    double n = 0;
    for (double x : row) n += x * x;
    CHECK(n > 0);
    for (const char* t : {"hed", "scribble", "animal_pose"}) enc.register_token(t, rng);
    CHECK(same(vec(enc.row(5)), snapshot));
    CHECK_THROWS_AS(enc.register_token("two words", rng), ContractError);

    Vocabulary v2;
    ParamStore ps2;
    Rng other(3);
    TextEncoder enc2(ps2, v2, other);
    CHECK(!same(vec(enc2.row(enc2.register_token("depth", other))), row));
}

TEST_CASE("registering tokens preserves every existing row bitwise") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(4);
    TextEncoder enc(ps, v, rng);
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < v.size(); ++i) rows.push_back(vec(enc.row(i)));
    for (int k = 0; k < 6; ++k) enc.register_token("t" + std::to_string(k), rng);
    for (int i = 0; i < static_cast<int>(rows.size()); ++i) CHECK(same(vec(enc.row(i)), rows[i]));
}

TEST_CASE("encode: determinism, pooling, order sensitivity") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(5);
    TextEncoder enc(ps, v, rng);
    auto ids = tokenize(v, "a red circle on a white background");
    auto e1 = enc.encode(ids), e2 = enc.encode(ids);
    CHECK(same(vec(e1.matrix), vec(e2.matrix)));
    CHECK(same(vec(e1.pooled), vec(e2.pooled)));
    CHECK(e1.matrix.shape() == Shape{1, 32, 64});
    // Pooled equals the mean of non-PAD rows.
    const int live = 9;
    for (int d = 0; d < kDText; ++d) {
        double s = 0;
        for (int p = 0; p < live; ++p) s += e1.matrix.at(p * kDText + d);
        CHECK(std::fabs(e1.pooled.at(d) - s / live) < 1e-12);
    }
    auto swapped = tokenize(v, "a circle red on a white background");
    CHECK(!same(vec(enc.encode(swapped).pooled), vec(e1.pooled)));
    CHECK_THROWS_AS(enc.encode(std::vector<int>(32, 999)), ContractError);
}

TEST_CASE("encode is permutation sensitive over seeds") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(6);
    TextEncoder enc(ps, v, rng);
    const std::vector<std::string> words = {"red", "circle", "blue", "triangle", "on", "gray"};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng r(seed);
        std::vector<std::string> pick = words;
        for (std::size_t i = pick.size() - 1; i > 0; --i) std::swap(pick[i], pick[r.below(i + 1)]);
        pick.resize(3 + r.below(3));
        std::vector<std::string> perm = pick;
        std::rotate(perm.begin(), perm.begin() + 1, perm.end());
        auto join = [](const std::vector<std::string>& w) {
            std::string s;
            for (const auto& x : w) s += x + " ";
            return s;
        };
        CHECK(!same(vec(enc.encode(tokenize(v, join(pick))).pooled), vec(enc.encode(tokenize(v, join(perm))).pooled)));
    }
}

TEST_CASE("encode gradient with respect to one embedding row") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(7);
    TextEncoder enc(ps, v, rng);
    const int id = enc.register_token("depth", rng);
    auto ids = tokenize(v, "an image of ⟨depth⟩");
    Tensor target = Tensor::randn({1, kDText}, rng);
    Tensor row = enc.row(id);
    auto f = [&](const std::vector<Tensor>& in) {
        // Splice the probe tensor in place of the stored row.
        ps.get(enc.row_name(id)).tensor = in[0];
        return sum(mul(enc.encode(ids).pooled, target));
    };
    const double err = grad_check(f, {row.detach()});
    ps.get(enc.row_name(id)).tensor = row;
    CHECK(err < 1e-5);
}

TEST_CASE("apply_prefix template") {
    Vocabulary v;
    ParamStore ps;
    Rng rng(8);
    TextEncoder enc(ps, v, rng);
    enc.register_token("depth", rng);
    enc.register_token("hed", rng);
    CHECK(apply_prefix(v, "depth", "a motorcycle in front of a tree") ==
          "Use ⟨depth⟩ as a feature, a motorcycle in front of a tree");
    CHECK(apply_prefix(v, "hed", "") == "Use ⟨hed⟩ as a feature, ");
    const std::string twice = apply_prefix(v, "hed", apply_prefix(v, "hed", "a"));
    CHECK(twice.rfind("Use ⟨", 0) == 0);
    CHECK(twice.find("Use ⟨", 1) != std::string::npos);
    try {
        apply_prefix(v, "scribble", "x");
        FAIL("expected error");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("scribble") != std::string::npos);
    }
    for (const char* task : {"depth", "hed"})
        for (const char* p : {"", "a red circle on a white background"}) {
            auto ids = tokenize(v, apply_prefix(v, task, p));
            CHECK(ids[0] == kBos);
            CHECK(ids[1] == v.id("use"));
            CHECK(ids[2] == v.id(task_token(task)));
        }
}

TEST_CASE("vocab file round trip") {
    Vocabulary v;
    v.add(task_token("depth"));
    const auto file = std::filesystem::temp_directory_path() / "omni_vocab_test.txt";
    v.save(file);
    Vocabulary w = Vocabulary::load(file);
    CHECK(w.tokens() == v.tokens());
    std::filesystem::remove(file);
}
