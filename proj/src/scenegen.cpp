// SPDX-License-Identifier: Apache-2.0
#include "omni/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "omni/image_io.hpp"
#include "omni/rng.hpp"

namespace omni::scene {

namespace fs = std::filesystem;

int task_index(const std::string& task) {
    for (std::size_t i = 0; i < kTasks.size(); ++i)
        if (kTasks[i] == task) return static_cast<int>(i);
    throw ContractError("unknown task '" + task + "'");
}

const std::vector<Color>& palette() {
    static const std::vector<Color> colors = {
        {"red", 220, 30, 30},      {"green", 40, 170, 60},    {"blue", 40, 70, 220},   {"yellow", 240, 220, 40},
        {"cyan", 40, 210, 220},    {"magenta", 210, 40, 200}, {"orange", 245, 140, 30}, {"purple", 120, 50, 170},
        {"white", 255, 255, 255},  {"gray", 128, 128, 128},   {"black", 0, 0, 0},
    };
    return colors;
}

const std::vector<int>& background_colors() {
    static const std::vector<int> bg = {8, 9, 10};
    return bg;
}

const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Rectangle: return "rectangle";
        default: return "triangle";
    }
}

const char* pose_name(PoseKind k) {
    switch (k) {
        case PoseKind::Standing: return "standing";
        case PoseKind::Walking: return "walking";
        default: return "jumping";
    }
}

bool Primitive::contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    switch (kind) {
        case ShapeKind::Circle:
            return dx * dx + dy * dy <= size * size;
        case ShapeKind::Rectangle:
            return std::fabs(dx) <= size && std::fabs(dy) <= 0.75 * size;
        case ShapeKind::Triangle: {
            // Apex up, base at cy + size, half-width size at the base.
            if (dy < -size || dy > size) return false;
            const double half = size * (dy + size) / (2.0 * size);
            return std::fabs(dx) <= half;
        }
    }
    return false;
}

const std::vector<std::array<int, 2>>& bones() {
    static const std::vector<std::array<int, 2>> b = {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 4}};
    return b;
}

SceneSpec random_shapes_spec(int canvas, std::uint64_t seed) {
    Rng rng(seed);
    SceneSpec spec;
    spec.canvas = canvas;
    spec.seed = seed;
    const auto& bgs = background_colors();
    spec.background = bgs[rng.below(bgs.size())];
    const int n = 1 + static_cast<int>(rng.below(3));
    const double S = canvas;
    std::set<long> used_depths;
    for (int i = 0; i < n; ++i) {
        Primitive p;
        p.kind = static_cast<ShapeKind>(rng.below(3));
        // Depth sets size and vertical placement: nearer shapes are larger and lower.
        double d;
        do {
            d = 0.2 + 0.8 * rng.uniform();
        } while (!used_depths.insert(std::lround(d * 1e6)).second);
        p.depth = d;
        p.size = S * (0.07 + 0.13 * d);
        const double margin = p.size + 1.0;
        const double lo = margin, hi = S - margin;
        p.cy = lo + (hi - lo) * std::clamp(0.15 + 0.7 * d + 0.1 * (rng.uniform() - 0.5), 0.0, 1.0);
        p.cx = lo + (hi - lo) * rng.uniform();
        int c;
        do {
            c = static_cast<int>(rng.below(palette().size()));
        } while (c == spec.background);
        p.color = c;
        spec.prims.push_back(p);
    }
    return spec;
}

SceneSpec random_pose_spec(int canvas, std::uint64_t seed) {
    Rng rng(seed);
    SceneSpec spec;
    spec.canvas = canvas;
    spec.seed = seed;
    const auto& bgs = background_colors();
    spec.background = bgs[rng.below(bgs.size())];
    Skeleton sk;
    sk.pose = static_cast<PoseKind>(rng.below(3));
    const double S = canvas;
    const double scale = S * (0.25 + 0.15 * rng.uniform());  // figure height
    // Normalized joint offsets (x, y) in units of figure height, origin at the hip centre.
    std::array<std::array<double, 2>, 5> rel{};
    switch (sk.pose) {
        case PoseKind::Standing:
            rel = {{{0.0, -0.55}, {-0.12, 0.0}, {0.12, 0.0}, {-0.14, 0.45}, {0.14, 0.45}}};
            break;
        case PoseKind::Walking:
            rel = {{{0.05, -0.55}, {-0.1, 0.0}, {0.1, 0.0}, {-0.35, 0.42}, {0.3, 0.42}}};
            break;
        case PoseKind::Jumping:
            rel = {{{0.0, -0.6}, {-0.15, -0.05}, {0.15, -0.05}, {-0.4, 0.25}, {0.4, 0.25}}};
            break;
    }
    const double margin = 0.45 * scale + 3.0;
    const double hx = margin + (S - 2 * margin) * rng.uniform();
    const double hy = 0.6 * scale + 3.0 + (S - 1.1 * scale - 6.0) * rng.uniform();
    for (int j = 0; j < 5; ++j) {
        sk.joints[j][0] = std::clamp(hx + rel[j][0] * scale, 2.0, S - 3.0);
        sk.joints[j][1] = std::clamp(hy + rel[j][1] * scale, 2.0, S - 3.0);
    }
    int c;
    do {
        c = static_cast<int>(rng.below(palette().size()));
    } while (c == spec.background);
    sk.color = c;
    spec.skeleton = sk;
    return spec;
}

namespace {

std::vector<int> depth_order(const SceneSpec& spec) {
    std::vector<int> idx(spec.prims.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return spec.prims[a].depth < spec.prims[b].depth; });
    return idx;
}

/// Front-most primitive index per pixel, -1 for background.
std::vector<int> coverage(const SceneSpec& spec) {
    const int S = spec.canvas;
    std::vector<int> owner(static_cast<std::size_t>(S) * S, -1);
    for (int i : depth_order(spec))
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                if (spec.prims[i].contains(x + 0.5, y + 0.5)) owner[static_cast<std::size_t>(y) * S + x] = i;
    return owner;
}

std::vector<std::uint8_t> skeleton_mask(const SceneSpec& spec) {
    if (!spec.skeleton) throw ContractError("derive_pose: scene has no skeleton");
    const int S = spec.canvas;
    std::vector<std::uint8_t> m(static_cast<std::size_t>(S) * S, 0);
    auto set = [&](int x, int y) {
        if (x >= 0 && x < S && y >= 0 && y < S) m[static_cast<std::size_t>(y) * S + x] = 1;
    };
    const auto& j = spec.skeleton->joints;
    std::array<std::array<int, 2>, 5> pix{};
    for (int k = 0; k < 5; ++k) pix[k] = {static_cast<int>(std::floor(j[k][0])), static_cast<int>(std::floor(j[k][1]))};
    for (const auto& b : bones())
        for (const auto& p : bresenham(pix[b[0]][0], pix[b[0]][1], pix[b[1]][0], pix[b[1]][1])) set(p[0], p[1]);
    for (const auto& p : pix)
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx)
                if (dx * dx + dy * dy <= 4) set(p[0] + dx, p[1] + dy);
    return m;
}

}  // namespace

std::vector<std::array<int, 2>> bresenham(int x0, int y0, int x1, int y1) {
    std::vector<std::array<int, 2>> out;
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        out.push_back({x0, y0});
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
    return out;
}

Tensor render_scene(const SceneSpec& spec) {
    const int S = spec.canvas;
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    std::vector<int> owner_color(plane, spec.background);
    if (spec.skeleton) {
        const auto m = skeleton_mask(spec);
        for (std::size_t i = 0; i < plane; ++i)
            if (m[i]) owner_color[i] = spec.skeleton->color;
    }
    const auto owner = coverage(spec);
    for (std::size_t i = 0; i < plane; ++i)
        if (owner[i] >= 0) owner_color[i] = spec.prims[static_cast<std::size_t>(owner[i])].color;
    std::vector<double> img(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const Color& c = palette()[static_cast<std::size_t>(owner_color[i])];
        img[i] = c.r / 255.0;
        img[plane + i] = c.g / 255.0;
        img[2 * plane + i] = c.b / 255.0;
    }
    return Tensor::from({3, S, S}, std::move(img));
}

Tensor derive_depth(const SceneSpec& spec) {
    const int S = spec.canvas;
    const auto owner = coverage(spec);
    std::vector<double> d(owner.size(), 0.0);
    for (std::size_t i = 0; i < owner.size(); ++i)
        if (owner[i] >= 0) d[i] = spec.prims[static_cast<std::size_t>(owner[i])].depth;
    return Tensor::from({1, S, S}, std::move(d));
}

Tensor grayscale(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("grayscale expects [3,H,W], got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const auto v = image.values();
    std::vector<double> g(plane);
    for (std::size_t i = 0; i < plane; ++i) g[i] = 0.299 * v[i] + 0.587 * v[plane + i] + 0.114 * v[2 * plane + i];
    return Tensor::from({1, h, w}, std::move(g));
}

Tensor derive_edges(const Tensor& image) {
    const Tensor g = grayscale(image);
    const int h = g.dim(1), w = g.dim(2);
    const auto v = g.values();
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return v[static_cast<std::size_t>(y) * w + x];
    };
    std::vector<double> mag(static_cast<std::size_t>(h) * w);
    double mx = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
            const double m = std::sqrt(gx * gx + gy * gy);
            mag[static_cast<std::size_t>(y) * w + x] = m;
            mx = std::max(mx, m);
        }
    if (mx > 0)
        for (double& m : mag) m /= mx;
    return Tensor::from({1, h, w}, std::move(mag));
}

Tensor derive_scribble(const Tensor& image) {
    Tensor g = grayscale(image);
    std::vector<double> out(g.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::lround(g.at(i) * 255.0) > 127 ? 1.0 : 0.0;
    return Tensor::from(g.shape(), std::move(out));
}

Tensor derive_pose(const SceneSpec& spec) {
    const auto m = skeleton_mask(spec);
    std::vector<double> out(m.begin(), m.end());
    return Tensor::from({1, spec.canvas, spec.canvas}, std::move(out));
}

std::string caption(const SceneSpec& spec) {
    const std::string bg = palette()[static_cast<std::size_t>(spec.background)].name;
    if (spec.skeleton)
        return std::string("a stick figure ") + pose_name(spec.skeleton->pose) + " on a " + bg + " background";
    if (spec.prims.empty()) return "a plain " + bg + " background";
    std::string out;
    for (std::size_t i = 0; i < spec.prims.size(); ++i) {
        if (i) out += " and ";
        out += "a " + palette()[static_cast<std::size_t>(spec.prims[i].color)].name + " " + shape_name(spec.prims[i].kind);
    }
    return out + " on a " + bg + " background";
}

Sample make_sample(const SceneSpec& spec, int source) {
    Sample s;
    s.image = render_scene(spec);
    s.caption = caption(spec);
    s.seed = spec.seed;
    s.source = source;
    if (spec.skeleton) {
        s.conditions["animal_pose"] = derive_pose(spec);
        s.task_mask = {"animal_pose"};
    } else {
        s.conditions["depth"] = derive_depth(spec);
        s.conditions["hed"] = derive_edges(s.image);
        s.conditions["scribble"] = derive_scribble(s.image);
        s.task_mask = {"depth", "hed", "scribble"};
    }
    return s;
}

Corpus generate_corpus(std::uint64_t seed, int n_shapes, int n_pose, int canvas, bool balance) {
    if (n_shapes < 0 || n_pose < 0 || n_shapes + n_pose < 1) throw ContractError("generate_corpus: need at least one sample");
    const Rng root(seed);
    const int n = n_shapes + n_pose;
    Corpus c;
    c.unique.resize(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        const std::uint64_t s = root.fork(static_cast<std::uint64_t>(i)).next_u64();
        const SceneSpec spec = i < n_shapes ? random_shapes_spec(canvas, s) : random_pose_spec(canvas, s);
        c.unique[static_cast<std::size_t>(i)] = make_sample(spec, i);
    }
    for (int i = 0; i < n_shapes; ++i) c.order.push_back(i);
    if (!balance || n_pose == 0 || n_shapes <= n_pose) {
        for (int i = 0; i < n_pose; ++i) c.order.push_back(n_shapes + i);
        return c;
    }
    const int copies = n_shapes / n_pose, extra = n_shapes % n_pose;
    for (int r = 0; r < copies + 1; ++r)
        for (int i = 0; i < n_pose; ++i)
            if (r < copies || i < extra) c.order.push_back(n_shapes + i);
    return c;
}

namespace {
std::string sample_dir(int i) {
    std::ostringstream os;
    os << 's' << std::setw(5) << std::setfill('0') << i;
    return os.str();
}
}  // namespace

void write_corpus(const Corpus& corpus, const fs::path& dir) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < corpus.unique.size(); ++i) {
        const Sample& s = corpus.unique[i];
        const fs::path d = dir / sample_dir(static_cast<int>(i));
        fs::create_directories(d);
        write_png(d / "image.png", s.image);
        for (const auto& [task, map] : s.conditions) write_pgm(d / ("cond_" + task + ".pgm"), map);
        std::ofstream(d / "caption.txt") << s.caption << '\n';
        std::ofstream meta(d / "meta.txt");
        meta << "task_mask";
        for (const auto& t : s.task_mask) meta << ' ' << t;
        meta << "\nseed " << s.seed << '\n';
    }
    std::ofstream index(dir / "index.txt");
    for (int i : corpus.order) index << sample_dir(i) << '\n';
}

Corpus read_corpus(const fs::path& dir) {
    std::ifstream index(dir / "index.txt");
    if (!index) throw std::runtime_error("missing corpus index in " + dir.string());
    Corpus c;
    std::map<std::string, int> seen;
    std::string name;
    while (std::getline(index, name)) {
        if (name.empty()) continue;
        auto it = seen.find(name);
        if (it != seen.end()) {
            c.order.push_back(it->second);
            continue;
        }
        const fs::path d = dir / name;
        Sample s;
        s.image = read_png(d / "image.png");
        std::ifstream cap(d / "caption.txt");
        std::getline(cap, s.caption);
        std::ifstream meta(d / "meta.txt");
        std::string line;
        while (std::getline(meta, line)) {
            std::istringstream ls(line);
            std::string key;
            ls >> key;
            if (key == "task_mask") {
                std::string t;
                while (ls >> t) s.task_mask.push_back(t);
            } else if (key == "seed") {
                ls >> s.seed;
            }
        }
        for (const auto& t : s.task_mask) {
            const fs::path f = d / ("cond_" + t + ".pgm");
            if (fs::exists(f)) s.conditions[t] = read_pgm(f);
        }
        const int idx = static_cast<int>(c.unique.size());
        s.source = idx;
        seen[name] = idx;
        c.unique.push_back(std::move(s));
        c.order.push_back(idx);
    }
    if (c.unique.empty()) throw std::runtime_error("empty corpus in " + dir.string());
    return c;
}

}  // namespace omni::scene
