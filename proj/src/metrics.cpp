// SPDX-License-Identifier: Apache-2.0
#include "omni/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "omni/denoiser.hpp"
#include "omni/nn.hpp"

namespace omni::metrics {

double rmse(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) throw ShapeError("rmse: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
    require(pred.numel() > 0, "rmse: empty maps");
    double s = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.at(i) - gt.at(i);
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(pred.numel()));
}

PRPoint pr_from_counts(const Counts& c, double threshold) {
    PRPoint p;
    p.threshold = threshold;
    p.precision = c.tp + c.fp == 0 ? (c.fn == 0 ? 1.0 : 0.0) : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    p.recall = c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    p.f = p.precision + p.recall == 0 ? 0.0 : 2 * p.precision * p.recall / (p.precision + p.recall);
    return p;
}

Counts confusion(const Tensor& pred, const Tensor& gt, double tau) {
    if (pred.shape() != gt.shape()) throw ShapeError("confusion: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
    Counts c;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const double g = gt.at(i);
        if (g != 0.0 && g != 1.0) throw DomainError("confusion: ground truth must be binary, found " + std::to_string(g));
        const bool p = pred.at(i) > tau;
        if (p && g == 1.0) ++c.tp;
        else if (p) ++c.fp;
        else if (g == 1.0) ++c.fn;
    }
    return c;
}

PRPoint pr_at_threshold(const Tensor& pred, const Tensor& gt, double tau) { return pr_from_counts(confusion(pred, gt, tau), tau); }

const std::vector<double>& threshold_grid() {
    static const std::vector<double> grid = [] {
        std::vector<double> g;
        for (int i = 1; i <= 99; ++i) g.push_back(i / 100.0);
        return g;
    }();
    return grid;
}

namespace {

// counts[i][k]: image i at grid threshold k.
std::vector<std::vector<Counts>> sweep(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    if (preds.empty()) throw ContractError("edge metrics: empty dataset");
    if (preds.size() != gts.size()) throw ContractError("edge metrics: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(gts.size()) + " ground truths");
    const auto& grid = threshold_grid();
    std::vector<std::vector<Counts>> out(preds.size(), std::vector<Counts>(grid.size()));
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t k = 0; k < grid.size(); ++k) out[i][k] = confusion(preds[i], gts[i], grid[k]);
    return out;
}

std::vector<PRPoint> pooled_curve(const std::vector<std::vector<Counts>>& counts) {
    const auto& grid = threshold_grid();
    std::vector<PRPoint> curve;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        Counts c;
        for (const auto& img : counts) c += img[k];
        curve.push_back(pr_from_counts(c, grid[k]));
    }
    return curve;
}

}  // namespace

OdsResult ods(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    OdsResult best{0, -1};
    for (const PRPoint& p : pooled_curve(sweep(preds, gts)))
        if (p.f > best.f) best = {p.threshold, p.f};
    return best;
}

double ois(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    const auto counts = sweep(preds, gts);
    double s = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        double best = 0;
        for (std::size_t k = 0; k < counts[i].size(); ++k) best = std::max(best, pr_from_counts(counts[i][k], 0).f);
        s += best;
    }
    return s / static_cast<double>(counts.size());
}

double ap(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts) {
    std::vector<PRPoint> curve = pooled_curve(sweep(preds, gts));
    std::sort(curve.begin(), curve.end(), [](const PRPoint& a, const PRPoint& b) { return a.recall < b.recall; });
    // Envelope: best precision at any recall at least as large.
    std::vector<std::pair<double, double>> env;
    double best = 0;
    for (auto it = curve.rbegin(); it != curve.rend(); ++it) {
        best = std::max(best, it->precision);
        if (!env.empty() && env.back().first == it->recall) env.back().second = best;
        else env.emplace_back(it->recall, best);
    }
    std::reverse(env.begin(), env.end());
    if (env.front().first > 0) env.insert(env.begin(), {0.0, env.front().second});
    double area = 0;
    for (std::size_t i = 1; i < env.size(); ++i) area += (env[i].first - env[i - 1].first) * (env[i].second + env[i - 1].second) / 2;
    return area;
}

namespace {

void check_sigma(const Eigen::MatrixXd& s, const char* which) {
    if (s.rows() != s.cols()) throw ShapeError(std::string("frechet: covariance ") + which + " is not square");
    const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
    if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
        throw DomainError(std::string("frechet: covariance ") + which + " is not symmetric");
}

Eigen::VectorXd clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* what) {
    Eigen::VectorXd ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-10 * scale) throw DomainError(std::string("frechet: ") + what + " has a negative eigenvalue " + std::to_string(ev[i]));
        ev[i] = std::max(ev[i], 0.0);
    }
    return ev;
}

}  // namespace

double frechet(const GaussianStats& a, const GaussianStats& b) {
    const Eigen::Index d = a.mu.size();
    if (b.mu.size() != d || a.sigma.rows() != d || b.sigma.rows() != d)
        throw ShapeError("frechet: dimension mismatch (" + std::to_string(d) + " vs " + std::to_string(b.mu.size()) + ")");
    check_sigma(a.sigma, "a");
    check_sigma(b.sigma, "b");
    // Tr (S_a S_b)^{1/2} = Tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, a symmetric PSD product.
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.sigma);
    const Eigen::VectorXd la = clamped_eigenvalues(ea, "covariance a");
    const Eigen::MatrixXd ra = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd m = ra * b.sigma * ra;
    m = (m + m.transpose()) / 2;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = clamped_eigenvalues(em, "covariance product").cwiseSqrt().sum();
    const double d2 = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2 * tr_sqrt;
    return std::max(d2, 0.0);
}

GaussianStats stats_from_features(const Eigen::MatrixXd& f) {
    if (f.rows() == 0) throw ContractError("feature_stats: empty set");
    const Eigen::Index n = f.rows(), d = f.cols();
    GaussianStats s;
    s.mu = f.colwise().mean().transpose();
    const Eigen::MatrixXd c = f.rowwise() - s.mu.transpose();
    s.sigma = n > 1 ? Eigen::MatrixXd((c.transpose() * c) / static_cast<double>(n - 1)) : Eigen::MatrixXd::Zero(d, d);
    s.sigma = (s.sigma + s.sigma.transpose()) / 2;
    if (n < d + 1) s.sigma += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    return s;
}

GaussianStats feature_stats(const std::vector<Tensor>& images, const Extractor& extractor, int batch) {
    if (images.empty()) throw ContractError("feature_stats: empty set");
    require(batch >= 1, "feature_stats: batch must be positive");
    Eigen::MatrixXd f;
    for (std::size_t begin = 0; begin < images.size(); begin += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(images.size(), begin + static_cast<std::size_t>(batch));
        const Tensor feats = extractor(stage2::stack({images.begin() + static_cast<std::ptrdiff_t>(begin), images.begin() + static_cast<std::ptrdiff_t>(end)}));
        if (feats.rank() != 2 || feats.dim(0) != static_cast<int>(end - begin)) throw ShapeError("feature_stats: extractor must return [B,d]");
        if (f.size() == 0) f.resize(static_cast<Eigen::Index>(images.size()), feats.dim(1));
        for (int r = 0; r < feats.dim(0); ++r)
            for (int c = 0; c < feats.dim(1); ++c) f(static_cast<Eigen::Index>(begin) + r, c) = feats.at(static_cast<std::size_t>(r) * feats.dim(1) + c);
    }
    return stats_from_features(f);
}

Extractor toy_fid_extractor(const stage2::BaseModel& base) {
    struct Net {
        ParamStore ps;
        Conv2d c1, c2;
    };
    auto net = std::make_shared<Net>();
    Rng rng(0xf1d);
    net->c1 = Conv2d::make(net->ps, "fid.c1", 3, 16, 4, 2, 1, rng);
    net->c2 = Conv2d::make(net->ps, "fid.c2", 16, 32, 4, 2, 1, rng);
    net->ps.freeze_prefix("", true);
    const stage2::BaseModel* b = &base;
    return [net, b](const Tensor& images) {
        NoGradGuard no_grad;
        const Tensor r = global_avg_pool(relu(net->c2(relu(net->c1(images)))));
        return concat({r, b->image_embedding(images)}, 1);
    };
}

double clip_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("clip_sim: dimension " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double clip_score(const stage2::BaseModel& base, const std::vector<Tensor>& images, const std::vector<std::string>& captions) {
    if (images.empty() || images.size() != captions.size()) throw ContractError("clip_score: need one caption per image");
    NoGradGuard no_grad;
    double total = 0;
    const std::size_t chunk = 32;
    for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
        const std::size_t end = std::min(images.size(), begin + chunk);
        const Tensor ie = base.image_embedding(stage2::stack({images.begin() + static_cast<std::ptrdiff_t>(begin), images.begin() + static_cast<std::ptrdiff_t>(end)}));
        const Tensor te = base.text_embedding(base.text().encode_prompts({captions.begin() + static_cast<std::ptrdiff_t>(begin), captions.begin() + static_cast<std::ptrdiff_t>(end)}));
        const std::size_t d = static_cast<std::size_t>(ie.dim(1));
        for (std::size_t i = 0; i < end - begin; ++i)
            total += clip_sim(ie.values().subspan(i * d, d), te.values().subspan(i * d, d));
    }
    return total / static_cast<double>(images.size());
}

std::string format_value(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

void write_csv(const std::filesystem::path& file, const std::vector<Row>& rows) {
    std::ofstream out(file);
    if (!out) throw ContractError("cannot write " + file.string());
    out << "metric,task,variant,value\n";
    for (const Row& r : rows) out << r.metric << ',' << r.task << ',' << r.variant << ',' << format_value(r.value) << '\n';
}

void write_markdown(const std::filesystem::path& file, const std::string& title, const std::vector<Row>& rows) {
    std::ofstream out(file);
    if (!out) throw ContractError("cannot write " + file.string());
    out << "# " << title << "\n\n";
    std::vector<std::pair<std::string, std::string>> cols;  // (task, metric) in first-seen order
    std::vector<std::string> variants;
    std::map<std::pair<std::string, std::pair<std::string, std::string>>, double> cell;
    for (const Row& r : rows) {
        const auto col = std::make_pair(r.task, r.metric);
        if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
        cell[{r.variant, col}] = r.value;
    }
    out << "| variant |";
    for (const auto& [task, metric] : cols) out << ' ' << task << ' ' << metric << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) out << "---|";
    out << '\n';
    for (const auto& v : variants) {
        out << "| " << v << " |";
        for (const auto& col : cols) {
            auto it = cell.find({v, col});
            out << ' ' << (it == cell.end() ? std::string("-") : format_value(it->second)) << " |";
        }
        out << '\n';
    }
}

}  // namespace omni::metrics
