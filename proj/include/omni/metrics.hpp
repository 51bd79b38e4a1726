// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "omni/tensor.hpp"

namespace omni::stage2 {
class BaseModel;
}

namespace omni::metrics {

double rmse(const Tensor& pred, const Tensor& gt);

struct Counts {
    long tp = 0, fp = 0, fn = 0;
    Counts& operator+=(const Counts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

struct PRPoint {
    double threshold = 0, precision = 0, recall = 0, f = 0;
};

/// Precision is 1 when nothing is predicted and nothing is missed, recall is
/// 1 when there is nothing to find; F = 2PR/(P+R), 0 when P+R = 0.
PRPoint pr_from_counts(const Counts& c, double threshold);
/// Pixel-exact matching of pred > tau against a binary gt; throws on non-binary gt.
Counts confusion(const Tensor& pred, const Tensor& gt, double tau);
PRPoint pr_at_threshold(const Tensor& pred, const Tensor& gt, double tau);

/// 0.01, 0.02, ..., 0.99
const std::vector<double>& threshold_grid();

struct OdsResult {
    double threshold = 0, f = 0;
};
/// Best F of counts pooled over the dataset at one shared threshold.
OdsResult ods(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts);
/// Mean over images of each image's best F.
double ois(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts);
/// Trapezoidal area under the pooled precision envelope, recall in [0, 1].
double ap(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts);

struct GaussianStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
};

double frechet(const GaussianStats& a, const GaussianStats& b);

/// Maps [B,3,S,S] images to [B,d] features.
using Extractor = std::function<Tensor(const Tensor& images)>;
/// Unbiased covariance; +1e-6 I when there are fewer than d+1 images.
GaussianStats feature_stats(const std::vector<Tensor>& images, const Extractor& extractor, int batch = 32);
GaussianStats stats_from_features(const Eigen::MatrixXd& features);

/// Fixed-seed random conv features joined with the toy image encoder's pooled features.
Extractor toy_fid_extractor(const stage2::BaseModel& base);

/// Inner product of two unit vectors.
double clip_sim(std::span<const double> image_embedding, std::span<const double> text_embedding);
/// Mean clip_sim over (image, caption) pairs under the toy encoders.
double clip_score(const stage2::BaseModel& base, const std::vector<Tensor>& images, const std::vector<std::string>& captions);

struct Row {
    std::string metric, task, variant;
    double value = 0;
};

/// metric,task,variant,value with fixed six-decimal values.
void write_csv(const std::filesystem::path& file, const std::vector<Row>& rows);
/// One table per metric family: variants down, tasks across.
void write_markdown(const std::filesystem::path& file, const std::string& title, const std::vector<Row>& rows);
std::string format_value(double v);

}  // namespace omni::metrics
