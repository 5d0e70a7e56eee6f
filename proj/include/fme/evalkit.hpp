#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fme/error.hpp"

// Evaluation toolkit: confusion matrices, the percent metrics with their
// confidence interval, ROC/PR curves with AUC, and the 2-D PCA projection
// of penultimate features. Everything here is pure and double precision.

namespace fme::eval {

struct ConfusionMatrix {
    std::vector<std::vector<std::int64_t>> counts;  // [true][predicted]
    std::vector<std::string> class_names;

    int k() const { return static_cast<int>(counts.size()); }
    std::int64_t total() const {
        std::int64_t n = 0;
        for (const auto& row : counts)
            for (auto v : row) n += v;
        return n;
    }
};

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& preds, int K);

struct ClassMetrics {
    std::string name;
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    double acc = 0, sen = 0, pre = 0, f1 = 0;  // percent
    double f1_ci = 0;                          // 1.96 S.E. half-width, percent
};

struct MetricsReport {
    std::vector<ClassMetrics> per_class;
    double overall_acc = 0;  // trace/total, percent
    double macro_acc = 0, macro_sen = 0, macro_pre = 0, macro_f1 = 0;
    double macro_f1_ci = 0;
    std::vector<std::string> warnings;  // zero-denominator cells, reported as 0
    std::string notes;
};

// One-vs-rest per class: Sen = TP/(TP+FN), Pre = TP/(TP+FP),
// F1 = 2 Pre Sen / (Pre + Sen); overall Acc = trace/total; macro values are
// unweighted class means. Division by zero yields 0 with a warning.
MetricsReport metrics(const ConfusionMatrix& cm);

// Harmonic mean of two percent values (the F1 composition rule).
double f1_percent(double pre_percent, double sen_percent);

// 1.96 * sqrt(error (1 - error) / n).
double confidence_interval(double error_rate, std::int64_t n);

struct Curve {
    enum class Kind { roc, pr };
    Kind kind = Kind::roc;
    std::vector<double> threshold;  // descending
    std::vector<double> x;          // ROC: FPR, PR: recall
    std::vector<double> y;          // ROC: TPR, PR: precision
};

struct RocPr {
    Curve roc, pr;
    double auc_roc = 0;  // trapezoidal
    double auc_pr = 0;   // step interpolation (average precision)
};

// Threshold sweep over the distinct scores, descending. Requires at least
// one positive and one negative sample.
RocPr roc_pr(const std::vector<double>& scores, const std::vector<bool>& positive);

// One-vs-rest sweep for class `positive_class` of an (N x K) probability
// matrix stored row-major.
RocPr roc_pr_class(const std::vector<double>& probs, int K, const std::vector<int>& labels,
                   int positive_class);

struct PcaResult {
    std::vector<std::array<double, 2>> coords;   // N x 2 projection
    std::array<double, 2> explained{0, 0};       // top-2 covariance eigenvalues
    std::array<double, 2> explained_ratio{0, 0};
    bool degenerate = false;  // zero variance; coords forced to zero
};

// Mean-center, cyclic-Jacobi eigendecomposition of the covariance
// (tolerance 1e-10), project on the top-2 components. Sign convention:
// each component's largest-magnitude entry is positive.
PcaResult pca_project(const std::vector<std::vector<double>>& features);

// Cyclic Jacobi eigensolver for a symmetric matrix (row-major, n x n).
// Returns eigenvalues descending with matching eigenvectors as rows.
void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                  std::vector<double>& eigenvectors, double tol = 1e-10);

}  // namespace fme::eval
