#include "fme/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fme::eval {

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& preds, int K) {
    if (labels.size() != preds.size())
        throw ContractError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                            std::to_string(preds.size()) + " predictions");
    if (K < 1) throw ContractError("confusion: K must be positive");
    ConfusionMatrix cm;
    cm.counts.assign(static_cast<size_t>(K), std::vector<std::int64_t>(static_cast<size_t>(K), 0));
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= K || preds[i] < 0 || preds[i] >= K)
            throw ContractError("confusion: entry outside [0," + std::to_string(K) + ")");
        cm.counts[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])]++;
    }
    cm.class_names.resize(static_cast<size_t>(K));
    for (int c = 0; c < K; ++c) cm.class_names[static_cast<size_t>(c)] = "class" + std::to_string(c);
    return cm;
}

double f1_percent(double pre_percent, double sen_percent) {
    if (pre_percent + sen_percent == 0) return 0;
    return 2.0 * pre_percent * sen_percent / (pre_percent + sen_percent);
}

double confidence_interval(double error_rate, std::int64_t n) {
    if (n < 1) throw ContractError("confidence_interval: n must be >= 1");
    if (error_rate < 0.0 || error_rate > 1.0)
        throw ContractError("confidence_interval: error rate outside [0,1]");
    return 1.96 * std::sqrt(error_rate * (1.0 - error_rate) / static_cast<double>(n));
}

MetricsReport metrics(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    if (total == 0) throw ContractError("metrics: confusion matrix is empty");
    const int K = cm.k();

    MetricsReport report;
    std::int64_t trace = 0;
    for (int c = 0; c < K; ++c) trace += cm.counts[static_cast<size_t>(c)][static_cast<size_t>(c)];
    report.overall_acc = 100.0 * (static_cast<double>(trace) / static_cast<double>(total));

    auto ratio_or_zero = [&](std::int64_t num, std::int64_t den, const std::string& what) {
        if (den == 0) {
            report.warnings.push_back(what + " undefined (0/0), reported 0");
            return 0.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };

    double acc_sum = 0, sen_sum = 0, pre_sum = 0, f1_sum = 0;
    for (int c = 0; c < K; ++c) {
        ClassMetrics m;
        m.name = c < static_cast<int>(cm.class_names.size()) ? cm.class_names[static_cast<size_t>(c)]
                                                             : "class" + std::to_string(c);
        m.tp = cm.counts[static_cast<size_t>(c)][static_cast<size_t>(c)];
        std::int64_t row = 0, col = 0;
        for (int j = 0; j < K; ++j) {
            row += cm.counts[static_cast<size_t>(c)][static_cast<size_t>(j)];
            col += cm.counts[static_cast<size_t>(j)][static_cast<size_t>(c)];
        }
        m.fn = row - m.tp;
        m.fp = col - m.tp;
        m.tn = total - m.tp - m.fn - m.fp;
        m.acc = 100.0 * (static_cast<double>(m.tp + m.tn) / static_cast<double>(total));
        m.sen = 100.0 * ratio_or_zero(m.tp, m.tp + m.fn, m.name + ": sensitivity");
        m.pre = 100.0 * ratio_or_zero(m.tp, m.tp + m.fp, m.name + ": precision");
        m.f1 = f1_percent(m.pre, m.sen);
        m.f1_ci = 100.0 * confidence_interval(1.0 - m.f1 / 100.0, total);
        acc_sum += m.acc;
        sen_sum += m.sen;
        pre_sum += m.pre;
        f1_sum += m.f1;
        report.per_class.push_back(std::move(m));
    }
    report.macro_acc = acc_sum / K;
    report.macro_sen = sen_sum / K;
    report.macro_pre = pre_sum / K;
    report.macro_f1 = f1_sum / K;
    report.macro_f1_ci = 100.0 * confidence_interval(1.0 - report.macro_f1 / 100.0, total);
    report.notes =
        "per-class metrics are one-vs-rest; macro values are unweighted class means; "
        "PR-AUC uses step interpolation; CI is 1.96*sqrt(err(1-err)/n)";
    return report;
}

RocPr roc_pr(const std::vector<double>& scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size())
        throw ContractError("roc_pr: scores/labels length mismatch");
    std::int64_t P = 0, N = 0;
    for (bool p : positive) (p ? P : N)++;
    if (P == 0 || N == 0) throw CurveError("roc_pr: need at least one positive and one negative");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    RocPr out;
    out.roc.kind = Curve::Kind::roc;
    out.pr.kind = Curve::Kind::pr;
    out.roc.threshold.push_back(std::numeric_limits<double>::infinity());
    out.roc.x.push_back(0.0);
    out.roc.y.push_back(0.0);

    std::int64_t tp = 0, fp = 0;
    double auc_roc = 0, auc_pr = 0;
    double prev_fpr = 0, prev_tpr = 0, prev_recall = 0;
    size_t i = 0;
    while (i < order.size()) {
        const double threshold = scores[order[i]];
        // absorb the whole tie group before emitting a point
        while (i < order.size() && scores[order[i]] == threshold) {
            (positive[order[i]] ? tp : fp)++;
            ++i;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(P);
        const double fpr = static_cast<double>(fp) / static_cast<double>(N);
        const double recall = tpr;
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);

        out.roc.threshold.push_back(threshold);
        out.roc.x.push_back(fpr);
        out.roc.y.push_back(tpr);
        auc_roc += (fpr - prev_fpr) * 0.5 * (tpr + prev_tpr);

        out.pr.threshold.push_back(threshold);
        out.pr.x.push_back(recall);
        out.pr.y.push_back(precision);
        auc_pr += (recall - prev_recall) * precision;  // step interpolation

        prev_fpr = fpr;
        prev_tpr = tpr;
        prev_recall = recall;
    }
    out.auc_roc = auc_roc;
    out.auc_pr = auc_pr;
    return out;
}

RocPr roc_pr_class(const std::vector<double>& probs, int K, const std::vector<int>& labels,
                   int positive_class) {
    if (K < 1 || positive_class < 0 || positive_class >= K)
        throw ContractError("roc_pr_class: bad class index");
    if (probs.size() != labels.size() * static_cast<size_t>(K))
        throw ContractError("roc_pr_class: probability matrix extent mismatch");
    std::vector<double> scores(labels.size());
    std::vector<bool> positive(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        scores[i] = probs[i * static_cast<size_t>(K) + static_cast<size_t>(positive_class)];
        positive[i] = labels[i] == positive_class;
    }
    return roc_pr(scores, positive);
}

void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                  std::vector<double>& eigenvectors, double tol) {
    std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;

    auto off_norm = [&] {
        double s = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s += a[static_cast<size_t>(i) * n + j] * a[static_cast<size_t>(i) * n + j];
        return std::sqrt(2.0 * s);
    };

    for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p) * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p) * n + p];
                const double aqq = a[static_cast<size_t>(q) * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k) * n + p];
                    const double akq = a[static_cast<size_t>(k) * n + q];
                    a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p) * n + k];
                    const double aqk = a[static_cast<size_t>(q) * n + k];
                    a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v[static_cast<size_t>(k) * n + p];
                    const double vkq = v[static_cast<size_t>(k) * n + q];
                    v[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }

    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) {
        return a[static_cast<size_t>(x) * n + x] > a[static_cast<size_t>(y) * n + y];
    });

    eigenvalues.assign(static_cast<size_t>(n), 0.0);
    eigenvectors.assign(static_cast<size_t>(n) * n, 0.0);
    for (int r = 0; r < n; ++r) {
        const int src = idx[static_cast<size_t>(r)];
        eigenvalues[static_cast<size_t>(r)] = a[static_cast<size_t>(src) * n + src];
        for (int k = 0; k < n; ++k)
            eigenvectors[static_cast<size_t>(r) * n + k] = v[static_cast<size_t>(k) * n + src];
    }
}

PcaResult pca_project(const std::vector<std::vector<double>>& features) {
    const int N = static_cast<int>(features.size());
    if (N < 3) throw ContractError("pca_project: need at least 3 samples");
    const int D = static_cast<int>(features.front().size());
    if (D < 2) throw ContractError("pca_project: need at least 2 dimensions");
    for (const auto& row : features)
        if (static_cast<int>(row.size()) != D)
            throw ContractError("pca_project: ragged feature matrix");

    std::vector<double> mean(static_cast<size_t>(D), 0.0);
    for (const auto& row : features)
        for (int j = 0; j < D; ++j) mean[static_cast<size_t>(j)] += row[static_cast<size_t>(j)];
    for (auto& m : mean) m /= N;

    std::vector<double> centered(static_cast<size_t>(N) * D);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j)
            centered[static_cast<size_t>(i) * D + j] =
                features[static_cast<size_t>(i)][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];

    std::vector<double> cov(static_cast<size_t>(D) * D, 0.0);
    for (int i = 0; i < N; ++i)
        for (int a = 0; a < D; ++a) {
            const double va = centered[static_cast<size_t>(i) * D + a];
            if (va == 0.0) continue;
            for (int b = a; b < D; ++b)
                cov[static_cast<size_t>(a) * D + b] += va * centered[static_cast<size_t>(i) * D + b];
        }
    for (int a = 0; a < D; ++a)
        for (int b = a; b < D; ++b) {
            cov[static_cast<size_t>(a) * D + b] /= (N - 1);
            cov[static_cast<size_t>(b) * D + a] = cov[static_cast<size_t>(a) * D + b];
        }

    PcaResult out;
    double total_var = 0;
    for (int a = 0; a < D; ++a) total_var += cov[static_cast<size_t>(a) * D + a];
    if (total_var < 1e-12) {
        out.degenerate = true;
        out.coords.assign(static_cast<size_t>(N), {0.0, 0.0});
        return out;
    }

    std::vector<double> eigenvalues, eigenvectors;
    jacobi_eigen(cov, D, eigenvalues, eigenvectors, 1e-10);

    // sign convention: the largest-magnitude entry of each component is positive
    for (int r = 0; r < 2; ++r) {
        int arg = 0;
        for (int k = 1; k < D; ++k)
            if (std::abs(eigenvectors[static_cast<size_t>(r) * D + k]) >
                std::abs(eigenvectors[static_cast<size_t>(r) * D + arg]))
                arg = k;
        if (eigenvectors[static_cast<size_t>(r) * D + arg] < 0)
            for (int k = 0; k < D; ++k) eigenvectors[static_cast<size_t>(r) * D + k] *= -1.0;
    }

    out.explained = {eigenvalues[0], eigenvalues[1]};
    out.explained_ratio = {eigenvalues[0] / total_var, eigenvalues[1] / total_var};
    out.coords.assign(static_cast<size_t>(N), {0.0, 0.0});
    for (int i = 0; i < N; ++i)
        for (int r = 0; r < 2; ++r) {
            double dot = 0;
            for (int k = 0; k < D; ++k)
                dot += centered[static_cast<size_t>(i) * D + k] *
                       eigenvectors[static_cast<size_t>(r) * D + k];
            out.coords[static_cast<size_t>(i)][static_cast<size_t>(r)] = dot;
        }
    return out;
}

}  // namespace fme::eval
