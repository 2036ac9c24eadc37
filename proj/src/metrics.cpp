#include "wellbench/metrics.hpp"

#include <cmath>

#include "wellbench/errors.hpp"

namespace wellbench {

std::string averaging_name(Averaging a) {
    switch (a) {
        case Averaging::macro: return "macro";
        case Averaging::weighted: return "weighted";
        case Averaging::micro: return "micro";
    }
    return "macro";
}

Averaging averaging_from_name(const std::string& name) {
    if (name == "macro") return Averaging::macro;
    if (name == "weighted") return Averaging::weighted;
    if (name == "micro") return Averaging::micro;
    throw ConfigError("unknown averaging mode: " + name);
}

namespace {

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

double binary_mcc(const ConfusionCounts& c) {
    const double tp = static_cast<double>(c.tp);
    const double fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn);
    const double tn = static_cast<double>(c.tn);
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (den == 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(den);
}

}  // namespace

MetricRow binary_metrics(const ConfusionCounts& c) {
    MetricRow row;
    const double tp = static_cast<double>(c.tp);
    row.precision = safe_div(tp, tp + static_cast<double>(c.fp));
    row.recall = safe_div(tp, tp + static_cast<double>(c.fn));
    row.f1 = safe_div(2.0 * row.precision * row.recall, row.precision + row.recall);
    row.accuracy = safe_div(tp + static_cast<double>(c.tn),
                            static_cast<double>(c.total()));
    row.mcc = binary_mcc(c);
    row.support = c.tp + c.fn;
    return row;
}

MetricRow multilabel_metrics(const Eigen::MatrixXi& preds,
                             const Eigen::MatrixXi& gold, Averaging averaging) {
    if (preds.rows() != gold.rows() || preds.cols() != gold.cols()) {
        throw ShapeError("prediction/gold shape mismatch: " +
                         std::to_string(preds.rows()) + "x" +
                         std::to_string(preds.cols()) + " vs " +
                         std::to_string(gold.rows()) + "x" +
                         std::to_string(gold.cols()));
    }
    if (preds.rows() == 0 || preds.cols() == 0) {
        throw ShapeError("multilabel_metrics requires a non-empty matrix");
    }
    const Eigen::Index n = preds.rows();
    const Eigen::Index k = preds.cols();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            if ((preds(i, j) & ~1) != 0 || (gold(i, j) & ~1) != 0) {
                throw ValidationError(
                    "label matrices must be binary indicators; entry (" +
                    std::to_string(i) + "," + std::to_string(j) + ") is not");
            }
        }
    }

    std::vector<ConfusionCounts> per_label(static_cast<std::size_t>(k));
    for (Eigen::Index j = 0; j < k; ++j) {
        auto& c = per_label[static_cast<std::size_t>(j)];
        for (Eigen::Index i = 0; i < n; ++i) {
            const bool p = preds(i, j) != 0;
            const bool g = gold(i, j) != 0;
            if (p && g) ++c.tp;
            else if (p && !g) ++c.fp;
            else if (!p && g) ++c.fn;
            else ++c.tn;
        }
    }

    MetricRow out;
    out.averaging = averaging;
    out.support = n;

    if (averaging == Averaging::micro) {
        ConfusionCounts pooled;
        for (const auto& c : per_label) {
            pooled.tp += c.tp;
            pooled.fp += c.fp;
            pooled.fn += c.fn;
            pooled.tn += c.tn;
        }
        MetricRow pooled_row = binary_metrics(pooled);
        out.precision = pooled_row.precision;
        out.recall = pooled_row.recall;
        out.f1 = pooled_row.f1;
        out.accuracy = pooled_row.accuracy;
        out.mcc = pooled_row.mcc;
        return out;
    }

    std::vector<double> weights(static_cast<std::size_t>(k), 1.0 / static_cast<double>(k));
    if (averaging == Averaging::weighted) {
        double total_pos = 0.0;
        for (const auto& c : per_label) total_pos += static_cast<double>(c.tp + c.fn);
        for (std::size_t j = 0; j < per_label.size(); ++j) {
            const double pos = static_cast<double>(per_label[j].tp + per_label[j].fn);
            weights[j] = total_pos == 0.0 ? 0.0 : pos / total_pos;
        }
    }

    for (std::size_t j = 0; j < per_label.size(); ++j) {
        const MetricRow r = binary_metrics(per_label[j]);
        out.precision += weights[j] * r.precision;
        out.recall += weights[j] * r.recall;
        out.f1 += weights[j] * r.f1;
        out.accuracy += weights[j] * r.accuracy;
        out.mcc += weights[j] * r.mcc;
    }
    return out;
}

double multiclass_mcc(const Eigen::MatrixXi& table) {
    const Eigen::Index k = table.rows();
    if (table.cols() != k) throw ShapeError("contingency table must be square");
    double s = 0.0;
    double c = 0.0;
    Eigen::VectorXd t = Eigen::VectorXd::Zero(k);  // gold totals per class
    Eigen::VectorXd p = Eigen::VectorXd::Zero(k);  // predicted totals per class
    for (Eigen::Index i = 0; i < k; ++i) {
        c += table(i, i);
        for (Eigen::Index j = 0; j < k; ++j) {
            const double v = table(i, j);
            s += v;
            t(i) += v;
            p(j) += v;
        }
    }
    const double num = c * s - t.dot(p);
    const double den1 = s * s - p.squaredNorm();
    const double den2 = s * s - t.squaredNorm();
    if (den1 <= 0.0 || den2 <= 0.0) return 0.0;
    return num / std::sqrt(den1 * den2);
}

MetricRow multiclass_metrics(const std::vector<int>& pred_classes,
                             const std::vector<int>& gold_classes, int k,
                             Averaging averaging) {
    if (pred_classes.size() != gold_classes.size()) {
        throw ShapeError("prediction/gold length mismatch");
    }
    if (pred_classes.empty()) {
        throw ShapeError("multiclass_metrics requires at least one sample");
    }
    if (k < 2) throw ShapeError("multiclass_metrics requires k >= 2");

    Eigen::MatrixXi table = Eigen::MatrixXi::Zero(k, k);
    for (std::size_t i = 0; i < pred_classes.size(); ++i) {
        const int p = pred_classes[i];
        const int g = gold_classes[i];
        if (p < 0 || p >= k) {
            throw ValidationError("predicted class " + std::to_string(p) +
                                  " out of range [0, " + std::to_string(k) + ")");
        }
        if (g < 0 || g >= k) {
            throw ValidationError("gold class " + std::to_string(g) +
                                  " out of range [0, " + std::to_string(k) + ")");
        }
        table(g, p) += 1;
    }

    const double n = static_cast<double>(pred_classes.size());

    MetricRow out;
    out.averaging = averaging;
    out.support = static_cast<std::int64_t>(pred_classes.size());
    out.accuracy = static_cast<double>(table.trace()) / n;
    out.mcc = multiclass_mcc(table);

    std::vector<ConfusionCounts> per_class(static_cast<std::size_t>(k));
    for (int cls = 0; cls < k; ++cls) {
        auto& c = per_class[static_cast<std::size_t>(cls)];
        for (int g = 0; g < k; ++g) {
            for (int p = 0; p < k; ++p) {
                const std::int64_t v = table(g, p);
                if (g == cls && p == cls) c.tp += v;
                else if (g == cls) c.fn += v;
                else if (p == cls) c.fp += v;
                else c.tn += v;
            }
        }
    }

    if (averaging == Averaging::micro) {
        ConfusionCounts pooled;
        for (const auto& c : per_class) {
            pooled.tp += c.tp;
            pooled.fp += c.fp;
            pooled.fn += c.fn;
            pooled.tn += c.tn;
        }
        const MetricRow pooled_row = binary_metrics(pooled);
        out.precision = pooled_row.precision;
        out.recall = pooled_row.recall;
        out.f1 = pooled_row.f1;
        return out;
    }

    std::vector<double> weights(static_cast<std::size_t>(k),
                                1.0 / static_cast<double>(k));
    if (averaging == Averaging::weighted) {
        for (int cls = 0; cls < k; ++cls) {
            const auto& c = per_class[static_cast<std::size_t>(cls)];
            weights[static_cast<std::size_t>(cls)] =
                static_cast<double>(c.tp + c.fn) / n;
        }
    }
    for (std::size_t j = 0; j < per_class.size(); ++j) {
        const MetricRow r = binary_metrics(per_class[j]);
        out.precision += weights[j] * r.precision;
        out.recall += weights[j] * r.recall;
        out.f1 += weights[j] * r.f1;
    }
    return out;
}

}  // namespace wellbench
