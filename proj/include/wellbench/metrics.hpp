#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace wellbench {

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }
};

enum class Averaging { macro, weighted, micro };

std::string averaging_name(Averaging a);
Averaging averaging_from_name(const std::string& name);

struct MetricRow {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    double mcc = 0.0;
    Averaging averaging = Averaging::macro;
    std::int64_t support = 0;
};

// Standard binary formulas; every zero denominator yields 0 for that metric.
MetricRow binary_metrics(const ConfusionCounts& c);

// Binary prediction/gold matrices are N x K, entries 0/1. Per-label binary
// metrics combined by the chosen averaging; MCC is averaged per-label under
// macro/weighted and computed from pooled counts under micro.
MetricRow multilabel_metrics(const Eigen::MatrixXi& preds,
                             const Eigen::MatrixXi& gold,
                             Averaging averaging = Averaging::macro);

// Class sequences with values in [0, K). Accuracy is exact-match; P/R/F1
// are one-vs-rest per class then averaged; MCC comes from the full K x K
// contingency table.
MetricRow multiclass_metrics(const std::vector<int>& pred_classes,
                             const std::vector<int>& gold_classes, int k,
                             Averaging averaging = Averaging::macro);

// K x K contingency MCC (rows = gold, cols = predicted); 0 on degenerate
// denominators.
double multiclass_mcc(const Eigen::MatrixXi& table);

}  // namespace wellbench
