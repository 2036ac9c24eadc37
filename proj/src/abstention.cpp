#include "wellbench/abstention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "wellbench/errors.hpp"

namespace wellbench {

void ReservationPolicy::validate() const {
    if (levels.empty()) throw ValidationError("reservation policy has no levels");
    if (mode == Mode::quantile) {
        double prev = 2.0;
        for (double level : levels) {
            if (!(level > 0.0 && level <= 1.0)) {
                throw ValidationError("reservation level must lie in (0, 1], got " +
                                      std::to_string(level));
            }
            if (level >= prev) {
                throw ValidationError("reservation levels must strictly decrease");
            }
            prev = level;
        }
    } else {
        for (double level : levels) {
            if (!(level >= 0.0 && level <= 1.0)) {
                throw ValidationError("g threshold must lie in [0, 1], got " +
                                      std::to_string(level));
            }
        }
    }
}

namespace {

void require_reservations(const std::vector<PredictionRecord>& records) {
    for (const PredictionRecord& r : records) {
        if (!r.reservation.has_value()) {
            throw ConfigError("record " + r.sample_id +
                              " carries no reservation output; heads trained "
                              "without the abstention output cannot be filtered");
        }
    }
}

}  // namespace

Selection select_confident(const std::vector<PredictionRecord>& records,
                           double level) {
    if (!(level > 0.0 && level <= 1.0)) {
        throw ValidationError("reservation level must lie in (0, 1], got " +
                              std::to_string(level));
    }
    require_reservations(records);

    const std::size_t n = records.size();
    // ceil(level * n) with a guard against the product landing a hair above
    // an integer it mathematically equals.
    const auto keep_n = static_cast<std::size_t>(
        std::ceil(level * static_cast<double>(n) - 1e-9));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return *records[a].reservation < *records[b].reservation;
    });

    Selection sel;
    sel.kept.assign(order.begin(),
                    order.begin() + static_cast<std::ptrdiff_t>(keep_n));
    sel.abstained.assign(order.begin() + static_cast<std::ptrdiff_t>(keep_n),
                         order.end());
    // Report both sides in input order.
    std::sort(sel.kept.begin(), sel.kept.end());
    std::sort(sel.abstained.begin(), sel.abstained.end());
    return sel;
}

Selection select_by_threshold(const std::vector<PredictionRecord>& records,
                              double g_max) {
    if (!(g_max >= 0.0 && g_max <= 1.0)) {
        throw ValidationError("g threshold must lie in [0, 1], got " +
                              std::to_string(g_max));
    }
    require_reservations(records);
    Selection sel;
    for (std::size_t i = 0; i < records.size(); ++i) {
        (*records[i].reservation <= g_max ? sel.kept : sel.abstained).push_back(i);
    }
    return sel;
}

MetricRow evaluate_records(const std::vector<PredictionRecord>& records,
                           const std::map<std::string, LabelVector>& gold,
                           const MetricSuite& suite) {
    if (records.empty()) throw EvaluationError("nothing to evaluate");
    if (suite.label_count < 1) throw ValidationError("label_count must be >= 1");

    if (suite.task == TaskKind::multi_label) {
        const auto n = static_cast<Eigen::Index>(records.size());
        const auto k = static_cast<Eigen::Index>(suite.label_count);
        Eigen::MatrixXi preds(n, k);
        Eigen::MatrixXi golds(n, k);
        for (Eigen::Index i = 0; i < n; ++i) {
            const PredictionRecord& r = records[static_cast<std::size_t>(i)];
            const auto it = gold.find(r.sample_id);
            if (it == gold.end()) {
                throw AlignmentError("no gold entry for sample " + r.sample_id);
            }
            if (r.task_kind != TaskKind::multi_label ||
                static_cast<Eigen::Index>(r.predicted_labels.size()) != k) {
                throw ShapeError("record " + r.sample_id +
                                 " does not carry a multi-label prediction of "
                                 "the expected width");
            }
            const LabelVector& gv = it->second;
            if (gv.task_kind != TaskKind::multi_label ||
                static_cast<Eigen::Index>(gv.values.size()) != k) {
                throw ShapeError("gold labels for " + r.sample_id +
                                 " do not match the expected width");
            }
            for (Eigen::Index j = 0; j < k; ++j) {
                preds(i, j) = r.predicted_labels[static_cast<std::size_t>(j)];
                golds(i, j) = gv.values[static_cast<std::size_t>(j)];
            }
        }
        return multilabel_metrics(preds, golds, suite.averaging);
    }

    std::vector<int> pred_classes;
    std::vector<int> gold_classes;
    pred_classes.reserve(records.size());
    gold_classes.reserve(records.size());
    for (const PredictionRecord& r : records) {
        const auto it = gold.find(r.sample_id);
        if (it == gold.end()) {
            throw AlignmentError("no gold entry for sample " + r.sample_id);
        }
        if (r.task_kind != TaskKind::multi_class || r.predicted_class < 0) {
            throw ShapeError("record " + r.sample_id +
                             " does not carry a class prediction");
        }
        if (it->second.task_kind != TaskKind::multi_class) {
            throw ShapeError("gold entry for " + r.sample_id + " is not a class");
        }
        pred_classes.push_back(r.predicted_class);
        gold_classes.push_back(it->second.class_index);
    }
    return multiclass_metrics(pred_classes, gold_classes, suite.label_count,
                              suite.averaging);
}

std::vector<LevelRow> selective_evaluate(
    const std::vector<PredictionRecord>& records,
    const std::map<std::string, LabelVector>& gold,
    const ReservationPolicy& policy, const MetricSuite& suite) {
    if (records.empty()) throw EvaluationError("nothing to evaluate");
    policy.validate();
    std::set<std::string> seen;
    for (const PredictionRecord& r : records) {
        if (!seen.insert(r.sample_id).second) {
            throw ValidationError("duplicate sample id: " + r.sample_id);
        }
    }

    std::vector<LevelRow> rows;
    rows.reserve(policy.levels.size());
    for (double level : policy.levels) {
        Selection sel;
        if (policy.mode == ReservationPolicy::Mode::threshold) {
            sel = select_by_threshold(records, level);
        } else if (level == 1.0) {
            // Identity: plain evaluation, valid even without g.
            sel.kept.resize(records.size());
            std::iota(sel.kept.begin(), sel.kept.end(), std::size_t{0});
        } else {
            sel = select_confident(records, level);
        }

        LevelRow row;
        row.reservation = level;
        row.kept_count = sel.kept.size();
        std::vector<PredictionRecord> kept;
        kept.reserve(sel.kept.size());
        for (std::size_t idx : sel.kept) {
            kept.push_back(records[idx]);
            row.kept_ids.push_back(records[idx].sample_id);
        }
        for (std::size_t idx : sel.abstained) {
            row.abstained_ids.push_back(records[idx].sample_id);
        }
        if (kept.empty()) {
            throw EvaluationError("reservation level " + std::to_string(level) +
                                  " keeps no records");
        }
        row.metrics = evaluate_records(kept, gold, suite);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace wellbench
