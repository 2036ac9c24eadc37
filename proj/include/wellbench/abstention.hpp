#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "wellbench/metrics.hpp"
#include "wellbench/modeling.hpp"
#include "wellbench/schema.hpp"

namespace wellbench {

// Reservation schedule for selective prediction. Quantile mode keeps the
// ceil(level * N) most confident records per level; threshold mode keeps
// records with g <= level instead.
struct ReservationPolicy {
    enum class Mode { quantile, threshold };

    Mode mode = Mode::quantile;
    std::vector<double> levels = {1.00, 0.95, 0.85, 0.75};

    // Quantile levels must lie in (0, 1] and strictly decrease; thresholds
    // must lie in [0, 1]. Throws ValidationError.
    void validate() const;
};

struct Selection {
    std::vector<std::size_t> kept;       // indices into the input order
    std::vector<std::size_t> abstained;
};

// Keeps the ceil(level * N) records with the smallest reservation g; ties
// keep input order. Requires every record to carry g (a head trained
// without the abstention output cannot be filtered).
Selection select_confident(const std::vector<PredictionRecord>& records,
                           double level);

// Keeps records with g <= g_max, input order preserved.
Selection select_by_threshold(const std::vector<PredictionRecord>& records,
                              double g_max);

struct MetricSuite {
    TaskKind task = TaskKind::multi_label;
    int label_count = 0;
    Averaging averaging = Averaging::macro;
};

// Full-set evaluation of prediction records against gold labels keyed by
// sample id. Throws AlignmentError when a record has no gold entry.
MetricRow evaluate_records(const std::vector<PredictionRecord>& records,
                           const std::map<std::string, LabelVector>& gold,
                           const MetricSuite& suite);

struct LevelRow {
    double reservation = 1.0;
    std::size_t kept_count = 0;
    MetricRow metrics;
    std::vector<std::string> kept_ids;
    std::vector<std::string> abstained_ids;
};

// One metric row per policy level over the kept subset. Level 1.0 is plain
// evaluation and never touches g, so SCE runs evaluate with levels = {1.0}.
std::vector<LevelRow> selective_evaluate(
    const std::vector<PredictionRecord>& records,
    const std::map<std::string, LabelVector>& gold,
    const ReservationPolicy& policy, const MetricSuite& suite);

}  // namespace wellbench
