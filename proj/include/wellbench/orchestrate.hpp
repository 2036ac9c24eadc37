#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wellbench/abstention.hpp"
#include "wellbench/attention.hpp"
#include "wellbench/ingest.hpp"
#include "wellbench/llm.hpp"
#include "wellbench/metrics.hpp"
#include "wellbench/modeling.hpp"
#include "wellbench/schema.hpp"

namespace wellbench {

struct DatasetConfig {
    std::string kind = "synthetic";  // multiwd | wellxplain | posts | synthetic
    std::string path;                // CSV / posts-JSONL locator
    SyntheticSpec synthetic;
    double train_fraction = 0.8;
};

struct ModelConfig {
    std::string kind = "reference";  // reference | import
    ReferenceEncoderConfig reference;
    std::string import_predictions;  // predictions JSONL
    std::string import_attention;    // optional attention dump index
};

struct AttentionConfig {
    bool enabled = true;
    bool dump = true;  // persist binary matrices + index per seed
    FidelityOptions fidelity;
};

struct LlmConfig {
    int shots_per_class = 0;
    std::uint64_t shot_seed = 7;
    std::size_t limit = 0;  // 0 = every test post
    ProviderConfig provider;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    TaskKind task_kind = TaskKind::multi_label;
    int label_count = 6;
    ModelConfig model;
    LossKind loss = LossKind::sce;
    std::vector<double> reservation_levels = {1.00, 0.95, 0.85, 0.75};
    std::vector<std::uint64_t> seeds = {200, 345, 546};
    int epochs = 5;
    int warmup_epochs = 1;  // cross-entropy epochs before the gambler's loss
    double learning_rate = 1e-5;
    int batch_size = 32;
    int hidden_dim = 64;
    int max_length = 64;
    bool fine_tune_encoder = false;
    AttentionConfig attention;
    LlmConfig llm;
    Averaging averaging = Averaging::macro;
    std::string output_dir = "runs";
};

// Declarative config document. Missing keys take the defaults above;
// unknown keys are rejected so typos cannot silently change a run.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);

// "dotted.path=value" override; the value parses as JSON when it can and
// falls back to a bare string.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

// Stable 16-hex-digit hash of the resolved config, excluding output_dir.
std::string config_hash(const ExperimentConfig& cfg);

struct ReportRow {
    std::uint64_t seed = 0;
    double reservation = 1.0;
    std::size_t kept_count = 0;
    MetricRow metrics;
    std::optional<double> ao;
    std::optional<double> avg_rank;
};

struct ReportAggregate {
    double reservation = 1.0;
    MetricRow metrics;  // arithmetic mean over seed rows
    std::optional<double> ao;
    std::optional<double> avg_rank;
};

struct EvaluationReport {
    std::string config_hash;
    std::string model_id;
    std::string loss;
    int label_count = 0;
    std::string dataset;
    std::vector<std::uint64_t> seeds;
    std::vector<double> levels;
    std::vector<ReportRow> rows;          // |seeds| x |levels|
    std::vector<ReportAggregate> aggregates;
};

std::string report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const std::string& text);

// Full pipeline per seed: load -> merge -> split -> train (or import) ->
// predict -> selective evaluation -> fidelity. Artifacts land under
// output_dir/<config-hash>/: resolved config, per-seed checkpoints,
// predictions, attention dumps, metrics, and report.json (timestamp-free,
// so identical configs reproduce it bitwise). A stage failure persists a
// failure manifest naming the stage, then rethrows.
EvaluationReport run_experiment(const ExperimentConfig& cfg);

// Interop surface for externally produced predictions.
struct ImportResult {
    std::vector<PredictionRecord> records;
    std::vector<std::pair<std::string, std::string>> rejected;  // id, reason
};
ImportResult import_predictions(const std::string& path);
void write_predictions_jsonl(const std::vector<PredictionRecord>& records,
                             int label_count, const std::string& path);

enum class ReportFormat { markdown, csv };

// Deterministic rendering ordered by (model, loss, label_count,
// reservation); numbers fixed at 2 decimals.
std::string render_report(const std::vector<EvaluationReport>& reports,
                          ReportFormat format);

// Prompted-model counterpart of run_experiment: build shots from the train
// split, prompt every test post through the configured transport, evaluate
// with format failures scored as wrong, and persist outcomes + report.
struct LlmRunReport {
    std::string config_hash;
    std::string provider;
    std::string template_id;
    std::size_t sample_count = 0;
    LlmEvaluation evaluation;
};

LlmRunReport run_llm_experiment(const ExperimentConfig& cfg);
std::string render_llm_report(const LlmRunReport& report);

}  // namespace wellbench
