#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "wellbench/errors.hpp"
#include "wellbench/ingest.hpp"

namespace wellbench {

struct TokenInfo {
    std::string text;
    std::size_t start = 0;
    std::size_t end = 0;
    bool special = false;
};

// One sample's attention snapshot. rows = queries, cols = keys; every row
// sums to 1 within tolerance.
struct AttentionRecord {
    std::string sample_id;
    std::vector<TokenInfo> tokens;
    Eigen::MatrixXd matrix;
    std::string provenance;
};

// Throws ValidationError on dimension mismatch, negative entries, rows not
// summing to 1 within row_sum_tol, or overlapping/unordered token offsets.
void validate_attention_record(const AttentionRecord& rec,
                               double row_sum_tol = 1e-5);

enum class ScoreAggregation { column_mean, cls_row, row_mean };

std::string aggregation_name(ScoreAggregation a);
ScoreAggregation aggregation_from_name(const std::string& name);

// Per-token attention received. Default: column mean of the matrix over
// non-special query rows. Throws DomainError when every token is special.
Eigen::VectorXd token_scores(const AttentionRecord& rec,
                             ScoreAggregation agg = ScoreAggregation::column_mean);

struct TopToken {
    int index = 0;
    double score = 0.0;
    std::size_t start = 0;
    std::size_t end = 0;
    std::string text;
};

struct ExplanationEstimate {
    std::string sample_id;
    std::vector<TopToken> top_tokens;  // scores non-increasing
    int k = 4;
};

// k highest-scoring non-special tokens; ties resolve toward the smaller
// index; fewer than k content tokens means all are returned.
ExplanationEstimate top_k_tokens(const Eigen::VectorXd& scores,
                                 const std::vector<TokenInfo>& tokens, int k = 4);

enum class OverlapMode {
    token_count,  // >= ceil(k_eff/2) of the returned tokens inside a span
    char_mass     // >= 50% of the returned tokens' characters inside spans
};

std::string overlap_mode_name(OverlapMode m);
OverlapMode overlap_mode_from_name(const std::string& name);

// A token lies within a span iff its character interval is fully contained.
// Throws EvaluationError on empty spans (sample unscorable).
bool overlaps_gold(const ExplanationEstimate& est, const std::vector<Span>& spans,
                   OverlapMode mode = OverlapMode::token_count);

// O/T over overlap flags; throws DomainError when flags is empty.
double ao_score(const std::vector<bool>& flags);

namespace detail {
int svd_rank_impl(const Eigen::MatrixXd& m, double rel_tol);
}

// Numerical rank: count of singular values above rel_tol * sigma_max.
// rel_tol < 0 selects the default max(m, n) * machine epsilon of the
// matrix's scalar type. Throws DomainError on non-finite entries.
template <typename Derived>
int svd_rank(const Eigen::MatrixBase<Derived>& m, double rel_tol = -1.0) {
    using Scalar = typename Derived::Scalar;
    if (rel_tol < 0.0) {
        rel_tol = static_cast<double>(std::max(m.rows(), m.cols())) *
                  static_cast<double>(Eigen::NumTraits<Scalar>::epsilon());
    }
    return detail::svd_rank_impl(m.template cast<double>(), rel_tol);
}

// Row-wise concatenation, e.g. stacking per-layer/per-head attention
// matrices before a rank analysis. All inputs must share a column count.
Eigen::MatrixXd stack_rows(const std::vector<Eigen::MatrixXd>& mats);

struct FidelityOptions {
    ScoreAggregation aggregation = ScoreAggregation::column_mean;
    int top_k = 4;
    OverlapMode overlap_mode = OverlapMode::token_count;
    double rel_tol = -1.0;  // negative = default rule
};

struct SampleFidelity {
    std::string sample_id;
    bool scorable = false;  // gold spans present
    bool overlap = false;
    int rank = 0;
};

struct FidelityResult {
    std::optional<double> ao;  // absent when no sample carries gold spans
    double avg_rank = 0.0;
    std::vector<SampleFidelity> per_sample;
    std::size_t scored_count = 0;
    std::size_t unscorable_count = 0;
};

// Per-sample overlap + rank plus dataset-level AO and mean rank. Every
// record's sample_id must appear in gold_spans (empty vector = unscorable).
FidelityResult fidelity_report(const std::vector<AttentionRecord>& records,
                               const std::map<std::string, std::vector<Span>>& gold_spans,
                               const FidelityOptions& options = {});

enum class MapFormat { terminal, html };

// Text with per-token intensity highlighting plus gold-span underlining.
std::string render_attention_map(const AttentionRecord& rec,
                                 const Eigen::VectorXd& scores,
                                 const std::vector<Span>& gold_spans,
                                 MapFormat format);

// Attention dump contract: one binary matrix file per sample (magic "WBAT",
// u32 version, u32 rows, u32 cols, row-major float32, little-endian) plus a
// JSON-lines index with sample_id, tokens, offsets, special flags, and
// provenance. External models interoperate through these files.
void write_attention_dumps(const std::vector<AttentionRecord>& records,
                           const std::string& dir,
                           const std::string& index_path);
std::vector<AttentionRecord> read_attention_dumps(const std::string& index_path);

// Rank tolerance matching float32-quantized dump data.
double dump_rank_rel_tol(Eigen::Index rows, Eigen::Index cols);

}  // namespace wellbench
