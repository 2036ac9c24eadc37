#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wellbench/schema.hpp"

namespace wellbench {

// Character span into a post's text. Half-open [start, end).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string text;
};

struct AnnotatedPost {
    std::string id;
    std::string text;
    LabelVector gold;
    std::vector<Span> explanation_spans;
    bool truncated = false;  // set by prediction when over max_length
};

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> test;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
};

// Multi-label CSV: a text column plus six binary label columns named after
// the wellness dimensions (any order, matched case-insensitively). Labels
// come out in canonical base order.
std::vector<AnnotatedPost> load_multiwd(const std::string& path);

// Multi-class CSV: text, class label in {1..4}, explanation text, optional
// start/end offset columns. When only span text is given, offsets are
// recovered by first exact substring match.
std::vector<AnnotatedPost> load_wellxplain(const std::string& path);

struct DatasetStats {
    std::size_t sample_count = 0;
    double avg_words_per_post = 0.0;
};

// Words are maximal non-whitespace runs.
DatasetStats dataset_stats(const std::vector<AnnotatedPost>& posts);
std::size_t count_words(const std::string& text);

// Deterministic shuffle under seed, then prefix/suffix cut with
// |train| = round(train_fraction * N).
DatasetSplit split(const std::vector<AnnotatedPost>& posts,
                   double train_fraction, std::uint64_t seed);

std::string split_to_json(const DatasetSplit& s);
DatasetSplit split_from_json(const std::string& text);

// Canonical internal format: one JSON record per post preceded by a header
// line {"format":"posts","version":1,...}. All downstream modules consume
// this shape.
void write_posts_jsonl(const std::vector<AnnotatedPost>& posts,
                       TaskKind task_kind, const LabelSchema& schema,
                       const std::string& path);
std::vector<AnnotatedPost> read_posts_jsonl(const std::string& path,
                                            TaskKind* task_kind_out = nullptr,
                                            LabelSchema* schema_out = nullptr);

struct SyntheticSpec {
    std::size_t sample_count = 400;
    int class_count = 4;             // multi_class mode
    TaskKind task_kind = TaskKind::multi_class;
    std::uint64_t seed = 13;
};

// Keyword-separable synthetic corpus: each sample mixes filler words with
// a few class-specific keywords; the first keyword occurrence is the gold
// explanation span. Multi-label mode emits 6-dim binary labels instead.
std::vector<AnnotatedPost> make_synthetic_posts(const SyntheticSpec& spec);

}  // namespace wellbench
