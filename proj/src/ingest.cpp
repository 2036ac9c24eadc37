#include "wellbench/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wellbench/csv.hpp"
#include "wellbench/errors.hpp"
#include "wellbench/rng.hpp"

namespace wellbench {

using nlohmann::json;

namespace {

std::string ascii_lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
        return static_cast<char>(std::tolower(c));
    });
    return out;
}

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Case-insensitive column lookup over a list of accepted names.
int find_column(const CsvTable& table, const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < table.header.size(); ++i) {
        const std::string h = ascii_lower(trim(table.header[i]));
        for (const std::string& n : names) {
            if (h == ascii_lower(n)) return static_cast<int>(i);
        }
    }
    return -1;
}

int require_column(const CsvTable& table, const std::vector<std::string>& names,
                   const std::string& what) {
    const int idx = find_column(table, names);
    if (idx < 0) {
        std::ostringstream msg;
        msg << "missing " << what << " column (accepted names:";
        for (const std::string& n : names) msg << " '" << n << "'";
        msg << ")";
        throw FormatError(msg.str());
    }
    return idx;
}

int parse_binary_cell(const std::string& cell, std::size_t row,
                      const std::string& column) {
    const std::string t = trim(cell);
    if (t == "0") return 0;
    if (t == "1") return 1;
    throw ValidationError("row " + std::to_string(row) + ": label column '" +
                          column + "' must be 0 or 1, got '" + t + "'");
}

json span_to_json(const Span& s) {
    return json{{"start", s.start}, {"end", s.end}, {"text", s.text}};
}

Span span_from_json(const json& j) {
    Span s;
    s.start = j.at("start").get<std::size_t>();
    s.end = j.at("end").get<std::size_t>();
    s.text = j.at("text").get<std::string>();
    return s;
}

void check_span(const Span& s, const std::string& text, const std::string& where) {
    if (s.end < s.start || s.end > text.size()) {
        throw SpanAlignError(where + ": span [" + std::to_string(s.start) + ", " +
                             std::to_string(s.end) + ") exceeds text of length " +
                             std::to_string(text.size()));
    }
    if (text.substr(s.start, s.end - s.start) != s.text) {
        throw SpanAlignError(where + ": span text does not match the slice at [" +
                             std::to_string(s.start) + ", " +
                             std::to_string(s.end) + ")");
    }
}

}  // namespace

std::vector<AnnotatedPost> load_multiwd(const std::string& path) {
    const CsvTable table = read_csv_file(path);
    const int text_col = require_column(table, {"text", "post"}, "text");
    // One binary column per wellness dimension, matched by code or display
    // name in any order; output follows the canonical base order.
    std::vector<int> label_cols;
    for (Dimension d : base_dimensions()) {
        label_cols.push_back(require_column(
            table, {dimension_code(d), dimension_display_name(d)},
            "'" + dimension_display_name(d) + "' label"));
    }

    std::vector<AnnotatedPost> posts;
    posts.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::size_t human_row = r + 1;  // 1-based data row
        AnnotatedPost post;
        post.id = "multiwd-" + std::to_string(human_row);
        post.text = row[static_cast<std::size_t>(text_col)];
        if (trim(post.text).empty()) {
            throw ValidationError("row " + std::to_string(human_row) +
                                  ": empty text");
        }
        std::vector<std::uint8_t> values;
        values.reserve(label_cols.size());
        for (std::size_t i = 0; i < label_cols.size(); ++i) {
            const int v = parse_binary_cell(
                row[static_cast<std::size_t>(label_cols[i])], human_row,
                dimension_display_name(base_dimensions()[i]));
            values.push_back(static_cast<std::uint8_t>(v));
        }
        post.gold = LabelVector::multi_label(std::move(values));
        posts.push_back(std::move(post));
    }
    return posts;
}

std::vector<AnnotatedPost> load_wellxplain(const std::string& path) {
    const CsvTable table = read_csv_file(path);
    const int text_col = require_column(table, {"text", "post"}, "text");
    const int label_col =
        require_column(table, {"aspects", "aspect", "label", "class"}, "class label");
    const int expl_col = require_column(
        table, {"explanations", "explanation", "explanation_text"}, "explanation");
    // Optional explicit offsets; when absent the span is recovered by first
    // exact substring match.
    const int start_col = find_column(table, {"start", "char_start"});
    const int end_col = find_column(table, {"end", "char_end"});

    std::vector<AnnotatedPost> posts;
    posts.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::size_t human_row = r + 1;
        const std::string where = "row " + std::to_string(human_row);
        AnnotatedPost post;
        post.id = "wellxplain-" + std::to_string(human_row);
        post.text = row[static_cast<std::size_t>(text_col)];
        if (trim(post.text).empty()) {
            throw ValidationError(where + ": empty text");
        }

        const std::string label_cell = trim(row[static_cast<std::size_t>(label_col)]);
        int cls = 0;
        try {
            std::size_t used = 0;
            cls = std::stoi(label_cell, &used);
            if (used != label_cell.size()) throw std::invalid_argument(label_cell);
        } catch (const std::exception&) {
            throw ValidationError(where + ": class label must be an integer, got '" +
                                  label_cell + "'");
        }
        if (cls < 1 || cls > 4) {
            throw ValidationError(where + ": class label must be in {1..4}, got " +
                                  std::to_string(cls));
        }
        post.gold = LabelVector::multi_class(cls - 1);

        const std::string expl = row[static_cast<std::size_t>(expl_col)];
        if (trim(expl).empty()) {
            throw ValidationError(where + ": empty explanation span");
        }
        Span span;
        span.text = expl;
        bool have_offsets = false;
        if (start_col >= 0 && end_col >= 0) {
            const std::string sc = trim(row[static_cast<std::size_t>(start_col)]);
            const std::string ec = trim(row[static_cast<std::size_t>(end_col)]);
            if (!sc.empty() && !ec.empty()) {
                try {
                    span.start = static_cast<std::size_t>(std::stoull(sc));
                    span.end = static_cast<std::size_t>(std::stoull(ec));
                } catch (const std::exception&) {
                    throw ValidationError(where + ": offsets must be integers");
                }
                have_offsets = true;
            }
        }
        if (!have_offsets) {
            const std::size_t pos = post.text.find(expl);
            if (pos == std::string::npos) {
                throw SpanAlignError(where +
                                     ": explanation is not a substring of the post");
            }
            span.start = pos;
            span.end = pos + expl.size();
        }
        check_span(span, post.text, where);
        post.explanation_spans.push_back(std::move(span));
        posts.push_back(std::move(post));
    }
    return posts;
}

std::size_t count_words(const std::string& text) {
    std::size_t n = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++n;
        }
    }
    return n;
}

DatasetStats dataset_stats(const std::vector<AnnotatedPost>& posts) {
    DatasetStats stats;
    stats.sample_count = posts.size();
    if (posts.empty()) return stats;
    std::size_t words = 0;
    for (const AnnotatedPost& p : posts) words += count_words(p.text);
    stats.avg_words_per_post =
        static_cast<double>(words) / static_cast<double>(posts.size());
    return stats;
}

DatasetSplit split(const std::vector<AnnotatedPost>& posts, double train_fraction,
                   std::uint64_t seed) {
    if (posts.size() < 2) {
        throw ValidationError("split requires at least 2 posts, got " +
                              std::to_string(posts.size()));
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ValidationError("train_fraction must be in (0, 1)");
    }
    std::set<std::string> seen;
    for (const AnnotatedPost& p : posts) {
        if (!seen.insert(p.id).second) {
            throw ValidationError("duplicate sample id: " + p.id);
        }
    }

    std::vector<std::size_t> order(posts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(posts.size())));

    DatasetSplit s;
    s.seed = seed;
    s.train_fraction = train_fraction;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? s.train : s.test).push_back(posts[order[i]].id);
    }
    return s;
}

std::string split_to_json(const DatasetSplit& s) {
    json j;
    j["format"] = "split";
    j["version"] = 1;
    j["seed"] = s.seed;
    j["train_fraction"] = s.train_fraction;
    j["train"] = s.train;
    j["test"] = s.test;
    return j.dump();
}

DatasetSplit split_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("split is not valid JSON: ") + e.what());
    }
    if (j.value("format", "") != "split" || j.value("version", 0) != 1) {
        throw FormatError("not a version-1 split document");
    }
    DatasetSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_fraction = j.at("train_fraction").get<double>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
}

void write_posts_jsonl(const std::vector<AnnotatedPost>& posts, TaskKind task_kind,
                       const LabelSchema& schema, const std::string& path) {
    schema.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);

    json header;
    header["format"] = "posts";
    header["version"] = 1;
    header["task"] = task_kind_name(task_kind);
    header["schema"] = json::parse(schema_to_json(schema));
    out << header.dump() << "\n";

    for (const AnnotatedPost& p : posts) {
        json rec;
        rec["id"] = p.id;
        rec["text"] = p.text;
        if (task_kind == TaskKind::multi_label) {
            if (p.gold.task_kind != TaskKind::multi_label ||
                p.gold.values.size() != schema.size()) {
                throw ValidationError("post " + p.id +
                                      ": labels do not match the schema arity");
            }
            rec["labels"] = json::array();
            for (std::uint8_t v : p.gold.values) rec["labels"].push_back(int(v));
        } else {
            if (p.gold.task_kind != TaskKind::multi_class ||
                p.gold.class_index < 0 ||
                p.gold.class_index >= static_cast<int>(schema.size())) {
                throw ValidationError("post " + p.id +
                                      ": class index out of schema range");
            }
            rec["label"] = p.gold.class_index;
        }
        if (!p.explanation_spans.empty()) {
            rec["spans"] = json::array();
            for (const Span& s : p.explanation_spans) {
                rec["spans"].push_back(span_to_json(s));
            }
        }
        if (p.truncated) rec["truncated"] = true;
        out << rec.dump() << "\n";
    }
    if (!out) throw RuntimeError("write failed: " + path);
}

std::vector<AnnotatedPost> read_posts_jsonl(const std::string& path,
                                            TaskKind* task_kind_out,
                                            LabelSchema* schema_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);

    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": bad header line: " + e.what());
    }
    if (header.value("format", "") != "posts" || header.value("version", 0) != 1) {
        throw FormatError(path + ": not a version-1 posts document");
    }
    const TaskKind task = task_kind_from_name(header.at("task").get<std::string>());
    const LabelSchema schema = schema_from_json(header.at("schema").dump());
    if (task_kind_out) *task_kind_out = task;
    if (schema_out) *schema_out = schema;

    std::vector<AnnotatedPost> posts;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(line_no) +
                              ": bad record: " + e.what());
        }
        AnnotatedPost p;
        p.id = rec.at("id").get<std::string>();
        p.text = rec.at("text").get<std::string>();
        if (task == TaskKind::multi_label) {
            const auto values = rec.at("labels").get<std::vector<int>>();
            if (values.size() != schema.size()) {
                throw FormatError(p.id + ": label vector length " +
                                  std::to_string(values.size()) +
                                  " does not match schema size " +
                                  std::to_string(schema.size()));
            }
            std::vector<std::uint8_t> bits;
            bits.reserve(values.size());
            for (int v : values) {
                if (v != 0 && v != 1) {
                    throw FormatError(p.id + ": labels must be 0/1");
                }
                bits.push_back(static_cast<std::uint8_t>(v));
            }
            p.gold = LabelVector::multi_label(std::move(bits));
        } else {
            const int cls = rec.at("label").get<int>();
            if (cls < 0 || cls >= static_cast<int>(schema.size())) {
                throw FormatError(p.id + ": class index out of schema range");
            }
            p.gold = LabelVector::multi_class(cls);
        }
        if (rec.contains("spans")) {
            for (const json& sj : rec["spans"]) {
                Span s = span_from_json(sj);
                check_span(s, p.text, p.id);
                p.explanation_spans.push_back(std::move(s));
            }
        }
        p.truncated = rec.value("truncated", false);
        posts.push_back(std::move(p));
    }
    return posts;
}

std::vector<AnnotatedPost> make_synthetic_posts(const SyntheticSpec& spec) {
    if (spec.sample_count == 0) {
        throw ValidationError("synthetic sample_count must be positive");
    }
    if (spec.class_count < 2 || spec.class_count > 6) {
        throw ValidationError("synthetic class_count must be in [2, 6]");
    }

    const int group_count =
        spec.task_kind == TaskKind::multi_class ? spec.class_count : kBaseDimensionCount;
    std::vector<std::string> fillers;
    for (int i = 0; i < 40; ++i) {
        fillers.push_back("filler" + std::to_string(i));
    }
    // Keywords are unique per group and disjoint from fillers, so classes
    // are separable from the bag of words alone.
    std::vector<std::vector<std::string>> keywords(
        static_cast<std::size_t>(group_count));
    for (int c = 0; c < group_count; ++c) {
        for (int k = 0; k < 5; ++k) {
            keywords[static_cast<std::size_t>(c)].push_back(
                "class" + std::to_string(c) + "word" + std::to_string(k));
        }
    }

    Rng rng(spec.seed);
    std::vector<AnnotatedPost> posts;
    posts.reserve(spec.sample_count);
    for (std::size_t i = 0; i < spec.sample_count; ++i) {
        AnnotatedPost post;
        {
            std::ostringstream id;
            id << "syn-" << std::setw(5) << std::setfill('0') << i;
            post.id = id.str();
        }

        std::vector<int> active;
        if (spec.task_kind == TaskKind::multi_class) {
            // Round-robin keeps class support balanced.
            active.push_back(static_cast<int>(i) % spec.class_count);
            post.gold = LabelVector::multi_class(active.front());
        } else {
            std::vector<int> order(kBaseDimensionCount);
            for (int d = 0; d < kBaseDimensionCount; ++d) order[size_t(d)] = d;
            rng.shuffle(order);
            const std::size_t m = 1 + rng.next_index(3);  // 1..3 active dims
            active.assign(order.begin(), order.begin() + static_cast<long>(m));
            std::sort(active.begin(), active.end());
            std::vector<std::uint8_t> bits(kBaseDimensionCount, 0);
            for (int d : active) bits[static_cast<std::size_t>(d)] = 1;
            post.gold = LabelVector::multi_label(std::move(bits));
        }

        std::vector<std::string> words;
        const std::size_t n_fill = 6 + rng.next_index(6);
        for (std::size_t f = 0; f < n_fill; ++f) {
            words.push_back(fillers[rng.next_index(fillers.size())]);
        }
        for (int g : active) {
            const auto& pool = keywords[static_cast<std::size_t>(g)];
            const std::size_t n_kw = 2 + rng.next_index(2);  // 2..3 keywords
            for (std::size_t k = 0; k < n_kw; ++k) {
                words.push_back(pool[rng.next_index(pool.size())]);
            }
        }
        rng.shuffle(words);

        std::string text;
        Span first_kw;
        bool have_kw = false;
        for (const std::string& w : words) {
            if (!text.empty()) text += ' ';
            const std::size_t start = text.size();
            text += w;
            if (!have_kw && w.rfind("class", 0) == 0) {
                first_kw = Span{start, text.size(), w};
                have_kw = true;
            }
        }
        post.text = std::move(text);
        if (have_kw) post.explanation_spans.push_back(first_kw);
        posts.push_back(std::move(post));
    }
    return posts;
}

}  // namespace wellbench
