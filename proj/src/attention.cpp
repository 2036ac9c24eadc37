#include "wellbench/attention.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace wellbench {

using nlohmann::json;
namespace fs = std::filesystem;

void validate_attention_record(const AttentionRecord& rec, double row_sum_tol) {
    if (rec.sample_id.empty()) throw ValidationError("attention record without id");
    const auto n = static_cast<Eigen::Index>(rec.tokens.size());
    if (n == 0) throw ValidationError(rec.sample_id + ": no tokens");
    if (rec.matrix.rows() != n || rec.matrix.cols() != n) {
        throw ShapeError(rec.sample_id + ": matrix is " +
                         std::to_string(rec.matrix.rows()) + "x" +
                         std::to_string(rec.matrix.cols()) + " but there are " +
                         std::to_string(n) + " tokens");
    }
    for (Eigen::Index r = 0; r < n; ++r) {
        double sum = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) {
            const double a = rec.matrix(r, c);
            if (!std::isfinite(a) || a < -1e-12) {
                throw ValidationError(rec.sample_id + ": attention weight at (" +
                                      std::to_string(r) + ", " + std::to_string(c) +
                                      ") is negative or non-finite");
            }
            sum += a;
        }
        if (std::abs(sum - 1.0) > row_sum_tol) {
            throw ValidationError(rec.sample_id + ": row " + std::to_string(r) +
                                  " sums to " + std::to_string(sum) +
                                  ", expected 1");
        }
    }
    // Token offsets must be ordered and non-overlapping; zero-width special
    // markers are fine anywhere in that order.
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
        const TokenInfo& t = rec.tokens[i];
        if (t.end < t.start) {
            throw ValidationError(rec.sample_id + ": token " + std::to_string(i) +
                                  " has end < start");
        }
        if (t.start < prev_end) {
            throw ValidationError(rec.sample_id + ": token " + std::to_string(i) +
                                  " overlaps its predecessor");
        }
        prev_end = t.end;
    }
}

std::string aggregation_name(ScoreAggregation a) {
    switch (a) {
        case ScoreAggregation::column_mean: return "column_mean";
        case ScoreAggregation::cls_row: return "cls_row";
        case ScoreAggregation::row_mean: return "row_mean";
    }
    throw ValidationError("unknown aggregation value");
}

ScoreAggregation aggregation_from_name(const std::string& name) {
    if (name == "column_mean") return ScoreAggregation::column_mean;
    if (name == "cls_row") return ScoreAggregation::cls_row;
    if (name == "row_mean") return ScoreAggregation::row_mean;
    throw ConfigError("unknown score aggregation: " + name);
}

Eigen::VectorXd token_scores(const AttentionRecord& rec, ScoreAggregation agg) {
    validate_attention_record(rec);
    const auto n = static_cast<Eigen::Index>(rec.tokens.size());
    switch (agg) {
        case ScoreAggregation::column_mean: {
            // Attention received, averaged over content query rows only.
            Eigen::VectorXd sums = Eigen::VectorXd::Zero(n);
            Eigen::Index queries = 0;
            for (Eigen::Index r = 0; r < n; ++r) {
                if (rec.tokens[static_cast<std::size_t>(r)].special) continue;
                sums += rec.matrix.row(r).transpose();
                ++queries;
            }
            if (queries == 0) {
                throw DomainError(rec.sample_id +
                                  ": every token is special, nothing to score");
            }
            return sums / static_cast<double>(queries);
        }
        case ScoreAggregation::cls_row:
            return rec.matrix.row(0).transpose();
        case ScoreAggregation::row_mean:
            // Attention received, averaged over every query row.
            return rec.matrix.colwise().mean().transpose();
    }
    throw ValidationError("unknown aggregation value");
}

ExplanationEstimate top_k_tokens(const Eigen::VectorXd& scores,
                                 const std::vector<TokenInfo>& tokens, int k) {
    if (k < 1) throw ValidationError("top-k requires k >= 1");
    if (scores.size() != static_cast<Eigen::Index>(tokens.size())) {
        throw ShapeError("scores and tokens differ in length");
    }
    std::vector<int> candidates;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!tokens[i].special) candidates.push_back(static_cast<int>(i));
    }
    // Ties resolve toward the smaller token index.
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return a < b;
    });

    ExplanationEstimate est;
    est.k = k;
    const std::size_t take =
        std::min(candidates.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < take; ++i) {
        const int idx = candidates[i];
        const TokenInfo& t = tokens[static_cast<std::size_t>(idx)];
        est.top_tokens.push_back({idx, scores(idx), t.start, t.end, t.text});
    }
    return est;
}

std::string overlap_mode_name(OverlapMode m) {
    return m == OverlapMode::token_count ? "token_count" : "char_mass";
}

OverlapMode overlap_mode_from_name(const std::string& name) {
    if (name == "token_count") return OverlapMode::token_count;
    if (name == "char_mass") return OverlapMode::char_mass;
    throw ConfigError("unknown overlap mode: " + name);
}

namespace {

// Sorted disjoint intervals covering the union of the spans.
std::vector<std::pair<std::size_t, std::size_t>> merged_intervals(
    const std::vector<Span>& spans) {
    std::vector<std::pair<std::size_t, std::size_t>> iv;
    iv.reserve(spans.size());
    for (const Span& s : spans) iv.emplace_back(s.start, s.end);
    std::sort(iv.begin(), iv.end());
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& [b, e] : iv) {
        if (!out.empty() && b <= out.back().second) {
            out.back().second = std::max(out.back().second, e);
        } else {
            out.emplace_back(b, e);
        }
    }
    return out;
}

}  // namespace

bool overlaps_gold(const ExplanationEstimate& est, const std::vector<Span>& spans,
                   OverlapMode mode) {
    if (spans.empty()) {
        throw EvaluationError("sample is unscorable: no gold spans");
    }
    if (est.top_tokens.empty()) {
        throw EvaluationError("explanation estimate has no tokens");
    }
    const auto intervals = merged_intervals(spans);

    if (mode == OverlapMode::token_count) {
        std::size_t hits = 0;
        for (const TopToken& t : est.top_tokens) {
            for (const auto& [b, e] : intervals) {
                if (b <= t.start && t.end <= e) {  // full containment
                    ++hits;
                    break;
                }
            }
        }
        const std::size_t k_eff = est.top_tokens.size();
        return hits * 2 >= k_eff + (k_eff % 2);  // hits >= ceil(k_eff / 2)
    }

    // char_mass: at least half of the selected tokens' characters must land
    // inside the span union.
    std::size_t total = 0;
    std::size_t inside = 0;
    for (const TopToken& t : est.top_tokens) {
        total += t.end - t.start;
        for (const auto& [b, e] : intervals) {
            const std::size_t lo = std::max(b, t.start);
            const std::size_t hi = std::min(e, t.end);
            if (hi > lo) inside += hi - lo;
        }
    }
    if (total == 0) return false;  // zero-width tokens carry no mass
    return inside * 2 >= total;
}

double ao_score(const std::vector<bool>& flags) {
    if (flags.empty()) throw DomainError("AO over an empty sample set");
    std::size_t o = 0;
    for (bool f : flags) o += f ? 1 : 0;
    return static_cast<double>(o) / static_cast<double>(flags.size());
}

namespace detail {

int svd_rank_impl(const Eigen::MatrixXd& m, double rel_tol) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw DomainError("rank of an empty matrix is undefined");
    }
    if (!m.allFinite()) throw DomainError("matrix has non-finite entries");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const Eigen::VectorXd& sigma = svd.singularValues();
    const double smax = sigma.size() > 0 ? sigma(0) : 0.0;
    if (smax == 0.0) return 0;  // zero matrix
    const double threshold = rel_tol * smax;
    int rank = 0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma(i) > threshold) ++rank;
    }
    return rank;
}

}  // namespace detail

Eigen::MatrixXd stack_rows(const std::vector<Eigen::MatrixXd>& mats) {
    if (mats.empty()) throw DomainError("nothing to stack");
    const Eigen::Index cols = mats.front().cols();
    Eigen::Index rows = 0;
    for (const Eigen::MatrixXd& m : mats) {
        if (m.cols() != cols) {
            throw ShapeError("stacked matrices must share a column count");
        }
        rows += m.rows();
    }
    Eigen::MatrixXd out(rows, cols);
    Eigen::Index at = 0;
    for (const Eigen::MatrixXd& m : mats) {
        out.middleRows(at, m.rows()) = m;
        at += m.rows();
    }
    return out;
}

double dump_rank_rel_tol(Eigen::Index rows, Eigen::Index cols) {
    return static_cast<double>(std::max(rows, cols)) *
           static_cast<double>(Eigen::NumTraits<float>::epsilon());
}

FidelityResult fidelity_report(const std::vector<AttentionRecord>& records,
                               const std::map<std::string, std::vector<Span>>& gold_spans,
                               const FidelityOptions& options) {
    if (records.empty()) {
        throw EvaluationError("no attention records to score");
    }
    if (options.top_k < 1) throw ValidationError("top-k must be >= 1");

    FidelityResult result;
    std::vector<bool> flags;
    double rank_sum = 0.0;
    for (const AttentionRecord& rec : records) {
        validate_attention_record(rec);
        const auto it = gold_spans.find(rec.sample_id);
        if (it == gold_spans.end()) {
            throw AlignmentError("no gold entry for sample " + rec.sample_id);
        }

        SampleFidelity sf;
        sf.sample_id = rec.sample_id;
        sf.rank = svd_rank(rec.matrix, options.rel_tol);
        rank_sum += sf.rank;
        sf.scorable = !it->second.empty();
        if (sf.scorable) {
            bool has_content = false;
            for (const TokenInfo& t : rec.tokens) has_content |= !t.special;
            if (has_content) {
                const Eigen::VectorXd scores = token_scores(rec, options.aggregation);
                const ExplanationEstimate est =
                    top_k_tokens(scores, rec.tokens, options.top_k);
                sf.overlap = overlaps_gold(est, it->second, options.overlap_mode);
            }
            flags.push_back(sf.overlap);
            ++result.scored_count;
        } else {
            ++result.unscorable_count;
        }
        result.per_sample.push_back(std::move(sf));
    }
    result.avg_rank = rank_sum / static_cast<double>(records.size());
    if (!flags.empty()) result.ao = ao_score(flags);
    return result;
}

namespace {

std::string html_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

bool token_in_spans(const TokenInfo& t,
                    const std::vector<std::pair<std::size_t, std::size_t>>& iv) {
    for (const auto& [b, e] : iv) {
        if (b <= t.start && t.end <= e) return true;
    }
    return false;
}

std::string format_fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

}  // namespace

std::string render_attention_map(const AttentionRecord& rec,
                                 const Eigen::VectorXd& scores,
                                 const std::vector<Span>& gold_spans,
                                 MapFormat format) {
    if (scores.size() != static_cast<Eigen::Index>(rec.tokens.size())) {
        throw ShapeError("scores and tokens differ in length");
    }
    // Min-max normalize over content tokens; a flat profile renders at
    // mid intensity.
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
        if (rec.tokens[i].special) continue;
        const double s = scores(static_cast<Eigen::Index>(i));
        if (first || s < lo) lo = s;
        if (first || s > hi) hi = s;
        first = false;
    }
    const auto intensity = [&](std::size_t i) {
        if (first) return 0.0;
        if (hi <= lo) return 0.5;
        return (scores(static_cast<Eigen::Index>(i)) - lo) / (hi - lo);
    };
    const auto intervals = merged_intervals(gold_spans);

    std::ostringstream out;
    if (format == MapFormat::terminal) {
        out << "attention map for " << rec.sample_id
            << " (underline = gold span)\n";
        bool sep = false;
        for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
            const TokenInfo& t = rec.tokens[i];
            if (t.special) continue;
            if (sep) out << ' ';
            sep = true;
            // Grayscale-to-white ramp on the 256-color cube, black text.
            const int shade = 238 + static_cast<int>(std::lround(intensity(i) * 17));
            out << "\033[30;48;5;" << shade << 'm';
            if (token_in_spans(t, intervals)) out << "\033[4m";
            out << t.text << "\033[0m";
        }
        out << '\n';
        return out.str();
    }

    out << "<div class=\"attention-map\" data-sample=\""
        << html_escape(rec.sample_id) << "\">\n";
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
        const TokenInfo& t = rec.tokens[i];
        if (t.special) continue;
        out << "  <span style=\"background: rgba(255, 99, 71, "
            << format_fixed(intensity(i), 2) << ")\"";
        if (token_in_spans(t, intervals)) {
            out << " class=\"gold-span\"";
        }
        out << ">" << html_escape(t.text) << "</span>\n";
    }
    out << "</div>\n";
    return out.str();
}

namespace {

constexpr char kDumpMagic[4] = {'W', 'B', 'A', 'T'};
constexpr std::uint32_t kDumpVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(out, v);
}

float read_f32(std::istream& in) {
    const std::uint32_t v = read_u32(in);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

std::string sanitize_filename(const std::string& id) {
    std::string out;
    out.reserve(id.size());
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        out += ok ? c : '_';
    }
    if (out.empty()) out = "sample";
    return out;
}

}  // namespace

void write_attention_dumps(const std::vector<AttentionRecord>& records,
                           const std::string& dir, const std::string& index_path) {
    for (const AttentionRecord& rec : records) validate_attention_record(rec);
    fs::create_directories(dir);
    if (fs::path(index_path).has_parent_path()) {
        fs::create_directories(fs::path(index_path).parent_path());
    }
    std::ofstream index(index_path, std::ios::binary);
    if (!index) throw RuntimeError("cannot open for writing: " + index_path);

    std::set<std::string> used;
    for (const AttentionRecord& rec : records) {
        std::string base = sanitize_filename(rec.sample_id);
        std::string name = base + ".bin";
        for (int suffix = 2; !used.insert(name).second; ++suffix) {
            name = base + "-" + std::to_string(suffix) + ".bin";
        }
        const fs::path file = fs::path(dir) / name;
        std::ofstream bin(file, std::ios::binary);
        if (!bin) throw RuntimeError("cannot open for writing: " + file.string());
        bin.write(kDumpMagic, 4);
        write_u32(bin, kDumpVersion);
        write_u32(bin, static_cast<std::uint32_t>(rec.matrix.rows()));
        write_u32(bin, static_cast<std::uint32_t>(rec.matrix.cols()));
        for (Eigen::Index r = 0; r < rec.matrix.rows(); ++r) {
            for (Eigen::Index c = 0; c < rec.matrix.cols(); ++c) {
                write_f32(bin, static_cast<float>(rec.matrix(r, c)));
            }
        }
        if (!bin) throw RuntimeError("write failed: " + file.string());

        json line;
        line["sample_id"] = rec.sample_id;
        line["file"] = name;
        line["rows"] = rec.matrix.rows();
        line["cols"] = rec.matrix.cols();
        line["tokens"] = json::array();
        for (const TokenInfo& t : rec.tokens) {
            line["tokens"].push_back(json{{"text", t.text},
                                          {"start", t.start},
                                          {"end", t.end},
                                          {"special", t.special}});
        }
        line["provenance"] = rec.provenance;
        index << line.dump() << "\n";
    }
    if (!index) throw RuntimeError("write failed: " + index_path);
}

std::vector<AttentionRecord> read_attention_dumps(const std::string& index_path) {
    std::ifstream index(index_path, std::ios::binary);
    if (!index) throw ImportError("cannot open: " + index_path);
    const fs::path dir = fs::path(index_path).parent_path();

    std::vector<AttentionRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(index, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ImportError(index_path + ":" + std::to_string(line_no) +
                              ": bad index line: " + e.what());
        }
        AttentionRecord rec;
        rec.sample_id = j.at("sample_id").get<std::string>();
        rec.provenance = j.value("provenance", "");
        for (const json& tj : j.at("tokens")) {
            TokenInfo t;
            t.text = tj.at("text").get<std::string>();
            t.start = tj.at("start").get<std::size_t>();
            t.end = tj.at("end").get<std::size_t>();
            t.special = tj.at("special").get<bool>();
            rec.tokens.push_back(std::move(t));
        }

        const fs::path file = dir / j.at("file").get<std::string>();
        std::ifstream bin(file, std::ios::binary);
        if (!bin) throw ImportError("cannot open dump: " + file.string());
        char magic[4];
        bin.read(magic, 4);
        if (!bin || std::memcmp(magic, kDumpMagic, 4) != 0) {
            throw FormatError(file.string() + ": bad magic, not an attention dump");
        }
        const std::uint32_t version = read_u32(bin);
        if (version != kDumpVersion) {
            throw ImportError(file.string() + ": unsupported dump version " +
                              std::to_string(version));
        }
        const std::uint32_t rows = read_u32(bin);
        const std::uint32_t cols = read_u32(bin);
        if (!bin || rows == 0 || cols == 0 || rows > (1u << 20) ||
            cols > (1u << 20)) {
            throw ImportError(file.string() + ": implausible dump dimensions");
        }
        rec.matrix.resize(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t c = 0; c < cols; ++c) {
                rec.matrix(r, c) = static_cast<double>(read_f32(bin));
            }
        }
        if (!bin) throw ImportError(file.string() + ": truncated dump");
        char extra;
        if (bin.read(&extra, 1)) {
            throw ImportError(file.string() + ": trailing bytes after matrix");
        }
        // float32 storage loosens the row-sum tolerance.
        validate_attention_record(rec, 1e-4);
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace wellbench
