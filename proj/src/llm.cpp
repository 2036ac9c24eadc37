#include "wellbench/llm.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "wellbench/attention.hpp"
#include "wellbench/rng.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace wellbench {

using nlohmann::json;

namespace {

// {post} is the substitution slot. The definitions block and the output
// instruction appear exactly once; few-shot demonstrations are spliced in
// front of the final "Textual post:" line.
const char* const kZeroShotTemplate =
    R"(First, understand the following definitions:
Physical Aspect (PA): Physical wellness fosters healthy dietary practices while discouraging harmful behaviors like tobacco use, drug misuse, and excessive alcohol consumption. Achieving optimal physical wellness involves regular physical activity, sufficient sleep, vitality, enthusiasm, and beneficial eating habits. Body shaming can negatively affect physical well-being by increasing awareness of medical history and appearance issues.
Intellectual Aspect (IA): Utilizing intellectual and cultural activities, both inside and outside the classroom, and leveraging human and learning resources enhance the wellness of an individual by nurturing intellectual growth and stimulation.
Vocational Aspect (VA): The Vocational Dimension acknowledges the role of personal gratification and enrichment derived from one's occupation in shaping life satisfaction. It influences an individual's perspective on creative problem-solving, professional development, and the management of financial obligations.
Social Aspect (SA): The Social Dimension highlights the interplay between society and the natural environment, increasing individuals' awareness of their role in society and their impact on ecosystems. Social bonds enhance interpersonal traits, enabling a better understanding and appreciation of cultural influences.
Spiritual Aspect (SpA): The Spiritual Dimension involves seeking the meaning and purpose of human life, appreciating its vastness and natural forces, and achieving harmony within oneself.
Emotional Aspect (EA): The Emotional Dimension enhances self-awareness and positivity, promoting better emotional control, realistic self-appraisal, independence, and effective stress management.

Now, you will be given a textual post. Classify the post into one of these labels: 1, 2, 3, or 4.
If the post is physical aspect, return 1; if it is either intellectual or vocational aspect, or both of these aspects, return 2;
if the post is social aspect, return 3; and if the post is either spiritual or emotional, or both of these aspect, return 4.
Then JUST list the key parts of the post that primarily influenced your prediction.
Provide your output as a Python list with two values: the first representing your prediction (1, 2, 3, or 4) and
the second representing the most important parts for your prediction like the following.
[value1, value2]

Textual post: {post})";

constexpr const char* kPostSlot = "Textual post: {post}";

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

std::string render_template(const std::string& post) {
    std::string text = kZeroShotTemplate;
    const std::string slot = "{post}";
    const std::size_t at = text.find(slot);
    text.replace(at, slot.size(), post);
    return text;
}

}  // namespace

const std::string& zero_shot_template() {
    static const std::string tpl = kZeroShotTemplate;
    return tpl;
}

PromptBundle build_zero_shot_prompt(const std::string& post,
                                    const std::string& post_id) {
    if (trim(post).empty()) throw ValidationError("cannot prompt with an empty post");
    PromptBundle bundle;
    bundle.template_id = "zero-shot/v1";
    bundle.rendered_text = render_template(post);
    bundle.target_post_id = post_id;
    return bundle;
}

std::vector<Shot> sample_shots(const std::vector<AnnotatedPost>& train_posts,
                               int n_per_class, std::uint64_t seed) {
    if (n_per_class < 0) throw ValidationError("n_per_class must be >= 0");
    if (n_per_class == 0) return {};

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < train_posts.size(); ++i) {
        const AnnotatedPost& p = train_posts[i];
        if (p.gold.task_kind != TaskKind::multi_class) {
            throw ValidationError("shot sampling requires multi-class posts");
        }
        by_class[p.gold.class_index].push_back(i);
    }

    Rng rng(seed);
    std::vector<Shot> shots;
    for (int cls = 0; cls < 4; ++cls) {
        auto it = by_class.find(cls);
        const std::size_t have = it == by_class.end() ? 0 : it->second.size();
        if (have < static_cast<std::size_t>(n_per_class)) {
            throw ValidationError("class " + std::to_string(cls + 1) + " has only " +
                                  std::to_string(have) + " training posts, need " +
                                  std::to_string(n_per_class));
        }
        std::vector<std::size_t> pool = it->second;
        rng.shuffle(pool);
        for (int k = 0; k < n_per_class; ++k) {
            const AnnotatedPost& p = train_posts[pool[static_cast<std::size_t>(k)]];
            Shot shot;
            shot.post_id = p.id;
            shot.post_text = p.text;
            shot.gold_class = cls + 1;
            if (!p.explanation_spans.empty()) {
                shot.gold_span_text = p.explanation_spans.front().text;
            }
            shots.push_back(std::move(shot));
        }
    }
    return shots;
}

PromptBundle build_few_shot_prompt(const std::string& post,
                                   const std::vector<Shot>& shots,
                                   const std::string& post_id) {
    if (shots.empty()) {
        PromptBundle bundle = build_zero_shot_prompt(post, post_id);
        bundle.template_id = "few-shot/v1";
        return bundle;
    }
    if (trim(post).empty()) throw ValidationError("cannot prompt with an empty post");

    // Class-grouped demonstrations, stable within each class.
    std::vector<Shot> grouped = shots;
    std::stable_sort(grouped.begin(), grouped.end(),
                     [](const Shot& a, const Shot& b) {
                         return a.gold_class < b.gold_class;
                     });

    std::ostringstream demos;
    demos << "Here are some examples:\n";
    for (const Shot& s : grouped) {
        if (s.gold_class < 1 || s.gold_class > 4) {
            throw ValidationError("shot class out of range: " +
                                  std::to_string(s.gold_class));
        }
        demos << "\nTextual post: " << s.post_text << "\nOutput: ["
              << s.gold_class << ", \"" << s.gold_span_text << "\"]\n";
    }
    demos << "\n" << kPostSlot;

    std::string tpl = kZeroShotTemplate;
    const std::size_t at = tpl.find(kPostSlot);
    tpl.replace(at, std::string(kPostSlot).size(), demos.str());

    PromptBundle bundle;
    bundle.template_id = "few-shot/v1";
    const std::string slot = "{post}";
    tpl.replace(tpl.find(slot), slot.size(), post);
    bundle.rendered_text = std::move(tpl);
    bundle.shots = std::move(grouped);
    bundle.target_post_id = post_id;
    return bundle;
}

ParsedLLMResponse parse_response(const std::string& raw) {
    // Commit to the first bracketed list that contains a top-level comma.
    for (std::size_t open = raw.find('['); open != std::string::npos;
         open = raw.find('[', open + 1)) {
        char quote = '\0';
        std::size_t comma = std::string::npos;
        std::size_t close = std::string::npos;
        for (std::size_t i = open + 1; i < raw.size(); ++i) {
            const char c = raw[i];
            if (quote != '\0') {
                if (c == quote) quote = '\0';
                continue;
            }
            if (c == '"' || c == '\'') {
                quote = c;
            } else if (c == ',' && comma == std::string::npos) {
                comma = i;
            } else if (c == ']') {
                close = i;
                break;
            }
        }
        if (close == std::string::npos || comma == std::string::npos) continue;

        const std::string first = strip_quotes(trim(raw.substr(open + 1, comma - open - 1)));
        const std::string second = raw.substr(comma + 1, close - comma - 1);

        int label = 0;
        try {
            std::size_t used = 0;
            label = std::stoi(first, &used);
            if (used != first.size()) throw std::invalid_argument(first);
        } catch (const std::exception&) {
            throw InvalidLabelError("first list element is not an integer: '" +
                                    first + "'");
        }
        if (label < 1 || label > 4) {
            throw InvalidLabelError("label " + std::to_string(label) +
                                    " outside {1..4}");
        }
        ParsedLLMResponse parsed;
        parsed.label = label;
        parsed.explanation_text = trim(strip_quotes(trim(second)));
        parsed.raw = raw;
        if (parsed.explanation_text.empty()) {
            throw ResponseParseError("explanation is empty after trimming");
        }
        return parsed;
    }
    throw ResponseParseError("no bracketed [label, explanation] list in reply");
}

std::string request_hash(const std::string& prompt, const ProviderConfig& cfg) {
    char temp[32];
    std::snprintf(temp, sizeof temp, "%.6g", cfg.temperature);
    const std::string canonical = cfg.provider_id + '\x1f' + cfg.model + '\x1f' +
                                  temp + '\x1f' + prompt;
    char out[17];
    std::snprintf(out, sizeof out, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical)));
    return out;
}

std::vector<TranscriptEntry> load_transcript(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open transcript: " + path);
    std::vector<TranscriptEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(line_no) +
                              ": bad transcript line: " + e.what());
        }
        TranscriptEntry entry;
        entry.request_hash = j.at("request_hash").get<std::string>();
        entry.prompt = j.at("prompt").get<std::string>();
        entry.reply = j.at("reply").get<std::string>();
        entry.provider_id = j.value("provider_id", "");
        entry.timestamp = j.value("timestamp", "");
        entries.push_back(std::move(entry));
    }
    return entries;
}

void append_transcript(const std::string& path, const TranscriptEntry& entry) {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw RuntimeError("cannot open transcript for append: " + path);
    json j;
    j["request_hash"] = entry.request_hash;
    j["prompt"] = entry.prompt;
    j["reply"] = entry.reply;
    j["provider_id"] = entry.provider_id;
    j["timestamp"] = entry.timestamp;
    out << j.dump() << "\n";
    if (!out) throw RuntimeError("transcript append failed: " + path);
}

ReplayTransport::ReplayTransport(const std::string& transcript_path)
    : path_(transcript_path) {
    for (const TranscriptEntry& e : load_transcript(transcript_path)) {
        replies_[e.request_hash] = e.reply;  // later entries win
    }
}

std::string ReplayTransport::send(const std::string& prompt,
                                  const ProviderConfig& cfg) {
    const std::string hash = request_hash(prompt, cfg);
    const auto it = replies_.find(hash);
    if (it == replies_.end()) {
        throw ReplayMissError("no recorded reply for request " + hash + " in " +
                              path_);
    }
    return it->second;
}

namespace {

std::string utc_timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm parts{};
    gmtime_r(&now, &parts);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &parts);
    return buf;
}

double monotonic_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

std::string LiveTransport::send(const std::string& prompt,
                                const ProviderConfig& cfg) {
    const char* key = std::getenv(cfg.api_key_env.c_str());
    if (!key || !*key) {
        throw AuthError("credential environment variable " + cfg.api_key_env +
                        " is not set");
    }

    if (cfg.min_request_interval_s > 0.0 && last_request_time_ > 0.0) {
        const double wait =
            cfg.min_request_interval_s - (monotonic_seconds() - last_request_time_);
        if (wait > 0.0) {
            std::this_thread::sleep_for(std::chrono::duration<double>(wait));
        }
    }

    json body;
    body["model"] = cfg.model;
    body["temperature"] = cfg.temperature;
    body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    const std::string payload = body.dump();

    httplib::Client client(cfg.base_url);
    client.set_connection_timeout(30);
    client.set_read_timeout(120);
    const httplib::Headers headers = {
        {"Authorization", std::string("Bearer ") + key}};

    std::string last_failure = "no attempts made";
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            const double delay =
                cfg.retry_base_delay_s * std::pow(2.0, attempt - 1);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        last_request_time_ = monotonic_seconds();
        httplib::Result res = client.Post("/v1/chat/completions", headers,
                                          payload, "application/json");
        if (!res) {
            last_failure = "transport failure: " + httplib::to_string(res.error());
            continue;  // connection-level problem, retry
        }
        if (res->status == 401 || res->status == 403) {
            throw AuthError("provider rejected the credential (HTTP " +
                            std::to_string(res->status) + ")");
        }
        if (res->status == 429 || res->status >= 500) {
            last_failure = "HTTP " + std::to_string(res->status) +
                           (res->status == 429 ? " (rate limit / quota)" : "");
            continue;  // transient, retry with backoff
        }
        if (res->status != 200) {
            throw TransportError("provider returned HTTP " +
                                 std::to_string(res->status) + ": " + res->body);
        }

        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw TransportError(std::string("provider reply is not JSON: ") +
                                 e.what());
        }
        std::string content;
        try {
            content = reply.at("choices").at(0).at("message").at("content")
                          .get<std::string>();
        } catch (const json::exception&) {
            throw TransportError("provider reply lacks choices[0].message.content");
        }

        TranscriptEntry entry;
        entry.request_hash = request_hash(prompt, cfg);
        entry.prompt = prompt;
        entry.reply = content;
        entry.provider_id = cfg.provider_id + "/" + cfg.model;
        entry.timestamp = utc_timestamp();
        append_transcript(cfg.transcript_path, entry);
        return content;
    }
    throw TransportError("request failed after " +
                         std::to_string(cfg.max_retries + 1) + " attempts; last: " +
                         last_failure);
}

std::unique_ptr<ChatTransport> make_transport(const ProviderConfig& cfg) {
    if (cfg.replay) return std::make_unique<ReplayTransport>(cfg.transcript_path);
    return std::make_unique<LiveTransport>();
}

std::string chat_send(const PromptBundle& bundle, const ProviderConfig& cfg,
                      ChatTransport& transport) {
    return transport.send(bundle.rendered_text, cfg);
}

std::vector<LlmOutcome> run_llm_over_posts(const std::vector<AnnotatedPost>& posts,
                                           const std::vector<Shot>& shots,
                                           const ProviderConfig& cfg,
                                           ChatTransport& transport) {
    std::vector<LlmOutcome> outcomes;
    outcomes.reserve(posts.size());
    for (const AnnotatedPost& p : posts) {
        const PromptBundle bundle = shots.empty()
                                        ? build_zero_shot_prompt(p.text, p.id)
                                        : build_few_shot_prompt(p.text, shots, p.id);
        LlmOutcome outcome;
        outcome.sample_id = p.id;
        outcome.raw_reply = chat_send(bundle, cfg, transport);
        try {
            const ParsedLLMResponse parsed = parse_response(outcome.raw_reply);
            outcome.parsed_ok = true;
            outcome.label = parsed.label;
            outcome.explanation_text = parsed.explanation_text;
        } catch (const ValidationError& e) {
            outcome.parsed_ok = false;
            outcome.failure_reason = e.what();
        }
        outcomes.push_back(std::move(outcome));
    }
    return outcomes;
}

void write_llm_outcomes(const std::vector<LlmOutcome>& outcomes,
                        const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);
    out << json{{"format", "llm-outcomes"}, {"version", 1}}.dump() << "\n";
    for (const LlmOutcome& o : outcomes) {
        json j;
        j["sample_id"] = o.sample_id;
        j["parsed_ok"] = o.parsed_ok;
        if (o.parsed_ok) {
            j["label"] = o.label;
            j["explanation"] = o.explanation_text;
        } else {
            j["failure_reason"] = o.failure_reason;
        }
        j["raw_reply"] = o.raw_reply;
        out << j.dump() << "\n";
    }
    if (!out) throw RuntimeError("write failed: " + path);
}

std::vector<LlmOutcome> read_llm_outcomes(const std::string& path) {
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
    if (header.value("format", "") != "llm-outcomes" ||
        header.value("version", 0) != 1) {
        throw FormatError(path + ": not a version-1 llm-outcomes document");
    }
    std::vector<LlmOutcome> outcomes;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(line_no) +
                              ": bad record: " + e.what());
        }
        LlmOutcome o;
        o.sample_id = j.at("sample_id").get<std::string>();
        o.parsed_ok = j.at("parsed_ok").get<bool>();
        if (o.parsed_ok) {
            o.label = j.at("label").get<int>();
            o.explanation_text = j.at("explanation").get<std::string>();
        } else {
            o.failure_reason = j.value("failure_reason", "");
        }
        o.raw_reply = j.value("raw_reply", "");
        outcomes.push_back(std::move(o));
    }
    return outcomes;
}

namespace {

std::vector<std::string> fold_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        std::size_t b = 0;
        std::size_t e = word.size();
        while (b < e && !std::isalnum(static_cast<unsigned char>(word[b]))) ++b;
        while (e > b && !std::isalnum(static_cast<unsigned char>(word[e - 1]))) --e;
        if (b >= e) continue;
        std::string folded = word.substr(b, e - b);
        for (char& c : folded) {
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
        words.push_back(std::move(folded));
    }
    return words;
}

}  // namespace

LlmEvaluation evaluate_llm(const std::vector<LlmOutcome>& outcomes,
                           const std::vector<AnnotatedPost>& gold_posts,
                           const LlmEvalOptions& options) {
    if (outcomes.empty()) throw EvaluationError("no outcomes to evaluate");

    std::map<std::string, const AnnotatedPost*> gold;
    for (const AnnotatedPost& p : gold_posts) gold[p.id] = &p;

    constexpr int kClasses = 4;
    constexpr int kSentinel = kClasses;  // format failures land here

    LlmEvaluation eval;
    std::vector<int> preds, golds;  // exclusion-mode vectors
    Eigen::MatrixXi table = Eigen::MatrixXi::Zero(kClasses + 1, kClasses + 1);
    std::vector<bool> flags;
    for (const LlmOutcome& o : outcomes) {
        const auto it = gold.find(o.sample_id);
        if (it == gold.end()) {
            throw AlignmentError("no gold post for sample " + o.sample_id);
        }
        const AnnotatedPost& post = *it->second;
        if (post.gold.task_kind != TaskKind::multi_class ||
            post.gold.class_index < 0 || post.gold.class_index >= kClasses) {
            throw ValidationError("gold post " + post.id +
                                  " is not a 4-class sample");
        }
        const int g = post.gold.class_index;
        const int p = o.parsed_ok ? o.label - 1 : kSentinel;
        if (!o.parsed_ok) ++eval.format_failures;
        table(g, p) += 1;
        if (o.parsed_ok) {
            preds.push_back(p);
            golds.push_back(g);
        }

        LlmSampleEval se;
        se.sample_id = o.sample_id;
        se.correct = o.parsed_ok && p == g;
        se.scorable = !post.explanation_spans.empty();
        if (se.scorable) {
            if (o.parsed_ok) {
                std::set<std::string> gold_bag;
                for (const Span& s : post.explanation_spans) {
                    for (std::string& w : fold_words(s.text)) {
                        gold_bag.insert(std::move(w));
                    }
                }
                const std::vector<std::string> expl = fold_words(o.explanation_text);
                std::size_t inside = 0;
                for (const std::string& w : expl) inside += gold_bag.count(w);
                se.overlap = !expl.empty() && inside * 2 >= expl.size();
            }
            flags.push_back(se.overlap);
        }
        eval.per_sample.push_back(std::move(se));
    }

    if (options.count_failures_as_wrong) {
        const auto n = static_cast<double>(outcomes.size());
        MetricRow row;
        row.averaging = options.averaging;
        row.support = static_cast<std::int64_t>(outcomes.size());
        row.accuracy = static_cast<double>(table.trace()) / n;
        row.mcc = multiclass_mcc(table);

        // P/R/F1 one-vs-rest over the genuine classes only; the sentinel
        // column still feeds false negatives for missed gold samples.
        std::vector<ConfusionCounts> per_class(kClasses);
        for (int cls = 0; cls < kClasses; ++cls) {
            auto& c = per_class[static_cast<std::size_t>(cls)];
            for (int gi = 0; gi <= kClasses; ++gi) {
                for (int pi = 0; pi <= kClasses; ++pi) {
                    const std::int64_t v = table(gi, pi);
                    if (gi == cls && pi == cls) c.tp += v;
                    else if (gi == cls) c.fn += v;
                    else if (pi == cls) c.fp += v;
                    else c.tn += v;
                }
            }
        }
        if (options.averaging == Averaging::micro) {
            ConfusionCounts pooled;
            for (const auto& c : per_class) {
                pooled.tp += c.tp;
                pooled.fp += c.fp;
                pooled.fn += c.fn;
                pooled.tn += c.tn;
            }
            const MetricRow b = binary_metrics(pooled);
            row.precision = b.precision;
            row.recall = b.recall;
            row.f1 = b.f1;
        } else {
            std::vector<double> weights(kClasses, 1.0 / kClasses);
            if (options.averaging == Averaging::weighted) {
                for (int cls = 0; cls < kClasses; ++cls) {
                    const auto& c = per_class[static_cast<std::size_t>(cls)];
                    weights[static_cast<std::size_t>(cls)] =
                        static_cast<double>(c.tp + c.fn) / n;
                }
            }
            for (int cls = 0; cls < kClasses; ++cls) {
                const MetricRow b = binary_metrics(per_class[static_cast<std::size_t>(cls)]);
                row.precision += weights[static_cast<std::size_t>(cls)] * b.precision;
                row.recall += weights[static_cast<std::size_t>(cls)] * b.recall;
                row.f1 += weights[static_cast<std::size_t>(cls)] * b.f1;
            }
        }
        eval.metrics = row;
    } else {
        if (preds.empty()) {
            throw EvaluationError("every reply failed to parse; nothing to score "
                                  "in exclusion mode");
        }
        eval.metrics = multiclass_metrics(preds, golds, kClasses, options.averaging);
    }

    if (!flags.empty()) eval.ao = ao_score(flags);
    return eval;
}

}  // namespace wellbench
