#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wellbench/errors.hpp"
#include "wellbench/ingest.hpp"
#include "wellbench/metrics.hpp"

namespace wellbench {

// Reply text that carries no usable bracketed list.
struct ResponseParseError : ValidationError {
    explicit ResponseParseError(const std::string& msg) : ValidationError(msg) {}
};

// Reply parsed, but the class label is outside {1..4}.
struct InvalidLabelError : ValidationError {
    explicit InvalidLabelError(const std::string& msg) : ValidationError(msg) {}
};

struct Shot {
    std::string post_id;
    std::string post_text;
    int gold_class = 1;           // 1-based, as the prompt speaks of classes
    std::string gold_span_text;   // may be empty when no span is available
};

struct PromptBundle {
    std::string template_id;
    std::string rendered_text;
    std::vector<Shot> shots;
    std::string target_post_id;
};

// The classification prompt template with a {post} slot. The rendered text
// carries the six aspect definitions and the output-format instruction
// exactly once.
const std::string& zero_shot_template();

PromptBundle build_zero_shot_prompt(const std::string& post,
                                    const std::string& post_id = "");

// Exactly n_per_class demonstrations per class, sampled without duplicates
// under the seed, returned grouped by class. Posts must be multi-class.
// Throws ValidationError naming the class when its support is short.
std::vector<Shot> sample_shots(const std::vector<AnnotatedPost>& train_posts,
                               int n_per_class, std::uint64_t seed);

// Zero-shot template with a demonstrations block (one post/output pair per
// shot, class-grouped) inserted before the target post. Zero shots render
// byte-identically to the zero-shot prompt.
PromptBundle build_few_shot_prompt(const std::string& post,
                                   const std::vector<Shot>& shots,
                                   const std::string& post_id = "");

struct ParsedLLMResponse {
    int label = 0;                 // in {1..4}
    std::string explanation_text;  // non-empty after trimming
    std::string raw;
};

// Finds the first bracketed two-element list, tolerant of prose around it,
// whitespace, and quote style. Throws ResponseParseError / InvalidLabelError.
ParsedLLMResponse parse_response(const std::string& raw);

struct ProviderConfig {
    std::string provider_id = "openai-chat";
    std::string model = "gpt-4";
    double temperature = 0.0;
    std::string base_url = "https://api.openai.com";
    std::string api_key_env = "WELLBENCH_API_KEY";
    int max_retries = 3;
    double retry_base_delay_s = 1.0;
    double min_request_interval_s = 0.0;
    bool replay = true;
    std::string transcript_path = "transcript.jsonl";
};

struct TranscriptEntry {
    std::string request_hash;
    std::string prompt;
    std::string reply;
    std::string provider_id;
    std::string timestamp;
};

// Deterministic over prompt + provider parameters (id, model, temperature).
std::string request_hash(const std::string& prompt, const ProviderConfig& cfg);

std::vector<TranscriptEntry> load_transcript(const std::string& path);
void append_transcript(const std::string& path, const TranscriptEntry& entry);

class ChatTransport {
  public:
    virtual ~ChatTransport() = default;
    virtual std::string send(const std::string& prompt,
                             const ProviderConfig& cfg) = 0;
};

// Answers from a recorded transcript; never touches the network. An unknown
// request hash raises ReplayMissError.
class ReplayTransport : public ChatTransport {
  public:
    explicit ReplayTransport(const std::string& transcript_path);
    std::string send(const std::string& prompt, const ProviderConfig& cfg) override;

  private:
    std::map<std::string, std::string> replies_;
    std::string path_;
};

// HTTP chat-completions client: credential from the environment, serialized
// requests under a minimum interval, exponential backoff on transient
// failures, every exchange appended to the transcript store.
class LiveTransport : public ChatTransport {
  public:
    LiveTransport() = default;
    std::string send(const std::string& prompt, const ProviderConfig& cfg) override;

  private:
    double last_request_time_ = 0.0;
};

std::unique_ptr<ChatTransport> make_transport(const ProviderConfig& cfg);

std::string chat_send(const PromptBundle& bundle, const ProviderConfig& cfg,
                      ChatTransport& transport);

// One test post's journey through the prompt loop. Replies that fail to
// parse stay in the record with the failure reason.
struct LlmOutcome {
    std::string sample_id;
    bool parsed_ok = false;
    int label = 0;                 // valid when parsed_ok
    std::string explanation_text;  // valid when parsed_ok
    std::string failure_reason;    // valid when !parsed_ok
    std::string raw_reply;
};

std::vector<LlmOutcome> run_llm_over_posts(const std::vector<AnnotatedPost>& posts,
                                           const std::vector<Shot>& shots,
                                           const ProviderConfig& cfg,
                                           ChatTransport& transport);

void write_llm_outcomes(const std::vector<LlmOutcome>& outcomes,
                        const std::string& path);
std::vector<LlmOutcome> read_llm_outcomes(const std::string& path);

struct LlmEvalOptions {
    Averaging averaging = Averaging::macro;
    // Format failures score as a sentinel wrong class by default; exclusion
    // is available for diagnostics.
    bool count_failures_as_wrong = true;
};

struct LlmSampleEval {
    std::string sample_id;
    bool correct = false;
    bool scorable = false;  // gold spans present
    bool overlap = false;
};

struct LlmEvaluation {
    MetricRow metrics;
    std::optional<double> ao;
    std::size_t format_failures = 0;
    std::vector<LlmSampleEval> per_sample;
};

// Multiclass metrics over the outcomes (format failures enter the
// contingency table as a sentinel class that can never be correct, while
// precision/recall/F1 average over the genuine classes only). AO treats
// the returned explanation as a bag of case-folded words and flags overlap
// iff at least 50% of those words occur inside a gold span.
LlmEvaluation evaluate_llm(const std::vector<LlmOutcome>& outcomes,
                           const std::vector<AnnotatedPost>& gold_posts,
                           const LlmEvalOptions& options = {});

}  // namespace wellbench
