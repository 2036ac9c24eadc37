// Command-line front end. Verbs:
//   ingest    validate a raw CSV, print stats, optionally write canonical JSONL
//   train     fit classifiers per config and persist run artifacts
//   evaluate  full pipeline (train or import) and print the metrics report
//   fidelity  attention-dump AO / rank analysis against gold spans
//   llm-run   prompt a chat-completions endpoint (or replay a transcript)
//   report    render persisted report documents as markdown or CSV
//
// Exit codes: 0 ok, 2 validation error (bad flags, config, input files),
// 3 runtime error, 4 provider error.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wellbench/attention.hpp"
#include "wellbench/errors.hpp"
#include "wellbench/ingest.hpp"
#include "wellbench/orchestrate.hpp"

namespace {

using namespace wellbench;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides) {
    ExperimentConfig cfg =
        path.empty() ? ExperimentConfig{} : config_from_json(slurp(path));
    for (const std::string& assignment : overrides) {
        apply_override(cfg, assignment);
    }
    return cfg;
}

void write_or_print(const std::string& text, const std::string& path) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);
    out << text;
}

int run_ingest(const std::string& kind, const std::string& input,
               const std::string& output, int label_count) {
    std::vector<AnnotatedPost> posts;
    TaskKind task;
    LabelSchema schema;
    if (kind == "multiwd") {
        posts = load_multiwd(input);
        task = TaskKind::multi_label;
        schema = schema_for(label_count);
        if (label_count != kBaseDimensionCount) {
            const LabelSchema base = schema_for(kBaseDimensionCount);
            for (AnnotatedPost& p : posts) {
                p.gold = merge_labels(p.gold, base, schema);
            }
        }
    } else if (kind == "wellxplain") {
        posts = load_wellxplain(input);
        task = TaskKind::multi_class;
        schema = schema_for(4);
    } else {
        throw ConfigError("ingest kind must be multiwd or wellxplain, got '" +
                          kind + "'");
    }
    const DatasetStats stats = dataset_stats(posts);
    nlohmann::json summary;
    summary["kind"] = kind;
    summary["samples"] = stats.sample_count;
    summary["avg_words_per_post"] = stats.avg_words_per_post;
    summary["labels"] = nlohmann::json::array();
    for (const Dimension d : schema.labels) {
        summary["labels"].push_back(dimension_code(d));
    }
    std::cout << summary.dump(2) << "\n";
    if (!output.empty()) {
        write_posts_jsonl(posts, task, schema, output);
        std::cerr << "wrote " << posts.size() << " posts to " << output << "\n";
    }
    return 0;
}

int run_fidelity(const std::string& index_path, const std::string& posts_path,
                 const std::string& aggregation, int top_k,
                 const std::string& overlap_mode, double rel_tol) {
    const std::vector<AttentionRecord> records = read_attention_dumps(index_path);
    std::map<std::string, std::vector<Span>> gold;
    if (!posts_path.empty()) {
        for (const AnnotatedPost& p : read_posts_jsonl(posts_path)) {
            gold[p.id] = p.explanation_spans;
        }
    } else {
        for (const AttentionRecord& r : records) gold[r.sample_id] = {};
    }
    FidelityOptions opts;
    opts.aggregation = aggregation_from_name(aggregation);
    opts.top_k = top_k;
    opts.overlap_mode = overlap_mode_from_name(overlap_mode);
    opts.rel_tol = rel_tol;
    const FidelityResult result = fidelity_report(records, gold, opts);
    nlohmann::json j;
    j["samples"] = records.size();
    j["scored"] = result.scored_count;
    j["unscorable"] = result.unscorable_count;
    if (result.ao) j["ao"] = *result.ao;
    j["avg_rank"] = result.avg_rank;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_report(const std::vector<std::string>& inputs, const std::string& format,
               const std::string& output) {
    std::vector<EvaluationReport> reports;
    for (const std::string& path : inputs) {
        reports.push_back(report_from_json(slurp(path)));
    }
    const ReportFormat fmt = format == "csv" ? ReportFormat::csv
                                             : ReportFormat::markdown;
    if (format != "csv" && format != "markdown") {
        throw ConfigError("report format must be markdown or csv");
    }
    write_or_print(render_report(reports, fmt), output);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Wellness-dimension classification workbench"};
    app.require_subcommand(1);

    std::string config_path, ingest_kind, ingest_input, ingest_output;
    std::vector<std::string> overrides, report_inputs;
    int ingest_labels = wellbench::kBaseDimensionCount;

    auto add_config_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config JSON");
        cmd->add_option("--set", overrides,
                        "override a config key, e.g. --set epochs=3 or "
                        "--set dataset.kind=\"synthetic\"");
    };

    CLI::App* ingest = app.add_subcommand("ingest", "validate a dataset CSV");
    ingest->add_option("--kind", ingest_kind, "multiwd or wellxplain")
        ->required();
    ingest->add_option("--input", ingest_input, "CSV path")->required();
    ingest->add_option("--output", ingest_output, "canonical posts JSONL path");
    ingest->add_option("--labels", ingest_labels,
                       "merge multiwd to this many labels (4, 5, or 6)");

    CLI::App* train = app.add_subcommand("train", "fit and persist classifiers");
    add_config_flags(train);
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "run the pipeline and print metrics");
    add_config_flags(evaluate);

    std::string fid_index, fid_posts, fid_agg = "column_mean",
                fid_overlap = "token_count", fid_out;
    int fid_topk = 4;
    double fid_rel_tol = -1.0;
    CLI::App* fidelity =
        app.add_subcommand("fidelity", "attention AO / rank analysis");
    fidelity->add_option("--attention", fid_index, "dump index JSONL")
        ->required();
    fidelity->add_option("--posts", fid_posts, "posts JSONL with gold spans");
    fidelity->add_option("--aggregation", fid_agg,
                         "column_mean, cls_row, or row_mean");
    fidelity->add_option("--top-k", fid_topk, "tokens per explanation");
    fidelity->add_option("--overlap-mode", fid_overlap,
                         "token_count or char_mass");
    fidelity->add_option("--rel-tol", fid_rel_tol,
                         "rank tolerance (negative = default rule)");

    CLI::App* llm_run =
        app.add_subcommand("llm-run", "prompt an LLM endpoint or replay");
    add_config_flags(llm_run);

    std::string report_format = "markdown", report_output;
    CLI::App* report = app.add_subcommand("report", "render report documents");
    report->add_option("inputs", report_inputs, "report.json paths")
        ->required();
    report->add_option("--format", report_format, "markdown or csv");
    report->add_option("--output", report_output, "write here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*ingest) {
            return run_ingest(ingest_kind, ingest_input, ingest_output,
                              ingest_labels);
        }
        if (*train || *evaluate) {
            const wellbench::ExperimentConfig cfg =
                load_config(config_path, overrides);
            const wellbench::EvaluationReport rep =
                wellbench::run_experiment(cfg);
            std::cerr << "run " << rep.config_hash << " written under "
                      << cfg.output_dir << "\n";
            if (*evaluate) {
                std::cout << wellbench::render_report(
                    {rep}, wellbench::ReportFormat::markdown);
            }
            return 0;
        }
        if (*fidelity) {
            return run_fidelity(fid_index, fid_posts, fid_agg, fid_topk,
                                fid_overlap, fid_rel_tol);
        }
        if (*llm_run) {
            const wellbench::ExperimentConfig cfg =
                load_config(config_path, overrides);
            const wellbench::LlmRunReport rep =
                wellbench::run_llm_experiment(cfg);
            std::cout << wellbench::render_llm_report(rep);
            return 0;
        }
        if (*report) {
            return run_report(report_inputs, report_format, report_output);
        }
    } catch (const wellbench::ProviderError& e) {
        std::cerr << "provider error: " << e.what() << "\n";
        return 4;
    } catch (const wellbench::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const wellbench::RuntimeError& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
