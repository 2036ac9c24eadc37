#include "wellbench/orchestrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace wellbench {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(v));
    return out;
}

void check_keys(const json& j, const std::string& where,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) {
            throw ConfigError("unknown config key '" + where + "." + key + "'");
        }
    }
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm parts{};
    gmtime_r(&now, &parts);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &parts);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);
    out << content;
    if (!out) throw RuntimeError("write failed: " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config document

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, "config",
               {"dataset", "task_kind", "label_count", "model", "loss",
                "reservation_levels", "seeds", "epochs", "warmup_epochs",
                "learning_rate",
                "batch_size", "hidden_dim", "max_length", "fine_tune_encoder",
                "attention", "llm", "averaging", "output_dir"});

    ExperimentConfig cfg;
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d, "dataset", {"kind", "path", "train_fraction", "synthetic"});
        cfg.dataset.kind = d.value("kind", cfg.dataset.kind);
        cfg.dataset.path = d.value("path", cfg.dataset.path);
        cfg.dataset.train_fraction =
            d.value("train_fraction", cfg.dataset.train_fraction);
        if (d.contains("synthetic")) {
            const json& s = d["synthetic"];
            check_keys(s, "dataset.synthetic",
                       {"sample_count", "class_count", "task_kind", "seed"});
            cfg.dataset.synthetic.sample_count =
                s.value("sample_count", cfg.dataset.synthetic.sample_count);
            cfg.dataset.synthetic.class_count =
                s.value("class_count", cfg.dataset.synthetic.class_count);
            if (s.contains("task_kind")) {
                cfg.dataset.synthetic.task_kind =
                    task_kind_from_name(s["task_kind"].get<std::string>());
            }
            cfg.dataset.synthetic.seed = s.value("seed", cfg.dataset.synthetic.seed);
        }
    }
    if (j.contains("task_kind")) {
        cfg.task_kind = task_kind_from_name(j["task_kind"].get<std::string>());
    } else if (cfg.dataset.kind == "wellxplain") {
        cfg.task_kind = TaskKind::multi_class;
    } else if (cfg.dataset.kind == "synthetic") {
        cfg.task_kind = cfg.dataset.synthetic.task_kind;
    }
    cfg.label_count = j.value("label_count", cfg.label_count);
    if (!j.contains("label_count")) {
        if (cfg.dataset.kind == "wellxplain") cfg.label_count = 4;
        if (cfg.dataset.kind == "synthetic" &&
            cfg.dataset.synthetic.task_kind == TaskKind::multi_class) {
            cfg.label_count = cfg.dataset.synthetic.class_count;
        }
    }

    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m, "model",
                   {"kind", "reference", "import_predictions", "import_attention"});
        cfg.model.kind = m.value("kind", cfg.model.kind);
        if (m.contains("reference")) {
            const json& r = m["reference"];
            check_keys(r, "model.reference",
                       {"vocab_size", "dims", "heads", "layers", "init_seed"});
            cfg.model.reference.vocab_size =
                r.value("vocab_size", cfg.model.reference.vocab_size);
            cfg.model.reference.dims = r.value("dims", cfg.model.reference.dims);
            cfg.model.reference.heads = r.value("heads", cfg.model.reference.heads);
            cfg.model.reference.layers =
                r.value("layers", cfg.model.reference.layers);
            cfg.model.reference.init_seed =
                r.value("init_seed", cfg.model.reference.init_seed);
        }
        cfg.model.import_predictions =
            m.value("import_predictions", cfg.model.import_predictions);
        cfg.model.import_attention =
            m.value("import_attention", cfg.model.import_attention);
    }
    if (j.contains("loss")) cfg.loss = loss_from_name(j["loss"].get<std::string>());
    if (j.contains("reservation_levels")) {
        cfg.reservation_levels = j["reservation_levels"].get<std::vector<double>>();
    }
    if (j.contains("seeds")) {
        cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    }
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
    cfg.max_length = j.value("max_length", cfg.max_length);
    cfg.fine_tune_encoder = j.value("fine_tune_encoder", cfg.fine_tune_encoder);

    if (j.contains("attention")) {
        const json& a = j["attention"];
        check_keys(a, "attention",
                   {"enabled", "dump", "aggregation", "top_k", "overlap_mode",
                    "rel_tol"});
        cfg.attention.enabled = a.value("enabled", cfg.attention.enabled);
        cfg.attention.dump = a.value("dump", cfg.attention.dump);
        if (a.contains("aggregation")) {
            cfg.attention.fidelity.aggregation =
                aggregation_from_name(a["aggregation"].get<std::string>());
        }
        cfg.attention.fidelity.top_k =
            a.value("top_k", cfg.attention.fidelity.top_k);
        if (a.contains("overlap_mode")) {
            cfg.attention.fidelity.overlap_mode =
                overlap_mode_from_name(a["overlap_mode"].get<std::string>());
        }
        cfg.attention.fidelity.rel_tol =
            a.value("rel_tol", cfg.attention.fidelity.rel_tol);
    }

    if (j.contains("llm")) {
        const json& l = j["llm"];
        check_keys(l, "llm", {"shots_per_class", "shot_seed", "limit", "provider"});
        cfg.llm.shots_per_class = l.value("shots_per_class", cfg.llm.shots_per_class);
        cfg.llm.shot_seed = l.value("shot_seed", cfg.llm.shot_seed);
        cfg.llm.limit = l.value("limit", cfg.llm.limit);
        if (l.contains("provider")) {
            const json& p = l["provider"];
            check_keys(p, "llm.provider",
                       {"provider_id", "model", "temperature", "base_url",
                        "api_key_env", "max_retries", "retry_base_delay_s",
                        "min_request_interval_s", "replay", "transcript_path"});
            ProviderConfig& pc = cfg.llm.provider;
            pc.provider_id = p.value("provider_id", pc.provider_id);
            pc.model = p.value("model", pc.model);
            pc.temperature = p.value("temperature", pc.temperature);
            pc.base_url = p.value("base_url", pc.base_url);
            pc.api_key_env = p.value("api_key_env", pc.api_key_env);
            pc.max_retries = p.value("max_retries", pc.max_retries);
            pc.retry_base_delay_s =
                p.value("retry_base_delay_s", pc.retry_base_delay_s);
            pc.min_request_interval_s =
                p.value("min_request_interval_s", pc.min_request_interval_s);
            pc.replay = p.value("replay", pc.replay);
            pc.transcript_path = p.value("transcript_path", pc.transcript_path);
        }
    }
    if (j.contains("averaging")) {
        cfg.averaging = averaging_from_name(j["averaging"].get<std::string>());
    }
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["dataset"] = {{"kind", cfg.dataset.kind},
                    {"path", cfg.dataset.path},
                    {"train_fraction", cfg.dataset.train_fraction},
                    {"synthetic",
                     {{"sample_count", cfg.dataset.synthetic.sample_count},
                      {"class_count", cfg.dataset.synthetic.class_count},
                      {"task_kind", task_kind_name(cfg.dataset.synthetic.task_kind)},
                      {"seed", cfg.dataset.synthetic.seed}}}};
    j["task_kind"] = task_kind_name(cfg.task_kind);
    j["label_count"] = cfg.label_count;
    j["model"] = {{"kind", cfg.model.kind},
                  {"reference",
                   {{"vocab_size", cfg.model.reference.vocab_size},
                    {"dims", cfg.model.reference.dims},
                    {"heads", cfg.model.reference.heads},
                    {"layers", cfg.model.reference.layers},
                    {"init_seed", cfg.model.reference.init_seed}}},
                  {"import_predictions", cfg.model.import_predictions},
                  {"import_attention", cfg.model.import_attention}};
    j["loss"] = loss_name(cfg.loss);
    j["reservation_levels"] = cfg.reservation_levels;
    j["seeds"] = cfg.seeds;
    j["epochs"] = cfg.epochs;
    j["warmup_epochs"] = cfg.warmup_epochs;
    j["learning_rate"] = cfg.learning_rate;
    j["batch_size"] = cfg.batch_size;
    j["hidden_dim"] = cfg.hidden_dim;
    j["max_length"] = cfg.max_length;
    j["fine_tune_encoder"] = cfg.fine_tune_encoder;
    j["attention"] = {
        {"enabled", cfg.attention.enabled},
        {"dump", cfg.attention.dump},
        {"aggregation", aggregation_name(cfg.attention.fidelity.aggregation)},
        {"top_k", cfg.attention.fidelity.top_k},
        {"overlap_mode", overlap_mode_name(cfg.attention.fidelity.overlap_mode)},
        {"rel_tol", cfg.attention.fidelity.rel_tol}};
    j["llm"] = {{"shots_per_class", cfg.llm.shots_per_class},
                {"shot_seed", cfg.llm.shot_seed},
                {"limit", cfg.llm.limit},
                {"provider",
                 {{"provider_id", cfg.llm.provider.provider_id},
                  {"model", cfg.llm.provider.model},
                  {"temperature", cfg.llm.provider.temperature},
                  {"base_url", cfg.llm.provider.base_url},
                  {"api_key_env", cfg.llm.provider.api_key_env},
                  {"max_retries", cfg.llm.provider.max_retries},
                  {"retry_base_delay_s", cfg.llm.provider.retry_base_delay_s},
                  {"min_request_interval_s", cfg.llm.provider.min_request_interval_s},
                  {"replay", cfg.llm.provider.replay},
                  {"transcript_path", cfg.llm.provider.transcript_path}}}};
    j["averaging"] = averaging_name(cfg.averaging);
    j["output_dir"] = cfg.output_dir;
    return j.dump(2);
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override must look like key.path=value, got '" +
                          assignment + "'");
    }
    std::string pointer = "/" + assignment.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const std::string raw_value = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw_value);
    } catch (const json::parse_error&) {
        value = raw_value;  // bare string
    }
    json doc = json::parse(config_to_json(cfg));
    try {
        doc[json::json_pointer(pointer)] = value;
        cfg = config_from_json(doc.dump());
    } catch (const json::exception& e) {
        throw ConfigError("cannot apply override '" + assignment + "': " + e.what());
    }
}

namespace {

// Canonical form that actually runs: SCE evaluates at level 1.0 only,
// imported predictions are a single pass, and the encoder's token budget
// comes from the experiment-level max_length.
ExperimentConfig resolve(const ExperimentConfig& raw) {
    ExperimentConfig cfg = raw;
    const std::set<std::string> kinds = {"multiwd", "wellxplain", "posts",
                                         "synthetic"};
    if (!kinds.count(cfg.dataset.kind)) {
        throw ConfigError("unknown dataset kind '" + cfg.dataset.kind + "'");
    }
    if (cfg.dataset.kind != "synthetic" && cfg.dataset.path.empty()) {
        throw ConfigError("dataset.path is required for kind '" +
                          cfg.dataset.kind + "'");
    }
    if (cfg.dataset.kind == "multiwd") cfg.task_kind = TaskKind::multi_label;
    if (cfg.dataset.kind == "wellxplain") {
        cfg.task_kind = TaskKind::multi_class;
        if (cfg.label_count != 4) {
            throw ConfigError("wellxplain carries 4 merged classes; label_count "
                              "must be 4");
        }
    }
    if (cfg.dataset.kind == "synthetic") {
        cfg.task_kind = cfg.dataset.synthetic.task_kind;
        if (cfg.task_kind == TaskKind::multi_class &&
            cfg.label_count != cfg.dataset.synthetic.class_count) {
            throw ConfigError("label_count must equal synthetic.class_count for "
                              "multi-class synthetic data");
        }
    }
    if (!(cfg.dataset.train_fraction > 0.0 && cfg.dataset.train_fraction < 1.0)) {
        throw ConfigError("dataset.train_fraction must lie in (0, 1)");
    }

    if (cfg.model.kind != "reference" && cfg.model.kind != "import") {
        throw ConfigError("unknown model kind '" + cfg.model.kind + "'");
    }
    if (cfg.model.kind == "import") {
        if (cfg.model.import_predictions.empty()) {
            throw ConfigError("model.import_predictions is required for imports");
        }
        cfg.seeds = {0};  // nothing is retrained; one pass over the dump
    }
    cfg.model.reference.max_length = cfg.max_length;

    if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
    std::set<std::uint64_t> distinct(cfg.seeds.begin(), cfg.seeds.end());
    if (distinct.size() != cfg.seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (cfg.loss == LossKind::gamblers && cfg.warmup_epochs >= cfg.epochs) {
        throw ConfigError("warmup_epochs must be < epochs for the gambler's loss");
    }
    if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (cfg.max_length < 1) throw ConfigError("max_length must be >= 1");
    if (cfg.attention.fidelity.top_k < 1) {
        throw ConfigError("attention.top_k must be >= 1");
    }

    if (cfg.loss == LossKind::sce) {
        cfg.reservation_levels = {1.0};  // no abstention output to filter on
        cfg.warmup_epochs = 0;           // warmup only precedes the gambler's loss
    }
    ReservationPolicy policy;
    policy.levels = cfg.reservation_levels;
    try {
        policy.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());  // surface as a configuration problem
    }
    return cfg;
}

}  // namespace

std::string config_hash(const ExperimentConfig& cfg) {
    json j = json::parse(config_to_json(resolve(cfg)));
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Prediction interop

void write_predictions_jsonl(const std::vector<PredictionRecord>& records,
                             int label_count, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);
    const TaskKind task =
        records.empty() ? TaskKind::multi_label : records.front().task_kind;
    out << json{{"format", "predictions"},
                {"version", 1},
                {"task", task_kind_name(task)},
                {"label_count", label_count}}
               .dump()
        << "\n";
    for (const PredictionRecord& r : records) {
        json j;
        j["sample_id"] = r.sample_id;
        j["probs"] = json::array();
        for (Eigen::Index i = 0; i < r.probs.size(); ++i) {
            j["probs"].push_back(r.probs(i));
        }
        if (r.reservation) j["reservation"] = *r.reservation;
        if (r.truncated) j["truncated"] = true;
        out << j.dump() << "\n";
    }
    if (!out) throw RuntimeError("write failed: " + path);
}

ImportResult import_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImportError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ImportError(path + ": empty file");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ImportError(path + ": bad header line: " + e.what());
    }
    if (header.value("format", "") != "predictions" ||
        header.value("version", 0) != 1) {
        throw ImportError(path + ": not a version-1 predictions document");
    }
    TaskKind task;
    int label_count = 0;
    try {
        task = task_kind_from_name(header.at("task").get<std::string>());
        label_count = header.at("label_count").get<int>();
    } catch (const json::exception& e) {
        throw ImportError(path + ": bad header fields: " + e.what());
    }
    if (label_count < 1) throw ImportError(path + ": label_count must be >= 1");

    ImportResult result;
    std::set<std::string> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ImportError(path + ":" + std::to_string(line_no) +
                              ": bad record: " + e.what());
        }
        const std::string id = j.value("sample_id", "");
        if (id.empty()) {
            result.rejected.emplace_back("<line " + std::to_string(line_no) + ">",
                                         "missing sample_id");
            continue;
        }
        if (!seen.insert(id).second) {
            result.rejected.emplace_back(id, "duplicate sample_id");
            continue;
        }
        if (!j.contains("probs") || !j["probs"].is_array()) {
            result.rejected.emplace_back(id, "missing probs array");
            continue;
        }
        if (static_cast<int>(j["probs"].size()) != label_count) {
            result.rejected.emplace_back(
                id, "probs length " + std::to_string(j["probs"].size()) +
                        " does not match label_count " +
                        std::to_string(label_count));
            continue;
        }
        PredictionRecord rec;
        rec.sample_id = id;
        rec.task_kind = task;
        rec.probs.resize(label_count);
        bool ok = true;
        for (int i = 0; i < label_count; ++i) {
            double p = 0.0;
            try {
                p = j["probs"][static_cast<std::size_t>(i)].get<double>();
            } catch (const json::exception&) {
                result.rejected.emplace_back(id, "probs entry is not a number");
                ok = false;
                break;
            }
            if (!(p >= 0.0 && p <= 1.0)) {
                result.rejected.emplace_back(
                    id, "probability outside [0, 1]: " + std::to_string(p));
                ok = false;
                break;
            }
            rec.probs(i) = p;
        }
        if (!ok) continue;
        if (j.contains("reservation")) {
            const double g = j["reservation"].get<double>();
            if (!(g >= 0.0 && g <= 1.0)) {
                result.rejected.emplace_back(
                    id, "reservation outside [0, 1]: " + std::to_string(g));
                continue;
            }
            rec.reservation = g;
        }
        rec.truncated = j.value("truncated", false);
        derive_predicted(rec);
        result.records.push_back(std::move(rec));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Report document

namespace {

json metric_row_to_json(const MetricRow& m) {
    return json{{"precision", m.precision}, {"recall", m.recall},
                {"f1", m.f1},               {"accuracy", m.accuracy},
                {"mcc", m.mcc},             {"averaging", averaging_name(m.averaging)},
                {"support", m.support}};
}

MetricRow metric_row_from_json(const json& j) {
    MetricRow m;
    m.precision = j.at("precision").get<double>();
    m.recall = j.at("recall").get<double>();
    m.f1 = j.at("f1").get<double>();
    m.accuracy = j.at("accuracy").get<double>();
    m.mcc = j.at("mcc").get<double>();
    m.averaging = averaging_from_name(j.at("averaging").get<std::string>());
    m.support = j.at("support").get<std::int64_t>();
    return m;
}

}  // namespace

std::string report_to_json(const EvaluationReport& report) {
    json j;
    j["format"] = "evaluation-report";
    j["version"] = 1;
    j["config_hash"] = report.config_hash;
    j["model_id"] = report.model_id;
    j["loss"] = report.loss;
    j["label_count"] = report.label_count;
    j["dataset"] = report.dataset;
    j["seeds"] = report.seeds;
    j["levels"] = report.levels;
    j["rows"] = json::array();
    for (const ReportRow& r : report.rows) {
        json row;
        row["seed"] = r.seed;
        row["reservation"] = r.reservation;
        row["kept_count"] = r.kept_count;
        row["metrics"] = metric_row_to_json(r.metrics);
        if (r.ao) row["ao"] = *r.ao;
        if (r.avg_rank) row["avg_rank"] = *r.avg_rank;
        j["rows"].push_back(std::move(row));
    }
    j["aggregates"] = json::array();
    for (const ReportAggregate& a : report.aggregates) {
        json row;
        row["reservation"] = a.reservation;
        row["metrics"] = metric_row_to_json(a.metrics);
        if (a.ao) row["ao"] = *a.ao;
        if (a.avg_rank) row["avg_rank"] = *a.avg_rank;
        j["aggregates"].push_back(std::move(row));
    }
    return j.dump(2);
}

EvaluationReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("report is not valid JSON: ") + e.what());
    }
    if (j.value("format", "") != "evaluation-report" || j.value("version", 0) != 1) {
        throw FormatError("not a version-1 evaluation report");
    }
    EvaluationReport report;
    report.config_hash = j.at("config_hash").get<std::string>();
    report.model_id = j.at("model_id").get<std::string>();
    report.loss = j.at("loss").get<std::string>();
    report.label_count = j.at("label_count").get<int>();
    report.dataset = j.at("dataset").get<std::string>();
    report.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    report.levels = j.at("levels").get<std::vector<double>>();
    for (const json& row : j.at("rows")) {
        ReportRow r;
        r.seed = row.at("seed").get<std::uint64_t>();
        r.reservation = row.at("reservation").get<double>();
        r.kept_count = row.at("kept_count").get<std::size_t>();
        r.metrics = metric_row_from_json(row.at("metrics"));
        if (row.contains("ao")) r.ao = row["ao"].get<double>();
        if (row.contains("avg_rank")) r.avg_rank = row["avg_rank"].get<double>();
        report.rows.push_back(std::move(r));
    }
    for (const json& row : j.at("aggregates")) {
        ReportAggregate a;
        a.reservation = row.at("reservation").get<double>();
        a.metrics = metric_row_from_json(row.at("metrics"));
        if (row.contains("ao")) a.ao = row["ao"].get<double>();
        if (row.contains("avg_rank")) a.avg_rank = row["avg_rank"].get<double>();
        report.aggregates.push_back(std::move(a));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Experiment runner

namespace {

struct LoadedDataset {
    std::vector<AnnotatedPost> posts;  // labels already merged to the schema
    LabelSchema schema;
    TaskKind task = TaskKind::multi_label;
};

LoadedDataset load_dataset(const ExperimentConfig& cfg) {
    LoadedDataset data;
    if (cfg.dataset.kind == "multiwd") {
        data.task = TaskKind::multi_label;
        data.schema = schema_for(cfg.label_count);
        const LabelSchema base = schema_for(kBaseDimensionCount);
        data.posts = load_multiwd(cfg.dataset.path);
        for (AnnotatedPost& p : data.posts) {
            p.gold = merge_labels(p.gold, base, data.schema);
        }
    } else if (cfg.dataset.kind == "wellxplain") {
        data.task = TaskKind::multi_class;
        data.schema = schema_for(4);
        data.posts = load_wellxplain(cfg.dataset.path);
    } else if (cfg.dataset.kind == "synthetic") {
        data.task = cfg.dataset.synthetic.task_kind;
        data.posts = make_synthetic_posts(cfg.dataset.synthetic);
        data.schema = schema_for(cfg.label_count);
        if (data.task == TaskKind::multi_label &&
            cfg.label_count != kBaseDimensionCount) {
            const LabelSchema base = schema_for(kBaseDimensionCount);
            for (AnnotatedPost& p : data.posts) {
                p.gold = merge_labels(p.gold, base, data.schema);
            }
        }
    } else {  // posts
        TaskKind task;
        LabelSchema schema;
        data.posts = read_posts_jsonl(cfg.dataset.path, &task, &schema);
        data.task = task;
        data.schema = schema;
        if (task != cfg.task_kind ||
            static_cast<int>(schema.size()) != cfg.label_count) {
            throw ConfigError("posts file carries " + task_kind_name(task) + "/" +
                              std::to_string(schema.size()) +
                              " labels, which contradicts the config");
        }
    }
    if (data.posts.empty()) throw ValidationError("dataset is empty");
    return data;
}

std::map<std::string, const AnnotatedPost*> posts_by_id(
    const std::vector<AnnotatedPost>& posts) {
    std::map<std::string, const AnnotatedPost*> by_id;
    for (const AnnotatedPost& p : posts) by_id[p.id] = &p;
    return by_id;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t h = seed + 0x9e3779b97f4a7c15ull + salt * 0xbf58476d1ce4e5b9ull;
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

void persist_failure(const std::string& run_dir, const std::string& stage,
                     std::optional<std::uint64_t> seed, const std::string& error) {
    try {
        fs::create_directories(run_dir);
        json j;
        j["format"] = "failure-manifest";
        j["version"] = 1;
        j["stage"] = stage;
        if (seed) j["seed"] = *seed;
        j["error"] = error;
        j["timestamp"] = utc_timestamp();
        write_text_file(run_dir + "/failure.json", j.dump(2) + "\n");
    } catch (...) {
        // Failure reporting must never mask the original error.
    }
}

template <typename F>
auto run_stage(const std::string& run_dir, const std::string& stage,
               std::optional<std::uint64_t> seed, F&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        persist_failure(run_dir, stage, seed, e.what());
        throw;
    }
}

std::optional<double> mean_optional(const std::vector<std::optional<double>>& vs) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& v : vs) {
        if (v) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

}  // namespace

EvaluationReport run_experiment(const ExperimentConfig& raw_cfg) {
    const ExperimentConfig cfg = resolve(raw_cfg);
    const std::string hash = config_hash(cfg);
    const std::string run_dir =
        (fs::path(cfg.output_dir) / hash).string();

    fs::create_directories(run_dir);
    write_text_file(run_dir + "/config.json", config_to_json(cfg) + "\n");

    const LoadedDataset data =
        run_stage(run_dir, "load", std::nullopt, [&] { return load_dataset(cfg); });
    const auto by_id = posts_by_id(data.posts);

    EvaluationReport report;
    report.config_hash = hash;
    report.loss = loss_name(cfg.loss);
    report.label_count = cfg.label_count;
    report.dataset = cfg.dataset.kind;
    report.seeds = cfg.seeds;
    report.levels = cfg.reservation_levels;
    // The report names the configured model, not any one seed's instance
    // (per-seed encoders mix the run seed into their init seed).
    report.model_id = cfg.model.kind == "import"
                          ? "import:" + fs::path(cfg.model.import_predictions)
                                            .filename()
                                            .string()
                          : ReferenceEncoder::identity_for(cfg.model.reference);

    json seed_dirs = json::array();
    for (const std::uint64_t seed : cfg.seeds) {
        const std::string seed_dir =
            (fs::path(run_dir) / std::to_string(seed)).string();
        fs::create_directories(seed_dir);
        json artifacts = json::array();

        std::vector<PredictionRecord> records;
        std::vector<AttentionRecord> attention;
        std::map<std::string, LabelVector> gold;
        std::map<std::string, std::vector<Span>> gold_spans;

        if (cfg.model.kind == "reference") {
            const DatasetSplit sp = run_stage(run_dir, "split", seed, [&] {
                return split(data.posts, cfg.dataset.train_fraction, seed);
            });
            write_text_file(seed_dir + "/split.json", split_to_json(sp) + "\n");
            artifacts.push_back("split.json");

            std::vector<AnnotatedPost> train_posts, test_posts;
            for (const std::string& id : sp.train) train_posts.push_back(*by_id.at(id));
            for (const std::string& id : sp.test) test_posts.push_back(*by_id.at(id));
            if (test_posts.empty()) {
                throw ValidationError("split left no test posts");
            }

            ReferenceEncoderConfig enc_cfg = cfg.model.reference;
            enc_cfg.init_seed = mix_seed(seed, enc_cfg.init_seed);
            ReferenceEncoder encoder(enc_cfg);

            HeadConfig head_cfg;
            head_cfg.input_dim = encoder.dims();
            head_cfg.hidden_dim = cfg.hidden_dim;
            head_cfg.label_count = cfg.label_count;
            head_cfg.with_reservation = cfg.loss == LossKind::gamblers;
            head_cfg.init_seed = mix_seed(seed, 0x68656164);  // distinct stream
            ClassifierHead head(head_cfg);

            TrainConfig train_cfg;
            train_cfg.loss = cfg.loss;
            train_cfg.epochs = cfg.epochs;
            train_cfg.warmup_epochs = cfg.warmup_epochs;
            train_cfg.learning_rate = cfg.learning_rate;
            train_cfg.batch_size = cfg.batch_size;
            train_cfg.seed = seed;
            train_cfg.fine_tune_encoder = cfg.fine_tune_encoder;
            train_cfg.hidden_dim = cfg.hidden_dim;

            const TrainResult trained = run_stage(run_dir, "train", seed, [&] {
                return train(encoder, head, train_posts, data.schema, data.task,
                             train_cfg);
            });
            save_head(head, seed_dir + "/head.json");
            artifacts.push_back("head.json");
            if (cfg.fine_tune_encoder) {
                save_encoder(encoder, seed_dir + "/encoder.json");
                artifacts.push_back("encoder.json");
            }
            write_text_file(seed_dir + "/train_losses.json",
                            json(trained.epoch_losses).dump() + "\n");
            artifacts.push_back("train_losses.json");

            const std::vector<Prediction> preds =
                run_stage(run_dir, "predict", seed,
                          [&] { return predict(encoder, head, test_posts); });
            for (const Prediction& p : preds) {
                records.push_back(p.record);
                attention.push_back(p.attention);
            }
            for (const AnnotatedPost& p : test_posts) {
                gold[p.id] = p.gold;
                gold_spans[p.id] = p.explanation_spans;
            }
        } else {
            const ImportResult imported = run_stage(run_dir, "import", seed, [&] {
                return import_predictions(cfg.model.import_predictions);
            });
            if (!imported.rejected.empty()) {
                json rej = json::array();
                for (const auto& [id, reason] : imported.rejected) {
                    rej.push_back(json{{"sample_id", id}, {"reason", reason}});
                }
                write_text_file(seed_dir + "/import_rejects.json",
                                rej.dump(2) + "\n");
                artifacts.push_back("import_rejects.json");
            }
            records = imported.records;
            run_stage(run_dir, "import", seed, [&] {
                for (const PredictionRecord& r : records) {
                    const auto it = by_id.find(r.sample_id);
                    if (it == by_id.end()) {
                        throw AlignmentError("imported sample " + r.sample_id +
                                             " is not in the dataset");
                    }
                    gold[r.sample_id] = it->second->gold;
                    gold_spans[r.sample_id] = it->second->explanation_spans;
                }
                return 0;
            });
            if (!cfg.model.import_attention.empty()) {
                attention = run_stage(run_dir, "import", seed, [&] {
                    return read_attention_dumps(cfg.model.import_attention);
                });
            }
        }

        write_predictions_jsonl(records, cfg.label_count,
                                seed_dir + "/predictions.jsonl");
        artifacts.push_back("predictions.jsonl");

        ReservationPolicy policy;
        policy.levels = cfg.reservation_levels;
        MetricSuite suite;
        suite.task = data.task;
        suite.label_count = cfg.label_count;
        suite.averaging = cfg.averaging;
        const std::vector<LevelRow> level_rows =
            run_stage(run_dir, "evaluate", seed,
                      [&] { return selective_evaluate(records, gold, policy, suite); });

        std::optional<FidelityResult> fidelity;
        if (cfg.attention.enabled && !attention.empty()) {
            fidelity = run_stage(run_dir, "fidelity", seed, [&] {
                FidelityOptions opts = cfg.attention.fidelity;
                if (cfg.model.kind == "import" && opts.rel_tol < 0.0) {
                    // Imported matrices come from float32 dumps.
                    opts.rel_tol = dump_rank_rel_tol(
                        attention.front().matrix.rows(),
                        attention.front().matrix.cols());
                }
                return fidelity_report(attention, gold_spans, opts);
            });
            if (cfg.attention.dump) {
                const std::string dump_dir = seed_dir + "/attention";
                write_attention_dumps(attention, dump_dir,
                                      dump_dir + "/index.jsonl");
                artifacts.push_back("attention/index.jsonl");
            }
        }

        json seed_metrics = json::array();
        for (std::size_t li = 0; li < level_rows.size(); ++li) {
            const LevelRow& lr = level_rows[li];
            ReportRow row;
            row.seed = seed;
            row.reservation = lr.reservation;
            row.kept_count = lr.kept_count;
            row.metrics = lr.metrics;
            // Fidelity is computed once per seed over the full test set and
            // rides on the unfiltered row.
            if (fidelity && lr.reservation == 1.0) {
                row.ao = fidelity->ao;
                row.avg_rank = fidelity->avg_rank;
            }
            json jrow;
            jrow["reservation"] = lr.reservation;
            jrow["kept_count"] = lr.kept_count;
            jrow["metrics"] = metric_row_to_json(lr.metrics);
            jrow["kept_ids"] = lr.kept_ids;
            jrow["abstained_ids"] = lr.abstained_ids;
            if (row.ao) jrow["ao"] = *row.ao;
            if (row.avg_rank) jrow["avg_rank"] = *row.avg_rank;
            seed_metrics.push_back(std::move(jrow));
            report.rows.push_back(std::move(row));
        }
        write_text_file(seed_dir + "/metrics.json", seed_metrics.dump(2) + "\n");
        artifacts.push_back("metrics.json");

        json seed_manifest;
        seed_manifest["format"] = "run-manifest";
        seed_manifest["version"] = 1;
        seed_manifest["config_hash"] = hash;
        seed_manifest["seed"] = seed;
        seed_manifest["model_id"] = report.model_id;
        seed_manifest["artifacts"] = artifacts;
        seed_manifest["timestamp"] = utc_timestamp();
        write_text_file(seed_dir + "/manifest.json", seed_manifest.dump(2) + "\n");
        seed_dirs.push_back(std::to_string(seed));
    }

    // Aggregates: arithmetic mean over the seed rows of each level.
    for (const double level : cfg.reservation_levels) {
        ReportAggregate agg;
        agg.reservation = level;
        agg.metrics.averaging = cfg.averaging;
        std::vector<std::optional<double>> aos, ranks;
        double support = 0.0;
        std::size_t n = 0;
        for (const ReportRow& row : report.rows) {
            if (row.reservation != level) continue;
            agg.metrics.precision += row.metrics.precision;
            agg.metrics.recall += row.metrics.recall;
            agg.metrics.f1 += row.metrics.f1;
            agg.metrics.accuracy += row.metrics.accuracy;
            agg.metrics.mcc += row.metrics.mcc;
            support += static_cast<double>(row.metrics.support);
            aos.push_back(row.ao);
            ranks.push_back(row.avg_rank);
            ++n;
        }
        const double dn = static_cast<double>(n);
        agg.metrics.precision /= dn;
        agg.metrics.recall /= dn;
        agg.metrics.f1 /= dn;
        agg.metrics.accuracy /= dn;
        agg.metrics.mcc /= dn;
        agg.metrics.support = static_cast<std::int64_t>(std::llround(support / dn));
        agg.ao = mean_optional(aos);
        agg.avg_rank = mean_optional(ranks);
        report.aggregates.push_back(std::move(agg));
    }

    write_text_file(run_dir + "/report.json", report_to_json(report) + "\n");

    json manifest;
    manifest["format"] = "experiment-manifest";
    manifest["version"] = 1;
    manifest["config_hash"] = hash;
    manifest["config"] = "config.json";
    manifest["report"] = "report.json";
    manifest["model_id"] = report.model_id;
    manifest["seed_dirs"] = seed_dirs;
    manifest["timestamp"] = utc_timestamp();
    write_text_file(run_dir + "/manifest.json", manifest.dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// Report rendering

namespace {

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string level_label(double level) {
    const double pct = level * 100.0;
    char buf[32];
    if (std::abs(pct - std::llround(pct)) < 1e-9) {
        std::snprintf(buf, sizeof buf, "Res=%lld%%",
                      static_cast<long long>(std::llround(pct)));
    } else {
        std::snprintf(buf, sizeof buf, "Res=%.1f%%", pct);
    }
    return buf;
}

std::string opt2(const std::optional<double>& v) {
    return v ? fixed2(*v) : std::string("-");
}

std::vector<const EvaluationReport*> sorted_reports(
    const std::vector<EvaluationReport>& reports) {
    std::vector<const EvaluationReport*> order;
    for (const EvaluationReport& r : reports) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const EvaluationReport* a, const EvaluationReport* b) {
                         if (a->model_id != b->model_id) {
                             return a->model_id < b->model_id;
                         }
                         if (a->loss != b->loss) return a->loss < b->loss;
                         return a->label_count < b->label_count;
                     });
    return order;
}

}  // namespace

std::string render_report(const std::vector<EvaluationReport>& reports,
                          ReportFormat format) {
    if (reports.empty()) throw ValidationError("no reports to render");
    for (const EvaluationReport& r : reports) {
        if (r.rows.empty()) {
            throw ValidationError("report " + r.config_hash + " has no rows");
        }
    }
    const auto order = sorted_reports(reports);

    std::ostringstream out;
    if (format == ReportFormat::csv) {
        out << "model,loss,label_count,dataset,config_hash,seed,reservation,"
               "kept,precision,recall,f1,accuracy,mcc,ao,avg_rank\n";
        for (const EvaluationReport* r : order) {
            auto emit = [&](const std::string& seed_label, double reservation,
                            const std::string& kept, const MetricRow& m,
                            const std::optional<double>& ao,
                            const std::optional<double>& rank) {
                out << r->model_id << ',' << r->loss << ',' << r->label_count
                    << ',' << r->dataset << ',' << r->config_hash << ','
                    << seed_label << ',' << fixed2(reservation) << ',' << kept
                    << ',' << fixed2(m.precision) << ',' << fixed2(m.recall)
                    << ',' << fixed2(m.f1) << ',' << fixed2(m.accuracy) << ','
                    << fixed2(m.mcc) << ',' << opt2(ao) << ',' << opt2(rank)
                    << '\n';
            };
            for (const ReportRow& row : r->rows) {
                emit(std::to_string(row.seed), row.reservation,
                     std::to_string(row.kept_count), row.metrics, row.ao,
                     row.avg_rank);
            }
            for (const ReportAggregate& agg : r->aggregates) {
                emit("mean", agg.reservation, "-", agg.metrics, agg.ao,
                     agg.avg_rank);
            }
        }
        return out.str();
    }

    out << "# Evaluation report\n";
    for (const EvaluationReport* r : order) {
        out << "\n## " << r->model_id << " | loss " << r->loss << " | "
            << r->label_count << " labels | dataset " << r->dataset << "\n\n";
        out << "config `" << r->config_hash << "`\n\n";

        // Pivot: one row per seed, F1/MCC column pair per reservation level.
        out << "| Seed |";
        for (const double level : r->levels) {
            out << ' ' << level_label(level) << " F1 | " << level_label(level)
                << " MCC |";
        }
        out << "\n|---|";
        for (std::size_t i = 0; i < r->levels.size(); ++i) out << "---|---|";
        out << "\n";
        for (const std::uint64_t seed : r->seeds) {
            out << "| " << seed << " |";
            for (const double level : r->levels) {
                for (const ReportRow& row : r->rows) {
                    if (row.seed == seed && row.reservation == level) {
                        out << ' ' << fixed2(row.metrics.f1) << " | "
                            << fixed2(row.metrics.mcc) << " |";
                    }
                }
            }
            out << "\n";
        }
        out << "| mean |";
        for (const double level : r->levels) {
            for (const ReportAggregate& agg : r->aggregates) {
                if (agg.reservation == level) {
                    out << ' ' << fixed2(agg.metrics.f1) << " | "
                        << fixed2(agg.metrics.mcc) << " |";
                }
            }
        }
        out << "\n\n";

        out << "| Seed | Reservation | Kept | Precision | Recall | F1 | "
               "Accuracy | MCC | AO | Avg rank |\n";
        out << "|---|---|---|---|---|---|---|---|---|---|\n";
        for (const ReportRow& row : r->rows) {
            out << "| " << row.seed << " | " << fixed2(row.reservation) << " | "
                << row.kept_count << " | " << fixed2(row.metrics.precision)
                << " | " << fixed2(row.metrics.recall) << " | "
                << fixed2(row.metrics.f1) << " | " << fixed2(row.metrics.accuracy)
                << " | " << fixed2(row.metrics.mcc) << " | " << opt2(row.ao)
                << " | " << opt2(row.avg_rank) << " |\n";
        }
        for (const ReportAggregate& agg : r->aggregates) {
            out << "| mean | " << fixed2(agg.reservation) << " | - | "
                << fixed2(agg.metrics.precision) << " | "
                << fixed2(agg.metrics.recall) << " | " << fixed2(agg.metrics.f1)
                << " | " << fixed2(agg.metrics.accuracy) << " | "
                << fixed2(agg.metrics.mcc) << " | " << opt2(agg.ao) << " | "
                << opt2(agg.avg_rank) << " |\n";
        }
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Prompted-model runner

LlmRunReport run_llm_experiment(const ExperimentConfig& raw_cfg) {
    const ExperimentConfig cfg = resolve(raw_cfg);
    if (cfg.task_kind != TaskKind::multi_class || cfg.label_count != 4) {
        throw ConfigError("the prompt protocol classifies into 4 classes; use a "
                          "4-class multi-class dataset");
    }
    const std::string hash = config_hash(cfg);
    const std::string run_dir =
        (fs::path(cfg.output_dir) / hash / "llm").string();
    fs::create_directories(run_dir);
    write_text_file((fs::path(cfg.output_dir) / hash / "config.json").string(),
                    config_to_json(cfg) + "\n");

    const LoadedDataset data =
        run_stage(run_dir, "load", std::nullopt, [&] { return load_dataset(cfg); });

    const std::uint64_t seed = cfg.seeds.front();
    const DatasetSplit sp = run_stage(run_dir, "split", seed, [&] {
        return split(data.posts, cfg.dataset.train_fraction, seed);
    });
    const auto by_id = posts_by_id(data.posts);
    std::vector<AnnotatedPost> train_posts, test_posts;
    for (const std::string& id : sp.train) train_posts.push_back(*by_id.at(id));
    for (const std::string& id : sp.test) test_posts.push_back(*by_id.at(id));
    if (cfg.llm.limit > 0 && test_posts.size() > cfg.llm.limit) {
        test_posts.resize(cfg.llm.limit);
    }
    if (test_posts.empty()) throw ValidationError("no test posts to prompt");

    const std::vector<Shot> shots = run_stage(run_dir, "shots", seed, [&] {
        return sample_shots(train_posts, cfg.llm.shots_per_class,
                            cfg.llm.shot_seed);
    });

    const std::vector<LlmOutcome> outcomes =
        run_stage(run_dir, "prompt", seed, [&] {
            const auto transport = make_transport(cfg.llm.provider);
            return run_llm_over_posts(test_posts, shots, cfg.llm.provider,
                                      *transport);
        });
    write_llm_outcomes(outcomes, run_dir + "/outcomes.jsonl");

    LlmRunReport report;
    report.config_hash = hash;
    report.provider = cfg.llm.provider.provider_id + "/" + cfg.llm.provider.model;
    report.template_id = shots.empty() ? "zero-shot/v1" : "few-shot/v1";
    report.sample_count = outcomes.size();
    LlmEvalOptions opts;
    opts.averaging = cfg.averaging;
    report.evaluation = run_stage(run_dir, "evaluate", seed, [&] {
        return evaluate_llm(outcomes, test_posts, opts);
    });

    json j;
    j["format"] = "llm-report";
    j["version"] = 1;
    j["config_hash"] = hash;
    j["provider"] = report.provider;
    j["template_id"] = report.template_id;
    j["sample_count"] = report.sample_count;
    j["metrics"] = metric_row_to_json(report.evaluation.metrics);
    if (report.evaluation.ao) j["ao"] = *report.evaluation.ao;
    j["format_failures"] = report.evaluation.format_failures;
    json per_sample = json::array();
    for (const LlmSampleEval& s : report.evaluation.per_sample) {
        per_sample.push_back(json{{"sample_id", s.sample_id},
                                  {"correct", s.correct},
                                  {"scorable", s.scorable},
                                  {"overlap", s.overlap}});
    }
    j["per_sample"] = std::move(per_sample);
    write_text_file(run_dir + "/report.json", j.dump(2) + "\n");

    json manifest;
    manifest["format"] = "llm-run-manifest";
    manifest["version"] = 1;
    manifest["config_hash"] = hash;
    manifest["artifacts"] = json::array({"outcomes.jsonl", "report.json"});
    manifest["shot_ids"] = json::array();
    for (const Shot& s : shots) manifest["shot_ids"].push_back(s.post_id);
    manifest["timestamp"] = utc_timestamp();
    write_text_file(run_dir + "/manifest.json", manifest.dump(2) + "\n");
    return report;
}

std::string render_llm_report(const LlmRunReport& report) {
    std::ostringstream out;
    out << "# Prompted-model report\n\n";
    out << "provider " << report.provider << ", template " << report.template_id
        << ", config `" << report.config_hash << "`\n\n";
    out << "| Samples | Precision | Recall | F1 | Accuracy | MCC | AO | "
           "Format failures |\n";
    out << "|---|---|---|---|---|---|---|---|\n";
    const MetricRow& m = report.evaluation.metrics;
    out << "| " << report.sample_count << " | " << fixed2(m.precision) << " | "
        << fixed2(m.recall) << " | " << fixed2(m.f1) << " | "
        << fixed2(m.accuracy) << " | " << fixed2(m.mcc) << " | "
        << opt2(report.evaluation.ao) << " | " << report.evaluation.format_failures
        << " |\n";
    return out.str();
}

}  // namespace wellbench
