#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "wellbench/errors.hpp"
#include "wellbench/orchestrate.hpp"

using namespace wellbench;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = WELLBENCH_FIXTURE_DIR;

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ExperimentConfig tiny_synthetic_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.dataset.kind = "synthetic";
    cfg.dataset.synthetic.sample_count = 60;
    cfg.dataset.synthetic.class_count = 4;
    cfg.dataset.synthetic.task_kind = TaskKind::multi_class;
    cfg.dataset.synthetic.seed = 3;
    cfg.task_kind = TaskKind::multi_class;
    cfg.label_count = 4;
    cfg.loss = LossKind::gamblers;
    cfg.seeds = {200, 345};
    cfg.epochs = 2;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 12;
    cfg.hidden_dim = 16;
    cfg.max_length = 24;
    cfg.model.reference.vocab_size = 256;
    cfg.model.reference.dims = 16;
    cfg.model.reference.heads = 2;
    cfg.model.reference.layers = 1;
    cfg.output_dir = out_dir;
    return cfg;
}

}  // namespace

TEST_CASE("config JSON round-trip preserves every field") {
    ExperimentConfig cfg = tiny_synthetic_config("/tmp/x");
    cfg.reservation_levels = {1.0, 0.9};
    cfg.averaging = Averaging::weighted;
    cfg.llm.shots_per_class = 5;
    cfg.llm.provider.model = "some-model";
    const ExperimentConfig back = config_from_json(config_to_json(cfg));
    CHECK(config_to_json(back) == config_to_json(cfg));
    CHECK(back.dataset.synthetic.sample_count == 60);
    CHECK(back.loss == LossKind::gamblers);
    CHECK(back.seeds == std::vector<std::uint64_t>({200, 345}));
    CHECK(back.averaging == Averaging::weighted);
    CHECK(back.llm.provider.model == "some-model");
}

TEST_CASE("unknown config keys are rejected, not ignored") {
    CHECK_THROWS_AS(config_from_json("{\"epoch\": 3}"), ConfigError);
    CHECK_THROWS_AS(config_from_json("{\"dataset\": {\"knd\": \"posts\"}}"),
                    ConfigError);
    CHECK_THROWS_AS(config_from_json("not json at all"), ConfigError);
    CHECK_THROWS_AS(config_from_json("{\"model\": {\"reference\": {\"head\": 1}}}"),
                    ConfigError);
}

TEST_CASE("defaults match the published protocol") {
    const ExperimentConfig cfg;
    CHECK(cfg.seeds == std::vector<std::uint64_t>({200, 345, 546}));
    CHECK(cfg.epochs == 5);
    CHECK(cfg.learning_rate == 1e-5);
    CHECK(cfg.reservation_levels ==
          std::vector<double>({1.00, 0.95, 0.85, 0.75}));
    CHECK(cfg.label_count == 6);
    CHECK(cfg.task_kind == TaskKind::multi_label);
    CHECK(cfg.loss == LossKind::sce);
}

TEST_CASE("dotted overrides reach nested keys and parse JSON values") {
    ExperimentConfig cfg;
    apply_override(cfg, "epochs=9");
    CHECK(cfg.epochs == 9);
    apply_override(cfg, "dataset.synthetic.class_count=5");
    CHECK(cfg.dataset.synthetic.class_count == 5);
    apply_override(cfg, "seeds=[7,8]");
    CHECK(cfg.seeds == std::vector<std::uint64_t>({7, 8}));
    apply_override(cfg, "llm.provider.model=my-model");  // bare string
    CHECK(cfg.llm.provider.model == "my-model");
    apply_override(cfg, "fine_tune_encoder=true");
    CHECK(cfg.fine_tune_encoder);
    CHECK_THROWS_AS(apply_override(cfg, "no_equals_sign"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "epochz=3"), ConfigError);
}

TEST_CASE("config hash ignores output_dir but tracks semantic changes") {
    ExperimentConfig a = tiny_synthetic_config("/tmp/a");
    ExperimentConfig b = tiny_synthetic_config("/tmp/entirely/different");
    CHECK(config_hash(a) == config_hash(b));
    b.epochs = 3;
    CHECK(config_hash(a) != config_hash(b));
    ExperimentConfig c = tiny_synthetic_config("/tmp/a");
    c.loss = LossKind::sce;
    CHECK(config_hash(a) != config_hash(c));
    CHECK(config_hash(a).size() == 16);
}

TEST_CASE("resolution forces the degenerate cases") {
    // SCE has no g output, so its hash pins levels to {1.0} regardless.
    ExperimentConfig sce = tiny_synthetic_config("/tmp/s");
    sce.loss = LossKind::sce;
    ExperimentConfig sce2 = sce;
    sce2.reservation_levels = {1.0};
    CHECK(config_hash(sce) == config_hash(sce2));

    // Invalid shapes are refused.
    ExperimentConfig bad = tiny_synthetic_config("/tmp/s");
    bad.dataset.kind = "nonsense";
    CHECK_THROWS_AS(config_hash(bad), ConfigError);
    ExperimentConfig bad2 = tiny_synthetic_config("/tmp/s");
    bad2.seeds = {1, 1};
    CHECK_THROWS_AS(config_hash(bad2), ConfigError);
    ExperimentConfig bad3 = tiny_synthetic_config("/tmp/s");
    bad3.reservation_levels = {0.75, 0.85};
    CHECK_THROWS_AS(config_hash(bad3), ConfigError);
    ExperimentConfig bad4 = tiny_synthetic_config("/tmp/s");
    bad4.model.kind = "import";  // no import path given
    CHECK_THROWS_AS(config_hash(bad4), ConfigError);
}

TEST_CASE("run_experiment persists a complete, well-formed run directory") {
    const std::string out = "/tmp/wellbench_test_run";
    fs::remove_all(out);
    const ExperimentConfig cfg = tiny_synthetic_config(out);
    const EvaluationReport report = run_experiment(cfg);

    CHECK(report.rows.size() == cfg.seeds.size() * 4);  // 4 default levels
    CHECK(report.aggregates.size() == 4);
    CHECK(report.loss == "GL");
    CHECK(report.dataset == "synthetic");
    CHECK(!report.model_id.empty());

    const fs::path run_dir = fs::path(out) / report.config_hash;
    for (const char* name : {"config.json", "report.json", "manifest.json"}) {
        CHECK(fs::exists(run_dir / name));
    }
    for (const auto seed : cfg.seeds) {
        const fs::path seed_dir = run_dir / std::to_string(seed);
        for (const char* name :
             {"split.json", "head.json", "predictions.jsonl", "metrics.json",
              "manifest.json", "train_losses.json"}) {
            CHECK(fs::exists(seed_dir / name));
        }
        CHECK(fs::exists(seed_dir / "attention" / "index.jsonl"));
    }

    // Aggregates are the arithmetic seed means, to 1e-12.
    for (const ReportAggregate& agg : report.aggregates) {
        double f1 = 0;
        std::size_t n = 0;
        for (const ReportRow& row : report.rows) {
            if (row.reservation == agg.reservation) {
                f1 += row.metrics.f1;
                ++n;
            }
        }
        CHECK(n == cfg.seeds.size());
        CHECK(agg.metrics.f1 ==
              doctest::Approx(f1 / double(n)).epsilon(1e-12));
    }

    // The persisted report round-trips into an identical document.
    const EvaluationReport back = report_from_json(slurp(run_dir / "report.json"));
    CHECK(report_to_json(back) == report_to_json(report));

    fs::remove_all(out);
}

TEST_CASE("two identical runs produce bitwise-identical reports") {
    const std::string out1 = "/tmp/wellbench_test_det1";
    const std::string out2 = "/tmp/wellbench_test_det2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    ExperimentConfig cfg = tiny_synthetic_config(out1);
    cfg.seeds = {200};
    const EvaluationReport r1 = run_experiment(cfg);
    cfg.output_dir = out2;
    const EvaluationReport r2 = run_experiment(cfg);
    CHECK(r1.config_hash == r2.config_hash);
    const std::string a = slurp(fs::path(out1) / r1.config_hash / "report.json");
    const std::string b = slurp(fs::path(out2) / r2.config_hash / "report.json");
    CHECK(a == b);
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("a failing stage leaves a manifest naming the stage") {
    const std::string out = "/tmp/wellbench_test_fail";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_synthetic_config(out);
    cfg.dataset.kind = "multiwd";
    cfg.dataset.path = "/nonexistent/file.csv";
    cfg.task_kind = TaskKind::multi_label;
    cfg.label_count = 6;
    CHECK_THROWS(run_experiment(cfg));
    bool found = false;
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (entry.path().filename() == "failure.json") {
            found = true;
            const std::string text = slurp(entry.path());
            CHECK(text.find("\"stage\": \"load\"") != std::string::npos);
        }
    }
    CHECK(found);
    fs::remove_all(out);
}

TEST_CASE("prediction export/import round-trip rebuilds identical records") {
    std::vector<PredictionRecord> records;
    for (int i = 0; i < 5; ++i) {
        PredictionRecord r;
        r.sample_id = "rec" + std::to_string(i);
        r.task_kind = TaskKind::multi_class;
        r.probs = Eigen::VectorXd::Constant(4, 0.2);
        r.probs(i % 4) = 0.4;
        if (i % 2 == 0) r.reservation = 0.1 * i;
        derive_predicted(r);
        records.push_back(r);
    }
    const std::string path = "/tmp/wellbench_test_preds.jsonl";
    write_predictions_jsonl(records, 4, path);
    const ImportResult imported = import_predictions(path);
    CHECK(imported.rejected.empty());
    REQUIRE(imported.records.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(imported.records[i].sample_id == records[i].sample_id);
        CHECK(imported.records[i].probs == records[i].probs);
        CHECK(imported.records[i].reservation == records[i].reservation);
        CHECK(imported.records[i].predicted_class ==
              records[i].predicted_class);
    }
    std::remove(path.c_str());
}

TEST_CASE("import rejects broken records but keeps the good ones") {
    const std::string path = "/tmp/wellbench_test_badpreds.jsonl";
    {
        std::ofstream out(path);
        out << R"({"format":"predictions","version":1,"task":"multi_class","label_count":4})"
            << "\n";
        out << R"({"sample_id":"ok","probs":[0.1,0.2,0.3,0.4]})" << "\n";
        out << R"({"sample_id":"bad-prob","probs":[0.1,0.2,0.3,1.4]})" << "\n";
        out << R"({"sample_id":"bad-len","probs":[0.1,0.2]})" << "\n";
        out << R"({"probs":[0.1,0.2,0.3,0.4]})" << "\n";
        out << R"({"sample_id":"ok","probs":[0.1,0.2,0.3,0.4]})" << "\n";
        out << R"({"sample_id":"bad-res","probs":[0.1,0.2,0.3,0.4],"reservation":2.0})"
            << "\n";
    }
    const ImportResult imported = import_predictions(path);
    CHECK(imported.records.size() == 1);
    CHECK(imported.records[0].sample_id == "ok");
    REQUIRE(imported.rejected.size() == 5);
    std::remove(path.c_str());

    const std::string wrong_header = "/tmp/wellbench_test_wrongheader.jsonl";
    {
        std::ofstream out(wrong_header);
        out << R"({"format":"posts","version":1})" << "\n";
    }
    CHECK_THROWS_AS(import_predictions(wrong_header), ImportError);
    std::remove(wrong_header.c_str());
}

TEST_CASE("markdown and csv rendering are deterministic and well-shaped") {
    const std::string out = "/tmp/wellbench_test_render";
    fs::remove_all(out);
    ExperimentConfig cfg = tiny_synthetic_config(out);
    cfg.seeds = {200};
    const EvaluationReport report = run_experiment(cfg);
    fs::remove_all(out);

    const std::string md = render_report({report}, ReportFormat::markdown);
    CHECK(md.find("Res=100% F1") != std::string::npos);
    CHECK(md.find("Res=75% MCC") != std::string::npos);
    CHECK(md.find("| mean |") != std::string::npos);
    CHECK(md.find(report.config_hash) != std::string::npos);
    CHECK(md == render_report({report}, ReportFormat::markdown));

    const std::string csv = render_report({report}, ReportFormat::csv);
    std::istringstream lines(csv);
    std::string header;
    std::getline(lines, header);
    CHECK(header ==
          "model,loss,label_count,dataset,config_hash,seed,reservation,kept,"
          "precision,recall,f1,accuracy,mcc,ao,avg_rank");
    std::size_t data_lines = 0;
    for (std::string line; std::getline(lines, line);) {
        if (!line.empty()) ++data_lines;
    }
    // 4 seed rows + 4 aggregate rows.
    CHECK(data_lines == 8);

    CHECK_THROWS_AS(render_report({}, ReportFormat::markdown), ValidationError);
}

TEST_CASE("reports sort by model, loss, and label count when rendered together") {
    EvaluationReport a;
    a.config_hash = "aaaa";
    a.model_id = "zeta";
    a.loss = "SCE";
    a.label_count = 4;
    a.dataset = "synthetic";
    a.seeds = {1};
    a.levels = {1.0};
    ReportRow row;
    row.seed = 1;
    row.reservation = 1.0;
    row.kept_count = 1;
    a.rows = {row};
    ReportAggregate agg;
    agg.reservation = 1.0;
    a.aggregates = {agg};

    EvaluationReport b = a;
    b.config_hash = "bbbb";
    b.model_id = "alpha";

    const std::string md = render_report({a, b}, ReportFormat::markdown);
    CHECK(md.find("alpha") < md.find("zeta"));
}

TEST_CASE("llm experiment over the replay fixture writes its run artifacts") {
    const std::string out = "/tmp/wellbench_test_llmrun";
    fs::remove_all(out);

    ExperimentConfig cfg;
    cfg.dataset.kind = "posts";
    cfg.dataset.path = kFixtures + "/llm_posts.jsonl";
    cfg.dataset.train_fraction = 0.5;
    cfg.task_kind = TaskKind::multi_class;
    cfg.label_count = 4;
    cfg.seeds = {7};
    cfg.llm.shots_per_class = 0;
    cfg.llm.provider.provider_id = "replay-fixture";
    cfg.llm.provider.model = "canned-model";
    cfg.llm.provider.temperature = 0.0;
    cfg.llm.provider.replay = true;
    cfg.llm.provider.transcript_path = kFixtures + "/llm_transcript.jsonl";
    cfg.output_dir = out;

    const LlmRunReport report = run_llm_experiment(cfg);
    CHECK(report.template_id == "zero-shot/v1");
    CHECK(report.provider == "replay-fixture/canned-model");
    CHECK(report.sample_count == 10);  // half of the fixture posts
    CHECK(report.evaluation.metrics.support > 0);

    const fs::path run_dir = fs::path(out) / report.config_hash / "llm";
    CHECK(fs::exists(run_dir / "outcomes.jsonl"));
    CHECK(fs::exists(run_dir / "report.json"));
    CHECK(fs::exists(run_dir / "manifest.json"));

    const std::string rendered = render_llm_report(report);
    CHECK(rendered.find("replay-fixture/canned-model") != std::string::npos);
    CHECK(rendered.find("zero-shot/v1") != std::string::npos);
    fs::remove_all(out);
}
