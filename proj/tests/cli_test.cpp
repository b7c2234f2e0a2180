#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include <cmath>

#include "hulm/cli.hpp"
#include "hulm/metrics.hpp"
#include "hulm/util.hpp"

using namespace hulm;
namespace fs = std::filesystem;

namespace {

std::string tmp_root() {
    const std::string root = (fs::temp_directory_path() / "hulm_cli_test").string();
    return root;
}

std::string gen_spec_path() {
    const std::string path = tmp_root() + "/gen.kv";
    write_file(path,
               "n_authors = 12\n"
               "docs_per_author = 4\n"
               "doc_len = 24\n"
               "vocab_size = 24\n"
               "group_signal = 0.2\n"
               "individual_signal = 0.4\n"
               "seed = 7\n"
               "split.train = 0.5\n"
               "split.dev = 0.25\n"
               "split.test = 0.25\n");
    return path;
}

std::string small_model_keys() {
    return "model.d_model = 16\n"
           "model.n_heads = 2\n"
           "model.n_layers = 2\n"
           "model.block_len = 32\n"
           "model.insert_layer = 1\n"
           "model.extract_layer = 1\n"
           "model.dropout_rate = 0\n"
           "batch_authors = 3\n";
}

int run_cli(std::vector<std::string> args) { return hulm::cli::run(args); }

}  // namespace

TEST_CASE("generate: artifacts, determinism, and refusal semantics") {
    fs::remove_all(tmp_root());
    ensure_dir(tmp_root());
    const std::string spec = gen_spec_path();
    const std::string out1 = tmp_root() + "/corpus1";
    const std::string out2 = tmp_root() + "/corpus2";

    REQUIRE(run_cli({"generate", "--spec", spec, "--out", out1}) == 0);
    for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "manifest.json",
                          "config_snapshot.kv"}) {
        CHECK(fs::exists(out1 + "/" + f));
    }

    // refusal without --force, overwrite with it
    CHECK(run_cli({"generate", "--spec", spec, "--out", out1}) == 2);
    CHECK(run_cli({"generate", "--spec", spec, "--out", out1, "--force"}) == 0);

    REQUIRE(run_cli({"generate", "--spec", spec, "--out", out2}) == 0);
    for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"}) {
        CHECK(file_hash(out1 + "/" + std::string(f)) == file_hash(out2 + "/" + std::string(f)));
    }

    // split sizes match the requested ratios within one author
    const auto train = ingest(out1 + "/train.jsonl");
    const auto dev = ingest(out1 + "/dev.jsonl");
    const auto test = ingest(out1 + "/test.jsonl");
    CHECK(std::abs(static_cast<double>(train.size()) - 6.0) <= 1.0);
    CHECK(std::abs(static_cast<double>(dev.size()) - 3.0) <= 1.0);
    CHECK(std::abs(static_cast<double>(test.size()) - 3.0) <= 1.0);
    CHECK(train.size() + dev.size() + test.size() == 12);
}

TEST_CASE("pretrain: validation happens before compute") {
    const std::string corpus = tmp_root() + "/corpus1";
    REQUIRE(fs::exists(corpus));
    // group_individual without attribute is a config error, exit 2
    CHECK(run_cli({"pretrain", "--corpus", corpus, "--out", tmp_root() + "/bad_run",
               "--regime", "group_individual", "--epochs", "1"}) == 2);
    // missing corpus directory is a data error, exit 3
    CHECK(run_cli({"pretrain", "--corpus", tmp_root() + "/nope", "--out", tmp_root() + "/bad_run2",
               "--regime", "none", "--epochs", "1"}) == 3);
}

TEST_CASE("pretrain smoke run, evaluate, and comparison pipeline") {
    const std::string corpus = tmp_root() + "/corpus1";
    const std::string cfg_none = tmp_root() + "/none.kv";
    const std::string cfg_ind = tmp_root() + "/ind.kv";
    write_file(cfg_none, "corpus = " + corpus + "\nout = " + tmp_root() + "/run_none\n" +
                             "regime = none\nepochs = 1\nlr = 0.002\nseed = 3\n" +
                             small_model_keys());
    write_file(cfg_ind, "corpus = " + corpus + "\nout = " + tmp_root() + "/run_ind\n" +
                            "regime = individual\nepochs = 1\nlr = 0.002\nseed = 3\n" +
                            small_model_keys());
    REQUIRE(run_cli({"pretrain", "--config", cfg_none}) == 0);
    REQUIRE(run_cli({"pretrain", "--config", cfg_ind}) == 0);
    for (const char* f : {"final.ckpt", "loss_log.csv", "dev_log.csv", "manifest.json",
                          "config_snapshot.kv", "summary.json", "checkpoints/epoch_001.ckpt"}) {
        CHECK(fs::exists(tmp_root() + "/run_none/" + f));
    }

    REQUIRE(run_cli({"evaluate", "--run", tmp_root() + "/run_none", "--split", "test"}) == 0);
    REQUIRE(run_cli({"evaluate", "--run", tmp_root() + "/run_ind", "--split", "test"}) == 0);
    CHECK(fs::exists(tmp_root() + "/run_none/eval_test/metrics.json"));

    // ppl is finite and present
    const std::string metrics = read_file(tmp_root() + "/run_none/eval_test/metrics.json");
    CHECK(metrics.find("\"ppl\"") != std::string::npos);

    // comparison of the two runs yields a two-row table
    const std::string report_dir = tmp_root() + "/cmp";
    REQUIRE(run_cli({"compare", "--runs", tmp_root() + "/run_none/eval_test",
                 tmp_root() + "/run_ind/eval_test", "--out", report_dir}) == 0);
    const std::string report = read_file(report_dir + "/report.txt");
    CHECK(report.find("run_none") != std::string::npos);
    CHECK(report.find("run_ind") != std::string::npos);

    // a run evaluated on a different test file cannot be compared
    REQUIRE(run_cli({"generate", "--spec", gen_spec_path(), "--out", tmp_root() + "/corpus3",
                 "--seed", "99"}) == 0);
    REQUIRE(run_cli({"evaluate", "--run", tmp_root() + "/run_none", "--corpus",
                 tmp_root() + "/corpus3", "--split", "test", "--out",
                 tmp_root() + "/run_none/eval_other"}) == 0);
    CHECK(run_cli({"compare", "--runs", tmp_root() + "/run_none/eval_other",
               tmp_root() + "/run_ind/eval_test", "--out", tmp_root() + "/cmp2"}) == 2);
}

TEST_CASE("pretrain resume reproduces the uninterrupted loss log") {
    const std::string corpus = tmp_root() + "/corpus1";
    const std::string cfg_full = tmp_root() + "/full.kv";
    const std::string cfg_part = tmp_root() + "/part.kv";
    write_file(cfg_full, "corpus = " + corpus + "\nout = " + tmp_root() + "/run_full\n" +
                             "regime = individual\nepochs = 3\nlr = 0.002\nseed = 17\n" +
                             small_model_keys());
    write_file(cfg_part, "corpus = " + corpus + "\nout = " + tmp_root() + "/run_part\n" +
                             "regime = individual\nepochs = 1\nlr = 0.002\nseed = 17\n" +
                             small_model_keys());
    REQUIRE(run_cli({"pretrain", "--config", cfg_full}) == 0);
    REQUIRE(run_cli({"pretrain", "--config", cfg_part}) == 0);
    REQUIRE(run_cli({"pretrain", "--config", cfg_part, "--out", tmp_root() + "/run_resumed",
                 "--resume", tmp_root() + "/run_part/checkpoints/epoch_001.ckpt",
                 "--epochs", "3"}) == 0);

    // the resumed log holds epochs 2-3; it must equal the tail of the full log
    const std::string full_log = read_file(tmp_root() + "/run_full/loss_log.csv");
    const std::string resumed_log = read_file(tmp_root() + "/run_resumed/loss_log.csv");
    const std::string header = "step,l_lm,l_attr,eta_lm,eta_attr,combined\n";
    REQUIRE(resumed_log.rfind(header, 0) == 0);
    const std::string resumed_rows = resumed_log.substr(header.size());
    CHECK(!resumed_rows.empty());
    CHECK(full_log.size() > resumed_rows.size());
    CHECK(full_log.compare(full_log.size() - resumed_rows.size(), resumed_rows.size(),
                           resumed_rows) == 0);

    // final checkpoints agree bitwise
    CHECK(file_hash(tmp_root() + "/run_full/final.ckpt") ==
          file_hash(tmp_root() + "/run_resumed/final.ckpt"));
}

TEST_CASE("evaluate scores external prediction files directly") {
    // fixture with exactly two buckets of known correlations
    PredictionSet ps;
    auto add_bucket = [&](const std::string& bucket, double r, int base) {
        const std::vector<double> gold{1, 2, 3, 4};
        const std::vector<double> gc{-1.5, -0.5, 0.5, 1.5};
        const std::vector<double> e{1, -1, -1, 1};
        const double scale_e = std::sqrt(5.0) / 2.0;
        for (int i = 0; i < 4; ++i) {
            PredictionRow row;
            row.id = bucket + std::to_string(base + i);
            row.gold = gold[static_cast<size_t>(i)];
            row.prediction = r * gc[static_cast<size_t>(i)] +
                             std::sqrt(1 - r * r) * scale_e * e[static_cast<size_t>(i)];
            row.bucket = bucket;
            ps.rows.push_back(row);
        }
    };
    add_bucket("<18", 0.2, 0);
    add_bucket("45+", 0.8, 10);
    const std::string pred_path = tmp_root() + "/external_preds.csv";
    write_predictions(pred_path, ps, {{"task", "age"}});

    const std::string out = tmp_root() + "/external_eval";
    REQUIRE(run_cli({"evaluate", "--predictions", pred_path, "--out", out}) == 0);
    const std::string metrics = read_file(out + "/metrics.json");
    CHECK(metrics.find("med_pearson_r") != std::string::npos);
    // med over bucket correlations {0.2, 0.8} is 0.6
    CHECK(metrics.find("0.6") != std::string::npos);
}

TEST_CASE("full finetune and transfer round through the CLI") {
    const std::string corpus = tmp_root() + "/corpus1";
    const std::string cfg_gi = tmp_root() + "/gi.kv";
    write_file(cfg_gi, "corpus = " + corpus + "\nout = " + tmp_root() + "/run_gi\n" +
                           "regime = group_individual\nattribute = age\nepochs = 1\n" +
                           "lr = 0.002\nseed = 23\n" + small_model_keys());
    REQUIRE(run_cli({"pretrain", "--config", cfg_gi}) == 0);

    const std::string cfg_ft = tmp_root() + "/ft.kv";
    write_file(cfg_ft, "checkpoint = " + tmp_root() + "/run_gi/final.ckpt\ncorpus = " + corpus +
                           "\nout = " + tmp_root() + "/run_ft\n" +
                           "task = doc_classification\ntarget = stance\nn_classes = 3\n" +
                           "use_history = true\nmetric = f1_weighted\nepochs = 1\nlr = 0.002\n");
    REQUIRE(run_cli({"finetune", "--config", cfg_ft}) == 0);
    CHECK(fs::exists(tmp_root() + "/run_ft/final.ckpt"));
    CHECK(fs::exists(tmp_root() + "/run_ft/dev_log.csv"));

    const std::string cfg_tr = tmp_root() + "/tr.kv";
    write_file(cfg_tr, "checkpoint = " + tmp_root() + "/run_gi/final.ckpt\ncorpus = " + corpus +
                           "\nout = " + tmp_root() + "/run_tr\nattribute = ope\nepochs = 1\n" +
                           "lr = 0.002\n");
    REQUIRE(run_cli({"transfer", "--config", cfg_tr}) == 0);
    CHECK(fs::exists(tmp_root() + "/run_tr/final.ckpt"));

    // transferring from a plain checkpoint is rejected
    const std::string cfg_tr_bad = tmp_root() + "/tr_bad.kv";
    write_file(cfg_tr_bad, "checkpoint = " + tmp_root() + "/run_none/final.ckpt\ncorpus = " +
                               corpus + "\nout = " + tmp_root() + "/run_tr_bad\n" +
                               "attribute = ope\nepochs = 1\n");
    CHECK(run_cli({"transfer", "--config", cfg_tr_bad}) == 2);
}

TEST_CASE("user-state dump flag writes one record per author") {
    REQUIRE(run_cli({"evaluate", "--run", tmp_root() + "/run_ind", "--split", "dev",
                 "--dump-user-states", "--out", tmp_root() + "/run_ind/eval_dev_states"}) == 0);
    const std::string dump = read_file(tmp_root() + "/run_ind/eval_dev_states/user_states.jsonl");
    const auto dev = ingest(tmp_root() + "/corpus1/dev.jsonl");
    CHECK(static_cast<size_t>(std::count(dump.begin(), dump.end(), '\n')) == dev.size());
}

TEST_CASE("evaluate reproduces the bucket-disparity arithmetic on fixture predictions") {
    // five buckets whose per-bucket correlations are constructed exactly;
    // the reported mean error disparity must match the hand value
    auto build_fixture = [&](const std::vector<double>& rs, const std::string& path) {
        PredictionSet ps;
        const auto scheme = BucketScheme::default_age();
        const std::vector<double> gold{1, 2, 3, 4};
        const std::vector<double> gc{-1.5, -0.5, 0.5, 1.5};
        const std::vector<double> e{1, -1, -1, 1};
        const double scale_e = std::sqrt(5.0) / 2.0;
        int id = 0;
        for (size_t b = 0; b < rs.size(); ++b) {
            for (int i = 0; i < 4; ++i) {
                PredictionRow row;
                row.id = "u" + std::to_string(id++);
                row.gold = gold[static_cast<size_t>(i)];
                row.prediction = rs[b] * gc[static_cast<size_t>(i)] +
                                 std::sqrt(1 - rs[b] * rs[b]) * scale_e * e[static_cast<size_t>(i)];
                row.bucket = scheme.names[b];
                ps.rows.push_back(row);
            }
        }
        write_predictions(path, ps, {{"task", "age"}});
    };

    const std::string out1 = tmp_root() + "/fixture_eval1";
    const std::string out2 = tmp_root() + "/fixture_eval2";
    const std::string p1 = tmp_root() + "/fixture1.csv";
    const std::string p2 = tmp_root() + "/fixture2.csv";
    build_fixture({0.223, 0.230, 0.512, 0.485, 0.106}, p1);
    build_fixture({0.394, 0.278, 0.531, 0.530, 0.205}, p2);
    REQUIRE(run_cli({"evaluate", "--predictions", p1, "--out", out1}) == 0);
    REQUIRE(run_cli({"evaluate", "--predictions", p2, "--out", out2}) == 0);

    auto med_of = [](const std::string& dir) {
        const std::string text = read_file(dir + "/metrics.json");
        const auto pos = text.find("\"med_pearson_r\":");
        REQUIRE(pos != std::string::npos);
        return std::stod(text.substr(pos + 16));
    };
    CHECK(std::abs(med_of(out1) - 0.215) <= 0.0005);
    CHECK(std::abs(med_of(out2) - 0.181) <= 0.0005);
}

TEST_CASE("multi-target finetune trains one model per target and averages") {
    const std::string corpus = tmp_root() + "/corpus1";
    REQUIRE(fs::exists(tmp_root() + "/run_ind/final.ckpt"));
    const std::string cfg = tmp_root() + "/ft_multi.kv";
    write_file(cfg, "checkpoint = " + tmp_root() + "/run_ind/final.ckpt\ncorpus = " + corpus +
                        "\nout = " + tmp_root() + "/run_ft_multi\n" +
                        "task = doc_classification\ntargets = stance;topic\nn_classes = 3;5\n" +
                        "metric = f1_weighted\nepochs = 1\nlr = 0.002\n");
    REQUIRE(run_cli({"finetune", "--config", cfg}) == 0);
    CHECK(fs::exists(tmp_root() + "/run_ft_multi/target_stance/final.ckpt"));
    CHECK(fs::exists(tmp_root() + "/run_ft_multi/target_topic/final.ckpt"));
    const std::string summary = read_file(tmp_root() + "/run_ft_multi/summary.json");
    CHECK(summary.find("aggregate_dev_metric") != std::string::npos);
}
