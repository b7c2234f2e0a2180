#include "hulm/cli.hpp"

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hulm/corpus.hpp"
#include "hulm/errors.hpp"
#include "hulm/metrics.hpp"
#include "hulm/report.hpp"
#include "hulm/train.hpp"
#include "hulm/util.hpp"

namespace hulm::cli {

const char* const kToolVersion = "0.1.0";

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

void write_manifest(const std::string& out_dir, const std::string& command, uint64_t seed,
                    const KvConfig& resolved, const std::map<std::string, std::string>& inputs,
                    std::vector<std::string> artifacts) {
    ordered_json m;
    m["tool"] = "hulm";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["seed"] = seed;
    m["config"] = ordered_json::object();
    for (const auto& [k, v] : resolved.entries()) {
        m["config"][k] = v;
    }
    m["inputs"] = ordered_json::object();
    for (const auto& [path, hash] : inputs) {
        m["inputs"][path] = hash;
    }
    std::sort(artifacts.begin(), artifacts.end());
    m["artifacts"] = artifacts;
    write_file(out_dir + "/manifest.json", m.dump(2) + "\n");
}

void require_fresh_dir(const std::string& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            throw ConfigError("output directory '" + dir +
                              "' is not empty (use --force to overwrite)");
        }
        fs::remove_all(dir);
    }
    ensure_dir(dir);
}

// ---------------------------------------------------------------------------
// corpus directory access
// ---------------------------------------------------------------------------

struct CorpusDir {
    std::string dir;
    std::vector<AuthorRecord> train, dev, test;
    std::string tokenizer_spec;
    std::map<std::string, std::string> hashes;  // per split file

    const std::vector<AuthorRecord>& split(const std::string& name) const {
        if (name == "train") {
            return train;
        }
        if (name == "dev") {
            return dev;
        }
        if (name == "test") {
            return test;
        }
        throw ConfigError("unknown split '" + name + "' (train | dev | test)");
    }
};

CorpusDir load_corpus_dir(const std::string& dir) {
    CorpusDir c;
    c.dir = dir;
    for (const char* split : {"train", "dev", "test"}) {
        const std::string path = dir + "/" + split + ".jsonl";
        if (!fs::exists(path)) {
            throw DataError("corpus directory '" + dir + "' is missing " + split + ".jsonl");
        }
        auto authors = ingest(path);
        c.hashes[std::string(split) + ".jsonl"] = file_hash(path);
        if (std::string(split) == "train") {
            c.train = std::move(authors);
        } else if (std::string(split) == "dev") {
            c.dev = std::move(authors);
        } else {
            c.test = std::move(authors);
        }
    }
    const std::string vocab_path = dir + "/vocab.txt";
    c.tokenizer_spec = fs::exists(vocab_path) ? "file:" + vocab_path : "byte";
    return c;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const std::string& spec_path, const std::string& out_dir, bool force,
                 long seed_override) {
    KvConfig spec_kv = KvConfig::parse_file(spec_path);
    SyntheticSpec spec;
    spec.n_authors = static_cast<int>(spec_kv.get_int("n_authors", spec.n_authors));
    spec.docs_per_author = static_cast<int>(spec_kv.get_int("docs_per_author", spec.docs_per_author));
    spec.doc_len = static_cast<int>(spec_kv.get_int("doc_len", spec.doc_len));
    spec.vocab_size = static_cast<int>(spec_kv.get_int("vocab_size", spec.vocab_size));
    spec.group_signal = spec_kv.get_double("group_signal", spec.group_signal);
    spec.individual_signal = spec_kv.get_double("individual_signal", spec.individual_signal);
    spec.age_min = spec_kv.get_double("age_min", spec.age_min);
    spec.age_max = spec_kv.get_double("age_max", spec.age_max);
    spec.seed = static_cast<uint64_t>(spec_kv.get_int("seed", 1));
    if (seed_override >= 0) {
        spec.seed = static_cast<uint64_t>(seed_override);
    }
    const double train_ratio = spec_kv.get_double("split.train", 0.8);
    const double dev_ratio = spec_kv.get_double("split.dev", 0.1);
    const double test_ratio = spec_kv.get_double("split.test", 0.1);

    require_fresh_dir(out_dir, force);
    auto authors = generate_synthetic(spec);
    auto splits = split_authors(std::move(authors), train_ratio, dev_ratio, test_ratio, spec.seed);
    write_corpus(out_dir + "/train.jsonl", splits.train);
    write_corpus(out_dir + "/dev.jsonl", splits.dev);
    write_corpus(out_dir + "/test.jsonl", splits.test);
    write_file(out_dir + "/vocab.txt", synthetic_vocab_file_text(spec));

    KvConfig resolved;
    resolved.set_int("n_authors", spec.n_authors);
    resolved.set_int("docs_per_author", spec.docs_per_author);
    resolved.set_int("doc_len", spec.doc_len);
    resolved.set_int("vocab_size", spec.vocab_size);
    resolved.set_double("group_signal", spec.group_signal);
    resolved.set_double("individual_signal", spec.individual_signal);
    resolved.set_double("age_min", spec.age_min);
    resolved.set_double("age_max", spec.age_max);
    resolved.set_int("seed", static_cast<long>(spec.seed));
    resolved.set_double("split.train", train_ratio);
    resolved.set_double("split.dev", dev_ratio);
    resolved.set_double("split.test", test_ratio);
    write_file(out_dir + "/config_snapshot.kv", resolved.serialize());
    write_manifest(out_dir, "generate", spec.seed, resolved, {{spec_path, file_hash(spec_path)}},
                   {"train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "config_snapshot.kv"});
    std::cout << "generated " << splits.train.size() << "/" << splits.dev.size() << "/"
              << splits.test.size() << " train/dev/test authors in " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain / transfer shared config plumbing
// ---------------------------------------------------------------------------

ModelConfig model_config_from(const KvConfig& kv, int vocab_size) {
    ModelConfig mc;
    if (kv.get_str("model.preset", "desk") == "full") {
        mc = ModelConfig::full_scale();
    }
    mc.vocab_size = vocab_size;
    mc.d_model = static_cast<int>(kv.get_int("model.d_model", mc.d_model));
    mc.n_heads = static_cast<int>(kv.get_int("model.n_heads", mc.n_heads));
    mc.n_layers = static_cast<int>(kv.get_int("model.n_layers", mc.n_layers));
    mc.block_len = static_cast<int>(kv.get_int("model.block_len", mc.block_len));
    mc.insert_layer = static_cast<int>(kv.get_int("model.insert_layer", mc.insert_layer));
    mc.extract_layer = static_cast<int>(kv.get_int("model.extract_layer", mc.extract_layer));
    mc.d_user = static_cast<int>(kv.get_int("model.d_user", mc.d_user));
    mc.max_blocks = static_cast<int>(kv.get_int("model.max_blocks", mc.max_blocks));
    mc.dropout_rate = kv.get_double("model.dropout_rate", mc.dropout_rate);
    return mc;
}

void snapshot_model_config(KvConfig& kv, const ModelConfig& mc) {
    kv.set_int("model.d_model", mc.d_model);
    kv.set_int("model.n_heads", mc.n_heads);
    kv.set_int("model.n_layers", mc.n_layers);
    kv.set_int("model.block_len", mc.block_len);
    kv.set_int("model.insert_layer", mc.insert_layer);
    kv.set_int("model.extract_layer", mc.extract_layer);
    kv.set_int("model.d_user", mc.resolved_d_user());
    kv.set_int("model.max_blocks", mc.max_blocks);
    kv.set_double("model.dropout_rate", mc.dropout_rate);
    kv.set_int("model.vocab_size", mc.vocab_size);
}

void write_run_outputs(const std::string& out_dir, TrainedModel& tm, const TrainLogs& logs) {
    // final.ckpt carries the best dev-perplexity epoch; the raw per-epoch
    // checkpoints keep the uninterrupted trajectory for resuming
    restore_best(tm);
    save_trained(out_dir + "/final.ckpt", tm);
    write_file(out_dir + "/loss_log.csv", logs.loss_csv());
    write_file(out_dir + "/dev_log.csv", logs.dev_csv());
    ordered_json summary;
    summary["steps"] = tm.step;
    summary["epochs"] = tm.epoch;
    if (tm.best_epoch > 0) {
        summary["best_epoch"] = tm.best_epoch;
        summary["best_dev_ppl"] = tm.best_dev_ppl;
    }
    if (!logs.dev.empty()) {
        summary["final_dev_ppl"] = logs.dev.back().ppl;
        if (!std::isnan(logs.dev.back().attr_metric)) {
            summary["final_dev_attr_metric"] = logs.dev.back().attr_metric;
        }
    }
    write_file(out_dir + "/summary.json", summary.dump(2) + "\n");
}

struct PretrainArgs {
    std::string config_path;
    std::string corpus_dir;
    std::string out_dir;
    std::string resume_ckpt;
    std::string regime;
    std::string attribute;
    std::string combine_rule;
    long max_blocks = -1;
    long epochs = -1;
    double lr = -1.0;
    long seed = -1;
    bool force = false;
};

int cmd_pretrain(const PretrainArgs& args) {
    KvConfig kv = args.config_path.empty() ? KvConfig() : KvConfig::parse_file(args.config_path);
    // flags override config-file values
    if (!args.corpus_dir.empty()) {
        kv.set("corpus", args.corpus_dir);
    }
    if (!args.out_dir.empty()) {
        kv.set("out", args.out_dir);
    }
    if (!args.regime.empty()) {
        kv.set("regime", args.regime);
    }
    if (!args.attribute.empty()) {
        kv.set("attribute", args.attribute);
    }
    if (!args.combine_rule.empty()) {
        kv.set("combine_rule", args.combine_rule);
    }
    if (args.max_blocks >= 0) {
        kv.set_int("max_blocks", args.max_blocks);
    }
    if (args.epochs >= 0) {
        kv.set_int("epochs", args.epochs);
    }
    if (args.lr >= 0) {
        kv.set_double("lr", args.lr);
    }
    if (args.seed >= 0) {
        kv.set_int("seed", args.seed);
    }

    const std::string corpus_dir = kv.require_str("corpus");
    const std::string out_dir = kv.require_str("out");

    RegimeConfig rc;
    rc.regime = parse_regime(kv.get_str("regime", "none"));
    rc.attribute = kv.get_str("attribute", "");
    rc.attr_kind = kv.get_str("attr_kind", "continuous") == "binary" ? AttrKind::binary
                                                                     : AttrKind::continuous;
    rc.combine_rule = kv.has("combine_rule") ? parse_combine_rule(kv.require_str("combine_rule"))
                                             : default_combine_rule(rc.regime);
    rc.lr = kv.get_double("lr", 1e-3);
    rc.epochs = static_cast<int>(kv.get_int("epochs", 1));
    rc.max_blocks = static_cast<int>(kv.get_int("max_blocks", 8));
    rc.batch_authors = static_cast<int>(kv.get_int("batch_authors", 4));
    rc.seed = static_cast<uint64_t>(kv.get_int("seed", 1));
    rc.validate();  // reject invalid regime/attribute combinations before compute

    CorpusDir corpus = load_corpus_dir(corpus_dir);
    auto tok = make_tokenizer(corpus.tokenizer_spec);
    ModelConfig mc = model_config_from(kv, tok->vocab_size());
    mc.user_state_pathway = rc.uses_user_states();
    mc.validate();

    require_fresh_dir(out_dir, args.force);

    // optional learning-rate search before the real run
    const int lr_trials = static_cast<int>(kv.get_int("lr_search.trials", 0));
    if (lr_trials > 0 || kv.has("lr_search.grid")) {
        LrSearchSpace space;
        space.trials = lr_trials;
        space.low = kv.get_double("lr_search.low", 5e-6);
        space.high = kv.get_double("lr_search.high", 5e-4);
        if (kv.has("lr_search.grid")) {
            std::istringstream gs(kv.require_str("lr_search.grid"));
            std::string tokstr;
            while (std::getline(gs, tokstr, ';')) {
                space.grid.push_back(std::stod(tokstr));
            }
        }
        const int probe_epochs = static_cast<int>(kv.get_int("lr_search.epochs", 1));
        std::vector<LrTrial> trace;
        rc.lr = lr_search(space, rc.seed, false, [&](double lr) {
            RegimeConfig probe = rc;
            probe.lr = lr;
            probe.epochs = probe_epochs;
            TrainLogs probe_logs;
            TrainedModel tmp = pretrain(corpus.train, corpus.dev, mc, probe, *tok,
                                        corpus.tokenizer_spec, &probe_logs);
            return probe_logs.dev.empty() ? probe_logs.loss.back().l_lm
                                          : probe_logs.dev.back().ppl;
        }, &trace);
        std::string lr_log = "lr,dev_objective\n";
        for (const auto& t : trace) {
            lr_log += format_double(t.lr) + "," + format_double(t.metric) + "\n";
        }
        write_file(out_dir + "/lr_search.csv", lr_log);
    }

    TrainLogs logs;
    TrainedModel tm = [&]() {
        if (!args.resume_ckpt.empty()) {
            TrainedModel resumed = load_trained(args.resume_ckpt);
            resumed.regime_cfg.epochs = rc.epochs;
            if (args.lr >= 0) {
                resumed.regime_cfg.lr = args.lr;
            }
            pretrain_continue(resumed, corpus.train, corpus.dev, *tok, rc.epochs, &logs, out_dir);
            return resumed;
        }
        return pretrain(corpus.train, corpus.dev, mc, rc, *tok, corpus.tokenizer_spec, &logs,
                        out_dir);
    }();
    write_run_outputs(out_dir, tm, logs);

    KvConfig resolved = kv;
    resolved.set("corpus", corpus_dir);
    resolved.set("out", out_dir);
    resolved.set("regime", to_string(rc.regime));
    resolved.set("attribute", rc.attribute);
    resolved.set("attr_kind", rc.attr_kind == AttrKind::binary ? "binary" : "continuous");
    resolved.set("combine_rule", to_string(rc.combine_rule));
    resolved.set_double("lr", rc.lr);
    resolved.set_int("epochs", rc.epochs);
    resolved.set_int("max_blocks", rc.max_blocks);
    resolved.set_int("batch_authors", rc.batch_authors);
    resolved.set_int("seed", static_cast<long>(rc.seed));
    resolved.set("tokenizer", corpus.tokenizer_spec);
    snapshot_model_config(resolved, tm.model_cfg);
    write_file(out_dir + "/config_snapshot.kv", resolved.serialize());

    std::map<std::string, std::string> inputs;
    for (const auto& [name, hash] : corpus.hashes) {
        inputs[corpus_dir + "/" + name] = hash;
    }
    if (!args.config_path.empty()) {
        inputs[args.config_path] = file_hash(args.config_path);
    }
    if (!args.resume_ckpt.empty()) {
        inputs[args.resume_ckpt] = file_hash(args.resume_ckpt);
    }
    std::vector<std::string> artifacts{"final.ckpt", "loss_log.csv", "dev_log.csv", "summary.json",
                                       "config_snapshot.kv"};
    for (int e = 1; e <= tm.epoch; ++e) {
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoints/epoch_%03d.ckpt", e);
        if (fs::exists(out_dir + "/" + name)) {
            artifacts.push_back(name);
        }
    }
    write_manifest(out_dir, "pretrain", rc.seed, resolved, inputs, artifacts);
    std::cout << "pretrained regime=" << to_string(tm.regime_cfg.regime) << " steps=" << tm.step
              << " -> " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// finetune / transfer
// ---------------------------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ';') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

int cmd_finetune(const std::string& config_path, bool force) {
    KvConfig kv = KvConfig::parse_file(config_path);
    const std::string ckpt = kv.require_str("checkpoint");
    const std::string corpus_dir = kv.require_str("corpus");
    const std::string out_dir = kv.require_str("out");

    TaskSpec base_task;
    const std::string kind = kv.require_str("task");
    if (kind == "user_regression") {
        base_task.kind = TaskSpec::Kind::user_regression;
        base_task.dev_metric = TaskSpec::Metric::pearson;
    } else if (kind == "doc_classification") {
        base_task.kind = TaskSpec::Kind::doc_classification;
        base_task.dev_metric = TaskSpec::Metric::f1_macro;
    } else {
        throw ConfigError("task must be user_regression or doc_classification, got '" + kind + "'");
    }
    // stance-style tasks list several targets; one model is trained per
    // target and the dev metrics are averaged unweighted
    const std::vector<std::string> targets =
        split_list(kv.has("targets") ? kv.require_str("targets") : kv.require_str("target"));
    const std::vector<std::string> class_counts = split_list(kv.get_str("n_classes", "0"));
    if (class_counts.size() != 1 && class_counts.size() != targets.size()) {
        throw ConfigError("n_classes must be one value or one per target");
    }
    base_task.use_history = kv.get_bool("use_history", false);
    if (kv.has("metric")) {
        base_task.dev_metric = parse_task_metric(kv.require_str("metric"));
    }

    FinetuneConfig fc;
    fc.lr = kv.get_double("lr", 1e-3);
    fc.epochs = static_cast<int>(kv.get_int("epochs", 4));
    fc.batch = static_cast<int>(kv.get_int("batch", 4));
    fc.max_blocks = static_cast<int>(kv.get_int("max_blocks", 4));
    fc.seed = static_cast<uint64_t>(kv.get_int("seed", 1));

    CorpusDir corpus = load_corpus_dir(corpus_dir);
    require_fresh_dir(out_dir, force);

    ordered_json summary;
    double metric_sum = 0.0;
    TrainedModel tm = load_trained(ckpt);
    for (size_t ti = 0; ti < targets.size(); ++ti) {
        TaskSpec task = base_task;
        task.target = targets[ti];
        task.n_classes = std::stoi(class_counts[class_counts.size() == 1 ? 0 : ti]);
        const std::string sub = targets.size() == 1 ? out_dir : out_dir + "/target_" + task.target;
        if (ti > 0) {
            tm = load_trained(ckpt);  // fresh model per target
        }
        auto tok = tm.make_tok();
        FinetuneResult res = finetune(tm, task, corpus.train, corpus.dev, fc, *tok);
        save_trained(sub + "/final.ckpt", tm);
        std::string dev_log = "epoch,dev_metric\n";
        for (const auto& [epoch, metric] : res.dev_by_epoch) {
            dev_log += std::to_string(epoch) + "," + format_double(metric) + "\n";
        }
        write_file(sub + "/dev_log.csv", dev_log);
        ordered_json t;
        t["target"] = task.target;
        t["best_epoch"] = res.best_epoch;
        t["best_dev_metric"] = res.best_dev_metric;
        summary["targets"].push_back(t);
        metric_sum += res.best_dev_metric;
    }
    summary["aggregate_dev_metric"] = metric_sum / static_cast<double>(targets.size());
    if (targets.size() == 1) {
        summary["best_epoch"] = summary["targets"][0]["best_epoch"];
        summary["best_dev_metric"] = summary["targets"][0]["best_dev_metric"];
    }
    write_file(out_dir + "/summary.json", summary.dump(2) + "\n");

    KvConfig resolved = kv;
    resolved.set_double("lr", fc.lr);
    resolved.set_int("epochs", fc.epochs);
    resolved.set_int("batch", fc.batch);
    resolved.set_int("max_blocks", fc.max_blocks);
    resolved.set_int("seed", static_cast<long>(fc.seed));
    write_file(out_dir + "/config_snapshot.kv", resolved.serialize());
    std::map<std::string, std::string> inputs{{ckpt, file_hash(ckpt)},
                                              {config_path, file_hash(config_path)}};
    for (const auto& [name, hash] : corpus.hashes) {
        inputs[corpus_dir + "/" + name] = hash;
    }
    std::vector<std::string> artifacts{"summary.json", "config_snapshot.kv"};
    if (targets.size() == 1) {
        artifacts.push_back("final.ckpt");
        artifacts.push_back("dev_log.csv");
    } else {
        for (const std::string& t : targets) {
            artifacts.push_back("target_" + t + "/final.ckpt");
            artifacts.push_back("target_" + t + "/dev_log.csv");
        }
    }
    write_manifest(out_dir, "finetune", fc.seed, resolved, inputs, artifacts);
    std::cout << "finetuned task=" << kind << " aggregate_dev_metric="
              << summary["aggregate_dev_metric"].get<double>() << " -> " << out_dir << "\n";
    return 0;
}

int cmd_transfer(const std::string& config_path, bool force) {
    KvConfig kv = KvConfig::parse_file(config_path);
    const std::string ckpt = kv.require_str("checkpoint");
    const std::string corpus_dir = kv.require_str("corpus");
    const std::string out_dir = kv.require_str("out");
    const std::string attribute = kv.require_str("attribute");
    const double lr = kv.get_double("lr", 1e-3);
    const int epochs = static_cast<int>(kv.get_int("epochs", 4));

    CorpusDir corpus = load_corpus_dir(corpus_dir);
    TrainedModel tm = load_trained(ckpt);
    auto tok = tm.make_tok();
    require_fresh_dir(out_dir, force);

    TrainLogs logs;
    transfer_learn(tm, attribute, corpus.train, corpus.dev, *tok, epochs, lr, &logs, out_dir);
    write_run_outputs(out_dir, tm, logs);

    KvConfig resolved = kv;
    resolved.set_double("lr", lr);
    resolved.set_int("epochs", epochs);
    write_file(out_dir + "/config_snapshot.kv", resolved.serialize());
    std::map<std::string, std::string> inputs{{ckpt, file_hash(ckpt)},
                                              {config_path, file_hash(config_path)}};
    for (const auto& [name, hash] : corpus.hashes) {
        inputs[corpus_dir + "/" + name] = hash;
    }
    write_manifest(out_dir, "transfer", tm.regime_cfg.seed, resolved, inputs,
                   {"final.ckpt", "loss_log.csv", "dev_log.csv", "summary.json",
                    "config_snapshot.kv"});
    std::cout << "transferred to attribute=" << attribute << " -> " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

ordered_json bucket_scores_json(const std::vector<BucketScore>& scores) {
    ordered_json arr = ordered_json::array();
    for (const auto& s : scores) {
        arr.push_back({{"bucket", s.bucket}, {"n", s.n}, {"score", s.score}, {"defined", s.defined}});
    }
    return arr;
}

std::vector<double> defined_scores(const std::vector<BucketScore>& scores) {
    std::vector<double> v;
    for (const auto& s : scores) {
        if (s.defined) {
            v.push_back(s.score);
        }
    }
    return v;
}

// score a prediction set into metric map + bucket analyses
ordered_json score_predictions(const PredictionSet& ps, double rel_pred, double rel_gold) {
    ordered_json out;
    out["n"] = ps.rows.size();
    std::vector<double> p, g;
    bool buckets_present = !ps.rows.empty();
    for (const auto& r : ps.rows) {
        p.push_back(r.prediction);
        g.push_back(r.gold);
        buckets_present = buckets_present && !r.bucket.empty();
    }
    ordered_json metrics;
    if (ps.unit == PredictionSet::Unit::document) {
        std::vector<int> pi, gi;
        for (size_t i = 0; i < p.size(); ++i) {
            pi.push_back(static_cast<int>(p[i]));
            gi.push_back(static_cast<int>(g[i]));
        }
        double acc = 0;
        for (size_t i = 0; i < pi.size(); ++i) {
            acc += pi[i] == gi[i];
        }
        metrics["accuracy"] = acc / static_cast<double>(pi.size());
        metrics["f1_macro"] = f1_score(pi, gi, F1Average::macro);
        metrics["f1_weighted"] = f1_score(pi, gi, F1Average::weighted);
    } else {
        metrics["mse"] = mse(p, g);
        if (p.size() >= 2) {
            try {
                metrics["pearson_r"] = pearson_r(p, g);
                metrics["disattenuated_r"] = disattenuated_r(p, g, rel_pred, rel_gold);
            } catch (const NumericError&) {
                // zero-variance predictions leave the correlation undefined
            }
        }
        if (buckets_present) {
            const BucketScheme scheme = BucketScheme::default_age();
            auto by_r = bucketed_metric(ps, BucketMetric::pearson, scheme);
            auto by_rdis =
                bucketed_metric(ps, BucketMetric::disattenuated_pearson, scheme, rel_pred, rel_gold);
            auto by_mse = bucketed_metric(ps, BucketMetric::mse, scheme);
            out["buckets"]["pearson_r"] = bucket_scores_json(by_r);
            out["buckets"]["disattenuated_r"] = bucket_scores_json(by_rdis);
            out["buckets"]["mse"] = bucket_scores_json(by_mse);
            const auto rs = defined_scores(by_r);
            if (rs.size() >= 2) {
                metrics["med_pearson_r"] = mean_error_disparity(rs);
            }
            const auto rdis = defined_scores(by_rdis);
            if (rdis.size() >= 2) {
                metrics["med_disattenuated_r"] = mean_error_disparity(rdis);
            }
            const auto ms = defined_scores(by_mse);
            if (ms.size() >= 2) {
                metrics["med_mse"] = mean_error_disparity(ms);
            }
        }
    }
    out["metrics"] = metrics;
    return out;
}

struct EvaluateArgs {
    std::string run_dir;
    std::string checkpoint;
    std::string corpus_dir;
    std::string split = "test";
    std::string predictions_file;
    std::string out_dir;
    double rel_pred = 1.0;
    double rel_gold = 1.0;
    bool json_out = false;
    bool dump_user_states = false;
    bool force = false;
};

int cmd_evaluate(const EvaluateArgs& args) {
    // external prediction files are scoreable on their own
    if (!args.predictions_file.empty()) {
        std::map<std::string, std::string> meta;
        PredictionSet ps = read_predictions(args.predictions_file, &meta);
        ordered_json out = score_predictions(ps, args.rel_pred, args.rel_gold);
        out["source"] = args.predictions_file;
        if (meta.count("split_hash")) {
            out["split_hash"] = meta.at("split_hash");
        }
        const std::string text = out.dump(2) + "\n";
        if (!args.out_dir.empty()) {
            ensure_dir(args.out_dir);
            write_file(args.out_dir + "/metrics.json", text);
        }
        std::cout << text;
        return 0;
    }

    std::string ckpt = args.checkpoint;
    std::string corpus_dir = args.corpus_dir;
    if (!args.run_dir.empty()) {
        if (ckpt.empty()) {
            ckpt = args.run_dir + "/final.ckpt";
        }
        if (corpus_dir.empty()) {
            KvConfig snap = KvConfig::parse_file(args.run_dir + "/config_snapshot.kv");
            corpus_dir = snap.require_str("corpus");
        }
    }
    if (ckpt.empty() || corpus_dir.empty()) {
        throw ConfigError("evaluate needs --run, or --checkpoint with --corpus, or --predictions");
    }
    const std::string out_dir = args.out_dir.empty()
                                    ? (args.run_dir.empty() ? "." : args.run_dir) + "/eval_" + args.split
                                    : args.out_dir;
    require_fresh_dir(out_dir, args.force);

    CorpusDir corpus = load_corpus_dir(corpus_dir);
    const auto& authors = corpus.split(args.split);
    if (authors.empty()) {
        throw DataError("split '" + args.split + "' is empty");
    }
    TrainedModel tm = load_trained(ckpt);
    auto tok = tm.make_tok();
    const std::string split_hash = corpus.hashes.at(args.split + ".jsonl");

    ordered_json out;
    out["checkpoint"] = file_hash(ckpt);  // content hash keeps reports path-free
    out["split"] = args.split;
    out["split_hash"] = split_hash;
    ordered_json metrics;

    auto seqs = build_split_sequences(authors, *tok, tm.model_cfg.block_len,
                                      tm.regime_cfg.max_blocks);
    metrics["ppl"] = perplexity(*tm.model, seqs, tm.regime_cfg.mode());

    std::vector<std::string> artifacts{"metrics.json"};
    if (!tm.regime_cfg.attribute.empty() && (tm.reg_head || tm.cls_head)) {
        PredictionSet ps = predict_user_attribute(tm, authors, *tok);
        write_predictions(out_dir + "/predictions.csv", ps,
                          {{"split_hash", split_hash},
                           {"task", tm.regime_cfg.attribute},
                           {"checkpoint", file_hash(ckpt)}});
        artifacts.push_back("predictions.csv");
        ordered_json scored = score_predictions(ps, args.rel_pred, args.rel_gold);
        for (auto it = scored["metrics"].begin(); it != scored["metrics"].end(); ++it) {
            metrics[tm.regime_cfg.attribute + "_" + it.key()] = it.value();
        }
        if (scored.contains("buckets")) {
            out["buckets"] = scored["buckets"];
        }
    }
    if (args.dump_user_states && tm.regime_cfg.uses_user_states()) {
        write_file(out_dir + "/user_states.jsonl", user_state_dump(tm, authors, *tok));
        artifacts.push_back("user_states.jsonl");
    }

    out["metrics"] = metrics;
    const std::string text = out.dump(2) + "\n";
    write_file(out_dir + "/metrics.json", text);
    KvConfig resolved;
    resolved.set("checkpoint", ckpt);
    resolved.set("corpus", corpus_dir);
    resolved.set("split", args.split);
    resolved.set_double("rel_pred", args.rel_pred);
    resolved.set_double("rel_gold", args.rel_gold);
    write_manifest(out_dir, "evaluate", tm.regime_cfg.seed, resolved,
                   {{ckpt, file_hash(ckpt)},
                    {corpus_dir + "/" + args.split + ".jsonl", split_hash}},
                   artifacts);
    if (args.json_out) {
        std::cout << text;
    } else {
        std::cout << "split=" << args.split << " ";
        for (auto it = metrics.begin(); it != metrics.end(); ++it) {
            std::cout << it.key() << "=" << it.value().dump() << " ";
        }
        std::cout << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

int cmd_compare(const std::vector<std::string>& eval_dirs, const std::string& out_dir,
                bool json_out, bool force) {
    if (eval_dirs.empty()) {
        throw ConfigError("compare needs at least one evaluation directory");
    }
    std::vector<RunEval> runs;
    for (const std::string& dir : eval_dirs) {
        RunEval run;
        run.name = fs::path(dir).parent_path().filename().string() + "/" +
                   fs::path(dir).filename().string();
        ordered_json j = ordered_json::parse(read_file(dir + "/metrics.json"));
        run.split_hash = j.value("split_hash", "");
        for (auto it = j["metrics"].begin(); it != j["metrics"].end(); ++it) {
            run.metrics[it.key()] = it.value().get<double>();
        }
        const std::string preds_path = dir + "/predictions.csv";
        if (fs::exists(preds_path)) {
            std::map<std::string, std::string> meta;
            PredictionSet ps = read_predictions(preds_path, &meta);
            run.predictions[meta.count("task") ? meta.at("task") : "task"] = std::move(ps);
        }
        runs.push_back(std::move(run));
    }
    CompareReport rep = compare_report(runs);
    if (!out_dir.empty()) {
        require_fresh_dir(out_dir, force);
        write_file(out_dir + "/report.txt", rep.text);
        write_file(out_dir + "/report.json", rep.json);
        std::map<std::string, std::string> inputs;
        for (const auto& dir : eval_dirs) {
            inputs[dir + "/metrics.json"] = file_hash(dir + "/metrics.json");
        }
        KvConfig resolved;
        for (size_t i = 0; i < eval_dirs.size(); ++i) {
            resolved.set("run." + std::to_string(i), eval_dirs[i]);
        }
        write_manifest(out_dir, "compare", 0, resolved, inputs, {"report.txt", "report.json"});
    }
    std::cout << (json_out ? rep.json : rep.text);
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale laboratory for human-context language modeling"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "generate a synthetic multi-author corpus");
    std::string gen_spec, gen_out;
    bool gen_force = false;
    long gen_seed = -1;
    gen->add_option("--spec", gen_spec, "generator spec file (key = value)")->required();
    gen->add_option("--out", gen_out, "output corpus directory")->required();
    gen->add_option("--seed", gen_seed, "override the spec seed");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "pre-train under a human-context regime");
    PretrainArgs pa;
    pre->add_option("--config", pa.config_path, "run config file");
    pre->add_option("--corpus", pa.corpus_dir, "corpus directory from generate");
    pre->add_option("--out", pa.out_dir, "run output directory");
    pre->add_option("--resume", pa.resume_ckpt, "continue from a checkpoint");
    pre->add_option("--regime", pa.regime, "none | group | individual | group_individual");
    pre->add_option("--attribute", pa.attribute, "author attribute for group regimes");
    pre->add_option("--combine-rule", pa.combine_rule, "sum | per-task | halved | unhalved");
    pre->add_option("--max-blocks", pa.max_blocks, "training cap on blocks per author");
    pre->add_option("--epochs", pa.epochs, "training epochs");
    pre->add_option("--lr", pa.lr, "learning rate");
    pre->add_option("--seed", pa.seed, "run seed");
    pre->add_flag("--force", pa.force, "overwrite a non-empty output directory");

    // finetune / transfer
    auto* fin = app.add_subcommand("finetune", "fine-tune a checkpoint on a downstream task");
    std::string fin_config;
    bool fin_force = false;
    fin->add_option("--config", fin_config, "finetune config file")->required();
    fin->add_flag("--force", fin_force, "overwrite a non-empty output directory");

    auto* tra = app.add_subcommand("transfer", "continue joint training on a new attribute");
    std::string tra_config;
    bool tra_force = false;
    tra->add_option("--config", tra_config, "transfer config file")->required();
    tra->add_flag("--force", tra_force, "overwrite a non-empty output directory");

    // evaluate
    auto* eva = app.add_subcommand("evaluate", "evaluate a run, checkpoint, or prediction file");
    EvaluateArgs ea;
    eva->add_option("--run", ea.run_dir, "run directory (uses final.ckpt and its corpus)");
    eva->add_option("--checkpoint", ea.checkpoint, "checkpoint file");
    eva->add_option("--corpus", ea.corpus_dir, "corpus directory");
    eva->add_option("--split", ea.split, "train | dev | test (default test)");
    eva->add_option("--predictions", ea.predictions_file, "score an external prediction file");
    eva->add_option("--out", ea.out_dir, "evaluation output directory");
    eva->add_option("--rel-pred", ea.rel_pred, "prediction reliability for disattenuation");
    eva->add_option("--rel-gold", ea.rel_gold, "gold reliability for disattenuation");
    eva->add_flag("--json", ea.json_out, "print machine-readable metrics");
    eva->add_flag("--dump-user-states", ea.dump_user_states, "write per-author user states");
    eva->add_flag("--force", ea.force, "overwrite a non-empty output directory");

    // compare
    auto* cmp = app.add_subcommand("compare", "compare evaluated runs");
    std::vector<std::string> cmp_runs;
    std::string cmp_out;
    bool cmp_json = false;
    bool cmp_force = false;
    cmp->add_option("--runs", cmp_runs, "evaluation directories")->required()->expected(-1);
    cmp->add_option("--out", cmp_out, "report output directory");
    cmp->add_flag("--json", cmp_json, "print the machine-readable report");
    cmp->add_flag("--force", cmp_force, "overwrite a non-empty output directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_generate(gen_spec, gen_out, gen_force, gen_seed);
        }
        if (pre->parsed()) {
            return cmd_pretrain(pa);
        }
        if (fin->parsed()) {
            return cmd_finetune(fin_config, fin_force);
        }
        if (tra->parsed()) {
            return cmd_transfer(tra_config, tra_force);
        }
        if (eva->parsed()) {
            return cmd_evaluate(ea);
        }
        if (cmp->parsed()) {
            return cmd_compare(cmp_runs, cmp_out, cmp_json, cmp_force);
        }
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 4;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args);
}

}  // namespace hulm::cli
