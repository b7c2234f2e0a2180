#include "hulm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hulm/checkpoint.hpp"
#include "hulm/errors.hpp"
#include "hulm/util.hpp"

namespace hulm {

Regime parse_regime(const std::string& s) {
    if (s == "none") {
        return Regime::none;
    }
    if (s == "group") {
        return Regime::group;
    }
    if (s == "individual") {
        return Regime::individual;
    }
    if (s == "group_individual") {
        return Regime::group_individual;
    }
    throw ConfigError("unknown regime '" + s + "' (none | group | individual | group_individual)");
}

std::string to_string(Regime r) {
    switch (r) {
        case Regime::none: return "none";
        case Regime::group: return "group";
        case Regime::individual: return "individual";
        case Regime::group_individual: return "group_individual";
    }
    throw ConfigError("bad regime value");
}

CombineRule default_combine_rule(Regime r) {
    switch (r) {
        case Regime::none:
        case Regime::individual:
            return CombineRule::sum_unweighted;
        case Regime::group:
            return CombineRule::per_task_uncertainty;
        case Regime::group_individual:
            return CombineRule::stabilized_unhalved;
    }
    throw ConfigError("bad regime value");
}

void RegimeConfig::validate() const {
    if (uses_attribute() && attribute.empty()) {
        throw ConfigError("regime '" + to_string(regime) + "' requires an attribute");
    }
    if (!uses_attribute() && !attribute.empty()) {
        throw ConfigError("regime '" + to_string(regime) + "' takes no attribute (got '" +
                          attribute + "')");
    }
    if (!uses_attribute() && combine_rule != CombineRule::sum_unweighted) {
        throw ConfigError("combine rule '" + to_string(combine_rule) +
                          "' needs an attribute loss; regime '" + to_string(regime) +
                          "' has none");
    }
    if ((combine_rule == CombineRule::stabilized_halved ||
         combine_rule == CombineRule::stabilized_unhalved) &&
        attr_kind != AttrKind::continuous) {
        throw ConfigError("stabilized combine rules pair the LM loss with a regression loss; "
                          "attribute kind must be continuous");
    }
    if (lr < 0.0 || epochs < 0 || max_blocks < 1 || batch_authors < 1) {
        throw ConfigError("regime: lr >= 0, epochs >= 0, max_blocks >= 1, batch >= 1 required");
    }
}

// ----------------------------------------------------------------------------
// optimizer
// ----------------------------------------------------------------------------

void adam_step(std::map<std::string, Tensor>& params, AdamState& state, double lr) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (auto& [name, tensor] : params) {
        if (!tensor.requires_grad()) {
            continue;
        }
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != tensor.numel()) {
            m.assign(tensor.numel(), 0.0);
            v.assign(tensor.numel(), 0.0);
        }
        const auto& g = tensor.grad();
        auto& vals = tensor.values();
        for (size_t i = 0; i < vals.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ----------------------------------------------------------------------------
// heads and representations
// ----------------------------------------------------------------------------

TaskHeadParams TaskHeadParams::init(int d, int n_out, uint64_t seed) {
    TaskHeadParams h;
    h.n_out = n_out;
    h.ln_g = Tensor::full({d}, 1.0, true);
    h.ln_b = Tensor::zeros({d}, true);
    Rng rng(derive_seed(seed, "head"));
    h.w = Tensor::randn({d, n_out}, 0.02, rng, true);
    h.b = Tensor::zeros({1, n_out}, true);
    return h;
}

Tensor TaskHeadParams::apply(const Tensor& rep) const {
    return add(matmul(layer_norm(rep, ln_g, ln_b), w), b);
}

Tensor author_representation(const AuthorPass& pass, const BlockSequence& seq) {
    if (pass.mode == ForwardMode::hulm) {
        return average_user_states(pass);
    }
    // plain mode has no user states: masked mean of final-layer hidden states
    std::vector<Tensor> hiddens;
    std::vector<uint8_t> mask;
    for (size_t bi = 0; bi < seq.blocks.size(); ++bi) {
        if (!pass.non_padded[bi]) {
            continue;
        }
        hiddens.push_back(pass.final_hiddens[bi]);
        mask.insert(mask.end(), seq.blocks[bi].mask.begin(), seq.blocks[bi].mask.end());
    }
    if (hiddens.empty()) {
        throw ContractError("author_representation: no non-padded blocks");
    }
    return mean_rows_masked(hiddens.size() == 1 ? hiddens[0] : concat_rows(hiddens), mask);
}

Tensor last_token_representation(const AuthorPass& pass, const BlockSequence& seq) {
    for (size_t bi = seq.blocks.size(); bi-- > 0;) {
        if (pass.non_padded[bi]) {
            const int last = seq.blocks[bi].valid_len - 1;
            return slice_rows(pass.final_hiddens[bi], last, 1);
        }
    }
    throw ContractError("last_token_representation: no non-padded blocks");
}

// ----------------------------------------------------------------------------
// logs
// ----------------------------------------------------------------------------

namespace {

std::string num_or_empty(double v) { return std::isnan(v) ? "" : format_double(v); }

}  // namespace

std::string TrainLogs::loss_csv() const {
    std::string out = "step,l_lm,l_attr,eta_lm,eta_attr,combined\n";
    for (const auto& r : loss) {
        out += std::to_string(r.step) + "," + format_double(r.l_lm) + "," + num_or_empty(r.l_attr) +
               "," + format_double(r.eta_lm) + "," + format_double(r.eta_attr) + "," +
               format_double(r.combined) + "\n";
    }
    return out;
}

std::string TrainLogs::dev_csv() const {
    std::string out = "epoch,dev_ppl,dev_attr_metric\n";
    for (const auto& r : dev) {
        out += std::to_string(r.epoch) + "," + format_double(r.ppl) + "," +
               num_or_empty(r.attr_metric) + "\n";
    }
    return out;
}

// ----------------------------------------------------------------------------
// trained model bundle
// ----------------------------------------------------------------------------

std::map<std::string, Tensor> TrainedModel::trainable_params() {
    std::map<std::string, Tensor> all = model->params();
    if (regime_cfg.uses_attribute()) {
        all.emplace("eta.lm", etas.eta_lm);
        all.emplace("eta.attr", etas.eta_attr);
    }
    auto add_head = [&](const char* prefix, const std::optional<TaskHeadParams>& h) {
        if (!h.has_value()) {
            return;
        }
        all.emplace(std::string(prefix) + ".ln_g", h->ln_g);
        all.emplace(std::string(prefix) + ".ln_b", h->ln_b);
        all.emplace(std::string(prefix) + ".w", h->w);
        all.emplace(std::string(prefix) + ".b", h->b);
    };
    add_head("head.reg", reg_head);
    add_head("head.cls", cls_head);
    return all;
}

void TrainedModel::zero_grads() {
    for (auto& [name, t] : trainable_params()) {
        t.zero_grad();
    }
}

std::unique_ptr<Tokenizer> TrainedModel::make_tok() const {
    if (vocab_symbols.empty()) {
        return std::make_unique<ByteTokenizer>();
    }
    return std::make_unique<FileVocabTokenizer>(vocab_symbols);
}

void restore_best(TrainedModel& tm) {
    if (tm.best_params.empty()) {
        return;
    }
    for (auto& [name, t] : tm.trainable_params()) {
        auto it = tm.best_params.find(name);
        if (it != tm.best_params.end()) {
            t.values() = it->second;
        }
    }
}

namespace {

std::string u64_hex(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t parse_u64_hex(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

void save_trained(const std::string& path, TrainedModel& tm) {
    KvConfig h;
    h.set("format", "trained-model");
    if (tm.vocab_symbols.empty()) {
        h.set("tokenizer", "byte");
    } else {
        h.set("tokenizer", "embedded");
        h.set("tokenizer.symbols", nlohmann::json(tm.vocab_symbols).dump());
    }
    const ModelConfig& mc = tm.model_cfg;
    h.set_int("model.vocab_size", mc.vocab_size);
    h.set_int("model.d_model", mc.d_model);
    h.set_int("model.n_heads", mc.n_heads);
    h.set_int("model.n_layers", mc.n_layers);
    h.set_int("model.block_len", mc.block_len);
    h.set_int("model.insert_layer", mc.insert_layer);
    h.set_int("model.extract_layer", mc.extract_layer);
    h.set_int("model.d_user", mc.d_user);
    h.set_int("model.max_blocks", mc.max_blocks);
    h.set_double("model.dropout_rate", mc.dropout_rate);
    h.set_bool("model.user_state_pathway", mc.user_state_pathway);
    const RegimeConfig& rc = tm.regime_cfg;
    h.set("regime.regime", to_string(rc.regime));
    h.set("regime.attribute", rc.attribute);
    h.set("regime.attr_kind", rc.attr_kind == AttrKind::continuous ? "continuous" : "binary");
    h.set("regime.combine_rule", to_string(rc.combine_rule));
    h.set_double("regime.lr", rc.lr);
    h.set_int("regime.epochs", rc.epochs);
    h.set_int("regime.max_blocks", rc.max_blocks);
    h.set_int("regime.batch_authors", rc.batch_authors);
    h.set("regime.seed", u64_hex(rc.seed));
    h.set_int("train.step", tm.step);
    h.set_int("train.epoch", tm.epoch);
    h.set_double("attr.mean", tm.attr_mean);
    h.set_double("attr.std", tm.attr_std);
    h.set_int("adam.t", tm.adam.t);
    const auto rng_state = tm.loop_rng.state();
    for (int i = 0; i < 4; ++i) {
        h.set("rng.s" + std::to_string(i), u64_hex(rng_state[static_cast<size_t>(i)]));
    }
    h.set_int("best.epoch", tm.best_epoch);
    h.set_double("best.dev_ppl", tm.best_dev_ppl);
    h.set_bool("head.reg", tm.reg_head.has_value());
    h.set_bool("head.cls", tm.cls_head.has_value());
    if (tm.cls_head.has_value()) {
        h.set_int("head.cls.n_out", tm.cls_head->n_out);
        h.set_int("head.cls.width", tm.cls_head->w.dim(0));
    }

    std::map<std::string, Tensor> tensors = tm.trainable_params();
    if (!tm.regime_cfg.uses_attribute()) {
        tensors.emplace("eta.lm", tm.etas.eta_lm);
        tensors.emplace("eta.attr", tm.etas.eta_attr);
    }
    for (const auto& [name, bvec] : tm.best_params) {
        tensors.emplace("best." + name, Tensor::from({static_cast<int>(bvec.size())}, bvec));
    }
    for (const auto& [name, mvec] : tm.adam.m) {
        tensors.emplace("adam.m." + name,
                        Tensor::from({static_cast<int>(mvec.size())}, mvec));
        tensors.emplace("adam.v." + name,
                        Tensor::from({static_cast<int>(tm.adam.v.at(name).size())}, tm.adam.v.at(name)));
    }
    save_tensor_file(path, h, tensors);
}

TrainedModel load_trained(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    const KvConfig& h = tf.header;
    if (h.get_str("format", "") != "trained-model") {
        throw ParseError("not a trained model checkpoint: " + path);
    }
    TrainedModel tm;
    tm.tokenizer_spec = h.get_str("tokenizer", "byte");
    if (tm.tokenizer_spec == "embedded") {
        const auto symbols = nlohmann::json::parse(h.require_str("tokenizer.symbols"));
        for (const auto& sym : symbols) {
            tm.vocab_symbols.push_back(sym.get<std::string>());
        }
    }
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(h.get_int("model.vocab_size", mc.vocab_size));
    mc.d_model = static_cast<int>(h.get_int("model.d_model", mc.d_model));
    mc.n_heads = static_cast<int>(h.get_int("model.n_heads", mc.n_heads));
    mc.n_layers = static_cast<int>(h.get_int("model.n_layers", mc.n_layers));
    mc.block_len = static_cast<int>(h.get_int("model.block_len", mc.block_len));
    mc.insert_layer = static_cast<int>(h.get_int("model.insert_layer", mc.insert_layer));
    mc.extract_layer = static_cast<int>(h.get_int("model.extract_layer", mc.extract_layer));
    mc.d_user = static_cast<int>(h.get_int("model.d_user", mc.d_user));
    mc.max_blocks = static_cast<int>(h.get_int("model.max_blocks", mc.max_blocks));
    mc.dropout_rate = h.get_double("model.dropout_rate", mc.dropout_rate);
    mc.user_state_pathway = h.get_bool("model.user_state_pathway", true);
    tm.model_cfg = mc;
    RegimeConfig rc;
    rc.regime = parse_regime(h.get_str("regime.regime", "none"));
    rc.attribute = h.get_str("regime.attribute", "");
    rc.attr_kind = h.get_str("regime.attr_kind", "continuous") == "binary" ? AttrKind::binary
                                                                           : AttrKind::continuous;
    rc.combine_rule = parse_combine_rule(h.get_str("regime.combine_rule", "sum"));
    rc.lr = h.get_double("regime.lr", rc.lr);
    rc.epochs = static_cast<int>(h.get_int("regime.epochs", rc.epochs));
    rc.max_blocks = static_cast<int>(h.get_int("regime.max_blocks", rc.max_blocks));
    rc.batch_authors = static_cast<int>(h.get_int("regime.batch_authors", rc.batch_authors));
    rc.seed = parse_u64_hex(h.get_str("regime.seed", "0x1"));
    tm.regime_cfg = rc;
    tm.step = h.get_int("train.step", 0);
    tm.epoch = static_cast<int>(h.get_int("train.epoch", 0));
    tm.attr_mean = h.get_double("attr.mean", 0.0);
    tm.attr_std = h.get_double("attr.std", 1.0);
    tm.adam.t = h.get_int("adam.t", 0);
    std::array<uint64_t, 4> rng_state{};
    for (int i = 0; i < 4; ++i) {
        rng_state[static_cast<size_t>(i)] = parse_u64_hex(h.require_str("rng.s" + std::to_string(i)));
    }
    tm.loop_rng.set_state(rng_state);

    tm.model = std::make_unique<TransformerModel>(mc, rc.seed);
    tm.etas = LossVariances::init();
    if (h.get_bool("head.reg", false)) {
        const int width = rc.uses_user_states() ? mc.resolved_d_user() : mc.d_model;
        tm.reg_head = TaskHeadParams::init(width, 1, rc.seed);
    }
    if (h.get_bool("head.cls", false)) {
        const int n_out = static_cast<int>(h.get_int("head.cls.n_out", 1));
        const int width = static_cast<int>(h.get_int("head.cls.width", mc.d_model));
        tm.cls_head = TaskHeadParams::init(width, n_out, rc.seed);
    }

    auto all = tm.trainable_params();
    all.emplace("eta.lm", tm.etas.eta_lm);
    all.emplace("eta.attr", tm.etas.eta_attr);
    for (auto& [name, tensor] : all) {
        auto it = tf.tensors.find(name);
        if (it == tf.tensors.end()) {
            throw ParseError("checkpoint missing tensor '" + name + "'");
        }
        if (it->second.numel() != tensor.numel()) {
            throw ParseError("checkpoint tensor '" + name + "' has wrong size");
        }
        tensor.values() = it->second.values();
        tensor.zero_grad();
    }
    tm.best_epoch = static_cast<int>(h.get_int("best.epoch", 0));
    tm.best_dev_ppl = h.get_double("best.dev_ppl", 0.0);
    for (const auto& [name, tensor] : tf.tensors) {
        if (name.rfind("adam.m.", 0) == 0) {
            tm.adam.m[name.substr(7)] = tensor.values();
        } else if (name.rfind("adam.v.", 0) == 0) {
            tm.adam.v[name.substr(7)] = tensor.values();
        } else if (name.rfind("best.", 0) == 0) {
            tm.best_params[name.substr(5)] = tensor.values();
        }
    }
    return tm;
}

// ----------------------------------------------------------------------------
// shared training internals
// ----------------------------------------------------------------------------

namespace {

int user_rep_width(const TrainedModel& tm) {
    return tm.regime_cfg.uses_user_states() ? tm.model_cfg.resolved_d_user()
                                            : tm.model_cfg.d_model;
}

void require_attribute(const std::vector<AuthorRecord>& authors, const std::string& attr) {
    for (const auto& a : authors) {
        if (!a.attributes.count(attr)) {
            throw DataError("attribute '" + attr + "' missing for author '" + a.author_id + "'");
        }
    }
}

void compute_attr_stats(TrainedModel& tm, const std::vector<AuthorRecord>& train_authors) {
    const std::string& attr = tm.regime_cfg.attribute;
    require_attribute(train_authors, attr);
    if (tm.regime_cfg.attr_kind == AttrKind::binary) {
        tm.attr_mean = 0.0;
        tm.attr_std = 1.0;
        return;
    }
    // z-score with training-split statistics; de-standardized for metrics
    double mean = 0.0;
    for (const auto& a : train_authors) {
        mean += a.attributes.at(attr);
    }
    mean /= static_cast<double>(train_authors.size());
    double var = 0.0;
    for (const auto& a : train_authors) {
        const double d = a.attributes.at(attr) - mean;
        var += d * d;
    }
    var /= static_cast<double>(train_authors.size());
    tm.attr_mean = mean;
    tm.attr_std = var > 1e-12 ? std::sqrt(var) : 1.0;
}

double dev_attr_metric(TrainedModel& tm, const std::vector<AuthorRecord>& dev_authors,
                       const Tokenizer& tok) {
    if (!tm.regime_cfg.uses_attribute() || dev_authors.size() < 2) {
        return std::nan("");
    }
    try {
        PredictionSet ps = predict_user_attribute(tm, dev_authors, tok);
        std::vector<double> p, g;
        for (const auto& r : ps.rows) {
            p.push_back(r.prediction);
            g.push_back(r.gold);
        }
        if (tm.regime_cfg.attr_kind == AttrKind::binary) {
            double acc = 0.0;
            for (size_t i = 0; i < p.size(); ++i) {
                acc += (p[i] > 0.5 ? 1.0 : 0.0) == g[i];
            }
            return acc / static_cast<double>(p.size());
        }
        return pearson_r(p, g);
    } catch (const std::exception&) {
        return std::nan("");
    }
}

// one gradient-accumulated step over a batch of authors; returns log row data
TrainLogs::LossRow train_batch(TrainedModel& tm, const std::vector<BlockSequence>& seqs,
                               const std::vector<double>& attr_values,
                               const std::vector<size_t>& batch) {
    const RegimeConfig& rc = tm.regime_cfg;
    tm.zero_grads();
    double lm_sum = 0.0;
    double attr_sum = 0.0;
    double combined_sum = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (size_t idx : batch) {
        AuthorPass pass = process_author(*tm.model, seqs[idx], rc.mode());
        Tensor l_lm = hulm_loss(pass, seqs[idx]);
        Tensor l_attr;
        const Tensor* l_attr_ptr = nullptr;
        if (rc.uses_attribute()) {
            Tensor rep = author_representation(pass, seqs[idx]);
            if (rc.attr_kind == AttrKind::continuous) {
                const double z = (attr_values[idx] - tm.attr_mean) / tm.attr_std;
                l_attr = attribute_regression_loss(tm.reg_head->apply(rep), {z});
            } else {
                l_attr = attribute_classification_loss(tm.cls_head->apply(rep), {attr_values[idx]});
            }
            l_attr_ptr = &l_attr;
        }
        Tensor combined = combine_losses(rc.combine_rule, l_lm, l_attr_ptr, tm.etas);
        backward(scale(combined, inv));
        lm_sum += l_lm.item();
        attr_sum += l_attr_ptr != nullptr ? l_attr.item() : 0.0;
        combined_sum += combined.item();
    }
    auto params = tm.trainable_params();
    adam_step(params, tm.adam, rc.lr);
    ++tm.step;
    TrainLogs::LossRow row;
    row.step = tm.step;
    row.l_lm = lm_sum * inv;
    row.l_attr = rc.uses_attribute() ? attr_sum * inv : std::nan("");
    row.eta_lm = tm.etas.eta_lm.item();
    row.eta_attr = tm.etas.eta_attr.item();
    row.combined = combined_sum * inv;
    return row;
}

void run_epochs(TrainedModel& tm, const std::vector<AuthorRecord>& train_authors,
                const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok,
                int total_epochs, TrainLogs* logs, const std::string& run_dir) {
    const RegimeConfig& rc = tm.regime_cfg;
    if (train_authors.empty()) {
        throw DataError("training split is empty");
    }
    if (rc.max_blocks > tm.model_cfg.max_blocks) {
        throw ConfigError("regime max_blocks exceeds the model's max_blocks");
    }
    auto seqs = build_split_sequences(train_authors, tok, tm.model_cfg.block_len, rc.max_blocks);
    std::vector<double> attr_values(train_authors.size(), 0.0);
    if (rc.uses_attribute()) {
        require_attribute(train_authors, rc.attribute);
        for (size_t i = 0; i < train_authors.size(); ++i) {
            attr_values[i] = train_authors[i].attributes.at(rc.attribute);
        }
    }
    std::vector<BlockSequence> dev_seqs;
    if (!dev_authors.empty()) {
        dev_seqs = build_split_sequences(dev_authors, tok, tm.model_cfg.block_len, rc.max_blocks);
    }

    for (int epoch = tm.epoch + 1; epoch <= total_epochs; ++epoch) {
        std::vector<size_t> order(train_authors.size());
        std::iota(order.begin(), order.end(), 0);
        tm.loop_rng.shuffle(order);
        tm.model->set_train(true, &tm.loop_rng);
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(rc.batch_authors)) {
            std::vector<size_t> batch(
                order.begin() + static_cast<long>(pos),
                order.begin() + static_cast<long>(std::min(order.size(),
                                                           pos + static_cast<size_t>(rc.batch_authors))));
            TrainLogs::LossRow row = train_batch(tm, seqs, attr_values, batch);
            if (logs != nullptr) {
                logs->loss.push_back(row);
            }
        }
        tm.model->set_train(false);
        tm.epoch = epoch;

        if (!dev_seqs.empty()) {
            TrainLogs::DevRow dev_row;
            dev_row.epoch = epoch;
            dev_row.ppl = perplexity(*tm.model, dev_seqs, rc.mode());
            dev_row.attr_metric = dev_attr_metric(tm, dev_authors, tok);
            if (logs != nullptr) {
                logs->dev.push_back(dev_row);
            }
            // best-checkpoint selection by dev perplexity
            if (tm.best_epoch == 0 || dev_row.ppl < tm.best_dev_ppl) {
                tm.best_epoch = epoch;
                tm.best_dev_ppl = dev_row.ppl;
                tm.best_params.clear();
                for (auto& [name, t] : tm.trainable_params()) {
                    tm.best_params[name] = t.values();
                }
            }
        }
        if (!run_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
            save_trained(run_dir + "/checkpoints/" + name, tm);
        }
    }
}

}  // namespace

// ----------------------------------------------------------------------------
// entry points
// ----------------------------------------------------------------------------

TrainedModel pretrain(const std::vector<AuthorRecord>& train_authors,
                      const std::vector<AuthorRecord>& dev_authors, const ModelConfig& model_cfg,
                      const RegimeConfig& regime_cfg, const Tokenizer& tok,
                      const std::string& tokenizer_spec, TrainLogs* logs,
                      const std::string& run_dir) {
    regime_cfg.validate();
    ModelConfig mc = model_cfg;
    // plain regimes get no user-state parameters at all
    mc.user_state_pathway = regime_cfg.uses_user_states();
    mc.validate();
    if (mc.vocab_size != tok.vocab_size()) {
        throw ConfigError("model vocab_size " + std::to_string(mc.vocab_size) +
                          " does not match tokenizer vocabulary " + std::to_string(tok.vocab_size()));
    }

    TrainedModel tm;
    tm.model_cfg = mc;
    tm.regime_cfg = regime_cfg;
    tm.tokenizer_spec = tokenizer_spec;
    if (const auto* fv = dynamic_cast<const FileVocabTokenizer*>(&tok)) {
        tm.vocab_symbols = fv->symbols();
    }
    tm.model = std::make_unique<TransformerModel>(mc, regime_cfg.seed);
    tm.etas = LossVariances::init();
    tm.loop_rng.reseed(derive_seed(regime_cfg.seed, "trainloop"));
    if (regime_cfg.uses_attribute()) {
        if (regime_cfg.attr_kind == AttrKind::continuous) {
            tm.reg_head = TaskHeadParams::init(user_rep_width(tm), 1,
                                               derive_seed(regime_cfg.seed, "reg"));
        } else {
            tm.cls_head = TaskHeadParams::init(user_rep_width(tm), 1,
                                               derive_seed(regime_cfg.seed, "cls"));
        }
        compute_attr_stats(tm, train_authors);
    }
    run_epochs(tm, train_authors, dev_authors, tok, regime_cfg.epochs, logs, run_dir);
    return tm;
}

void pretrain_continue(TrainedModel& tm, const std::vector<AuthorRecord>& train_authors,
                       const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok,
                       int total_epochs, TrainLogs* logs, const std::string& run_dir) {
    run_epochs(tm, train_authors, dev_authors, tok, total_epochs, logs, run_dir);
}

// ----------------------------------------------------------------------------
// fine-tuning
// ----------------------------------------------------------------------------

TaskSpec::Metric parse_task_metric(const std::string& s) {
    if (s == "pearson") {
        return TaskSpec::Metric::pearson;
    }
    if (s == "disattenuated_pearson") {
        return TaskSpec::Metric::disattenuated_pearson;
    }
    if (s == "f1_macro") {
        return TaskSpec::Metric::f1_macro;
    }
    if (s == "f1_weighted") {
        return TaskSpec::Metric::f1_weighted;
    }
    if (s == "mse") {
        return TaskSpec::Metric::mse;
    }
    throw ConfigError("unknown task metric '" + s + "'");
}

bool metric_higher_is_better(TaskSpec::Metric m) { return m != TaskSpec::Metric::mse; }

namespace {

struct DocItem {
    size_t author;
    int doc;
    int label;
};

std::vector<DocItem> collect_doc_items(const std::vector<AuthorRecord>& authors,
                                       const TaskSpec& task) {
    std::vector<DocItem> items;
    for (size_t ai = 0; ai < authors.size(); ++ai) {
        const auto& docs = authors[ai].documents;
        for (int di = 0; di < static_cast<int>(docs.size()); ++di) {
            auto it = docs[static_cast<size_t>(di)].doc_labels.find(task.target);
            if (it == docs[static_cast<size_t>(di)].doc_labels.end()) {
                continue;
            }
            const double raw = it->second;
            const int label = static_cast<int>(raw);
            if (raw != static_cast<double>(label) || label < 0 || label >= task.n_classes) {
                throw DataError("doc label '" + task.target + "' = " + format_double(raw) +
                                " is not a class index below " + std::to_string(task.n_classes));
            }
            items.push_back({ai, di, label});
        }
    }
    if (items.empty()) {
        throw DataError("no documents carry label '" + task.target + "'");
    }
    return items;
}

BlockSequence doc_item_sequence(const AuthorRecord& author, const DocItem& item,
                                const TaskSpec& task, const Tokenizer& tok, int block_len,
                                int max_blocks) {
    if (task.use_history) {
        return build_blocks(author, tok, block_len, max_blocks, item.doc);
    }
    AuthorRecord single;
    single.author_id = author.author_id;
    single.documents.push_back(author.documents[static_cast<size_t>(item.doc)]);
    return build_blocks(single, tok, block_len, 1);
}

std::map<std::string, std::vector<double>> snapshot_values(TrainedModel& tm) {
    std::map<std::string, std::vector<double>> snap;
    for (auto& [name, t] : tm.trainable_params()) {
        snap[name] = t.values();
    }
    return snap;
}

void restore_values(TrainedModel& tm, const std::map<std::string, std::vector<double>>& snap) {
    for (auto& [name, t] : tm.trainable_params()) {
        t.values() = snap.at(name);
    }
}

double task_dev_metric(TrainedModel& tm, const TaskSpec& task,
                       const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok) {
    if (task.kind == TaskSpec::Kind::user_regression) {
        PredictionSet ps = predict_user_attribute(tm, dev_authors, tok);
        std::vector<double> p, g;
        for (const auto& r : ps.rows) {
            p.push_back(r.prediction);
            g.push_back(r.gold);
        }
        switch (task.dev_metric) {
            case TaskSpec::Metric::mse: return mse(p, g);
            case TaskSpec::Metric::disattenuated_pearson: return disattenuated_r(p, g, 1.0, 1.0);
            default: return pearson_r(p, g);
        }
    }
    PredictionSet ps = predict_doc_label(tm, dev_authors, task, tok);
    std::vector<int> p, g;
    for (const auto& r : ps.rows) {
        p.push_back(static_cast<int>(r.prediction));
        g.push_back(static_cast<int>(r.gold));
    }
    return f1_score(p, g, task.dev_metric == TaskSpec::Metric::f1_weighted ? F1Average::weighted
                                                                           : F1Average::macro);
}

}  // namespace

FinetuneResult finetune(TrainedModel& tm, const TaskSpec& task,
                        const std::vector<AuthorRecord>& train_authors,
                        const std::vector<AuthorRecord>& dev_authors, const FinetuneConfig& cfg,
                        const Tokenizer& tok) {
    if (cfg.max_blocks > tm.model_cfg.max_blocks) {
        throw ConfigError("finetune max_blocks exceeds the model's max_blocks");
    }
    tm.adam = AdamState{};  // fresh optimizer for the new objective
    tm.loop_rng.reseed(derive_seed(cfg.seed, "finetune"));
    const ForwardMode mode = tm.regime_cfg.mode();

    FinetuneResult result;

    if (task.kind == TaskSpec::Kind::user_regression) {
        require_attribute(train_authors, task.target);
        require_attribute(dev_authors, task.target);
        tm.reg_head = TaskHeadParams::init(user_rep_width(tm), 1, derive_seed(cfg.seed, "ft-reg"));
        // the prediction target rides on the bundle; the regime (mode) is kept
        tm.regime_cfg.attribute = task.target;
        tm.regime_cfg.attr_kind = AttrKind::continuous;
        compute_attr_stats(tm, train_authors);
        auto seqs = build_split_sequences(train_authors, tok, tm.model_cfg.block_len, cfg.max_blocks);
        std::vector<double> z(train_authors.size());
        for (size_t i = 0; i < train_authors.size(); ++i) {
            z[i] = (train_authors[i].attributes.at(task.target) - tm.attr_mean) / tm.attr_std;
        }

        std::map<std::string, std::vector<double>> best;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            std::vector<size_t> order(train_authors.size());
            std::iota(order.begin(), order.end(), 0);
            tm.loop_rng.shuffle(order);
            tm.model->set_train(true, &tm.loop_rng);
            for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch)) {
                const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch));
                tm.zero_grads();
                const double inv = 1.0 / static_cast<double>(end - pos);
                for (size_t bi = pos; bi < end; ++bi) {
                    const size_t idx = order[bi];
                    AuthorPass pass = process_author(*tm.model, seqs[idx], mode);
                    Tensor rep = author_representation(pass, seqs[idx]);
                    Tensor loss = attribute_regression_loss(tm.reg_head->apply(rep), {z[idx]});
                    backward(scale(loss, inv));
                }
                auto params = tm.trainable_params();
                adam_step(params, tm.adam, cfg.lr);
                ++tm.step;
            }
            tm.model->set_train(false);
            const double metric = task_dev_metric(tm, task, dev_authors, tok);
            result.dev_by_epoch.push_back({epoch, metric});
            const bool better =
                best.empty() || (metric_higher_is_better(task.dev_metric)
                                     ? metric > result.best_dev_metric
                                     : metric < result.best_dev_metric);
            if (better) {
                result.best_dev_metric = metric;
                result.best_epoch = epoch;
                best = snapshot_values(tm);
            }
        }
        restore_values(tm, best);
        return result;
    }

    // document classification
    if (task.n_classes < 2) {
        throw ConfigError("doc_classification needs n_classes >= 2");
    }
    tm.cls_head = TaskHeadParams::init(tm.model_cfg.d_model, task.n_classes,
                                       derive_seed(cfg.seed, "ft-cls"));
    auto items = collect_doc_items(train_authors, task);
    std::vector<BlockSequence> item_seqs;
    item_seqs.reserve(items.size());
    for (const auto& it : items) {
        item_seqs.push_back(doc_item_sequence(train_authors[it.author], it, task, tok,
                                              tm.model_cfg.block_len, cfg.max_blocks));
    }

    std::map<std::string, std::vector<double>> best;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<size_t> order(items.size());
        std::iota(order.begin(), order.end(), 0);
        tm.loop_rng.shuffle(order);
        tm.model->set_train(true, &tm.loop_rng);
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch));
            tm.zero_grads();
            const double inv = 1.0 / static_cast<double>(end - pos);
            for (size_t bi = pos; bi < end; ++bi) {
                const size_t idx = order[bi];
                AuthorPass pass = process_author(*tm.model, item_seqs[idx], mode);
                Tensor rep = last_token_representation(pass, item_seqs[idx]);
                Tensor logits = tm.cls_head->apply(rep);
                int count = 0;
                Tensor loss = cross_entropy_sum(logits, {items[idx].label}, {1}, &count);
                backward(scale(loss, inv));
            }
            auto params = tm.trainable_params();
            adam_step(params, tm.adam, cfg.lr);
            ++tm.step;
        }
        tm.model->set_train(false);
        const double metric = task_dev_metric(tm, task, dev_authors, tok);
        result.dev_by_epoch.push_back({epoch, metric});
        const bool better = best.empty() || metric > result.best_dev_metric;
        if (better) {
            result.best_dev_metric = metric;
            result.best_epoch = epoch;
            best = snapshot_values(tm);
        }
    }
    restore_values(tm, best);
    return result;
}

void transfer_learn(TrainedModel& tm, const std::string& target_attribute,
                    const std::vector<AuthorRecord>& train_authors,
                    const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok, int epochs,
                    double lr, TrainLogs* logs, const std::string& run_dir) {
    if (tm.regime_cfg.regime != Regime::group_individual) {
        throw ContractError("transfer_learn requires a group_individual checkpoint, got regime '" +
                            to_string(tm.regime_cfg.regime) + "'");
    }
    require_attribute(train_authors, target_attribute);
    tm.regime_cfg.attribute = target_attribute;
    tm.regime_cfg.attr_kind = AttrKind::continuous;
    tm.regime_cfg.lr = lr;
    tm.etas.reset();  // eta back to 0 (sigma = 1)
    tm.reg_head = TaskHeadParams::init(user_rep_width(tm), 1,
                                       derive_seed(tm.regime_cfg.seed, "transfer-reg"));
    tm.adam = AdamState{};
    tm.epoch = 0;
    compute_attr_stats(tm, train_authors);
    run_epochs(tm, train_authors, dev_authors, tok, epochs, logs, run_dir);
}

// ----------------------------------------------------------------------------
// learning-rate search
// ----------------------------------------------------------------------------

double lr_search(const LrSearchSpace& space, uint64_t seed, bool maximize,
                 const std::function<double(double)>& dev_metric_for_lr,
                 std::vector<LrTrial>* trace) {
    std::vector<double> candidates = space.grid;
    if (candidates.empty()) {
        if (space.trials < 1) {
            throw ConfigError("lr_search: empty space (no grid, trials < 1)");
        }
        if (!(space.low > 0.0) || !(space.high > space.low)) {
            throw ConfigError("lr_search: need 0 < low < high");
        }
        Rng rng(derive_seed(seed, "lr_search"));
        for (int i = 0; i < space.trials; ++i) {
            const double u = rng.uniform();
            candidates.push_back(std::exp(std::log(space.low) +
                                          u * (std::log(space.high) - std::log(space.low))));
        }
    }
    // ascending order plus strict improvement == ties break toward smaller lr
    std::sort(candidates.begin(), candidates.end());
    double best_lr = 0.0;
    double best_metric = 0.0;
    bool first = true;
    for (double lr : candidates) {
        const double metric = dev_metric_for_lr(lr);
        if (trace != nullptr) {
            trace->push_back({lr, metric});
        }
        const bool better = first || (maximize ? metric > best_metric : metric < best_metric);
        if (better) {
            best_lr = lr;
            best_metric = metric;
            first = false;
        }
    }
    return best_lr;
}

// ----------------------------------------------------------------------------
// evaluation helpers
// ----------------------------------------------------------------------------

std::vector<BlockSequence> build_split_sequences(const std::vector<AuthorRecord>& authors,
                                                 const Tokenizer& tok, int block_len,
                                                 int max_blocks) {
    std::vector<BlockSequence> seqs;
    seqs.reserve(authors.size());
    for (const auto& a : authors) {
        seqs.push_back(build_blocks(a, tok, block_len, max_blocks));
    }
    return seqs;
}

namespace {

std::string bucket_of(const AuthorRecord& a) {
    auto it = a.attributes.find("age");
    if (it == a.attributes.end()) {
        return "";
    }
    return BucketScheme::default_age().name_for(it->second);
}

}  // namespace

PredictionSet predict_user_attribute(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                     const Tokenizer& tok) {
    const std::string& attr = tm.regime_cfg.attribute;
    if (attr.empty()) {
        throw ConfigError("predict_user_attribute: model has no attribute target");
    }
    if (!tm.reg_head.has_value() && !tm.cls_head.has_value()) {
        throw ConfigError("predict_user_attribute: model has no attribute head");
    }
    require_attribute(authors, attr);
    tm.model->set_train(false);
    PredictionSet ps;
    ps.unit = PredictionSet::Unit::author;
    for (const auto& a : authors) {
        BlockSequence seq = build_blocks(a, tok, tm.model_cfg.block_len, tm.regime_cfg.max_blocks);
        AuthorPass pass = process_author(*tm.model, seq, tm.regime_cfg.mode());
        Tensor rep = author_representation(pass, seq);
        PredictionRow row;
        row.id = a.author_id;
        row.gold = a.attributes.at(attr);
        if (tm.reg_head.has_value()) {
            row.prediction = tm.reg_head->apply(rep).item() * tm.attr_std + tm.attr_mean;
        } else {
            row.prediction = sigmoid(tm.cls_head->apply(rep)).item();
        }
        row.bucket = bucket_of(a);
        ps.rows.push_back(std::move(row));
    }
    return ps;
}

PredictionSet predict_doc_label(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                const TaskSpec& task, const Tokenizer& tok) {
    if (!tm.cls_head.has_value()) {
        throw ConfigError("predict_doc_label: model has no classification head");
    }
    tm.model->set_train(false);
    auto items = collect_doc_items(authors, task);
    PredictionSet ps;
    ps.unit = PredictionSet::Unit::document;
    for (const auto& it : items) {
        const AuthorRecord& a = authors[it.author];
        BlockSequence seq =
            doc_item_sequence(a, it, task, tok, tm.model_cfg.block_len, tm.regime_cfg.max_blocks);
        AuthorPass pass = process_author(*tm.model, seq, tm.regime_cfg.mode());
        Tensor logits = tm.cls_head->apply(last_token_representation(pass, seq));
        int best = 0;
        for (int c = 1; c < tm.cls_head->n_out; ++c) {
            if (logits.values()[static_cast<size_t>(c)] > logits.values()[static_cast<size_t>(best)]) {
                best = c;
            }
        }
        PredictionRow row;
        row.id = a.author_id + "#" + std::to_string(it.doc);
        row.prediction = best;
        row.gold = it.label;
        row.bucket = bucket_of(a);
        ps.rows.push_back(std::move(row));
    }
    return ps;
}

std::vector<double> per_author_nll(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                   const Tokenizer& tok) {
    tm.model->set_train(false);
    std::vector<double> out;
    for (const auto& a : authors) {
        BlockSequence seq = build_blocks(a, tok, tm.model_cfg.block_len, tm.regime_cfg.max_blocks);
        AuthorPass pass = process_author(*tm.model, seq, tm.regime_cfg.mode());
        long count = 0;
        Tensor nll = hulm_nll_sum(pass, seq, &count);
        out.push_back(count > 0 ? nll.item() / static_cast<double>(count) : 0.0);
    }
    return out;
}

std::string user_state_dump(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                            const Tokenizer& tok) {
    if (!tm.regime_cfg.uses_user_states()) {
        throw ConfigError("user_state_dump: regime '" + to_string(tm.regime_cfg.regime) +
                          "' has no user states");
    }
    tm.model->set_train(false);
    std::string out;
    for (const auto& a : authors) {
        BlockSequence seq = build_blocks(a, tok, tm.model_cfg.block_len, tm.regime_cfg.max_blocks);
        AuthorPass pass = process_author(*tm.model, seq, ForwardMode::hulm);
        Tensor u_bar = average_user_states(pass);
        out += "{\"author_id\":\"" + a.author_id + "\",\"user_state\":[";
        for (size_t i = 0; i < u_bar.numel(); ++i) {
            if (i) {
                out += ",";
            }
            out += format_double(u_bar.values()[i]);
        }
        out += "]}\n";
    }
    return out;
}

}  // namespace hulm
