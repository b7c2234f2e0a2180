#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hulm/corpus.hpp"
#include "hulm/human_context.hpp"
#include "hulm/metrics.hpp"
#include "hulm/model.hpp"
#include "hulm/objectives.hpp"

namespace hulm {

enum class Regime { none, group, individual, group_individual };
Regime parse_regime(const std::string& s);
std::string to_string(Regime r);

enum class AttrKind { continuous, binary };

struct RegimeConfig {
    Regime regime = Regime::none;
    std::string attribute;  // required for group / group_individual
    AttrKind attr_kind = AttrKind::continuous;
    CombineRule combine_rule = CombineRule::sum_unweighted;
    double lr = 1e-3;
    int epochs = 1;
    int max_blocks = 8;
    int batch_authors = 4;
    uint64_t seed = 1;

    bool uses_user_states() const {
        return regime == Regime::individual || regime == Regime::group_individual;
    }
    bool uses_attribute() const {
        return regime == Regime::group || regime == Regime::group_individual;
    }
    ForwardMode mode() const { return uses_user_states() ? ForwardMode::hulm : ForwardMode::plain; }
    void validate() const;
};

CombineRule default_combine_rule(Regime r);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, std::vector<double>> m, v;
    long t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// standard Adam with bias correction; reads grads from the tensors
void adam_step(std::map<std::string, Tensor>& params, AdamState& state, double lr);

// ---------------------------------------------------------------------------
// task heads
// ---------------------------------------------------------------------------

// linear(layer_norm(rep)) -> n_out values
struct TaskHeadParams {
    Tensor ln_g, ln_b, w, b;
    int n_out = 1;
    static TaskHeadParams init(int d, int n_out, uint64_t seed);
    Tensor apply(const Tensor& rep) const;  // [1, d] -> [1, n_out]
};

// user-level representation: averaged user states in hulm mode, masked mean
// of final-layer hidden states in plain mode
Tensor author_representation(const AuthorPass& pass, const BlockSequence& seq);
// layer input for document classification: final-layer hidden state at the
// last non-padded token of the sequence
Tensor last_token_representation(const AuthorPass& pass, const BlockSequence& seq);

// ---------------------------------------------------------------------------
// trained model bundle
// ---------------------------------------------------------------------------

struct TrainLogs {
    // step, l_lm, l_attr (nan if absent), eta_lm, eta_attr, combined
    struct LossRow {
        long step;
        double l_lm, l_attr, eta_lm, eta_attr, combined;
    };
    std::vector<LossRow> loss;
    struct DevRow {
        int epoch;
        double ppl;
        double attr_metric;  // nan if absent
    };
    std::vector<DevRow> dev;
    std::string loss_csv() const;
    std::string dev_csv() const;
};

struct TrainedModel {
    ModelConfig model_cfg;
    RegimeConfig regime_cfg;
    std::string tokenizer_spec = "byte";
    std::vector<std::string> vocab_symbols;  // embedded vocabulary, empty = byte
    std::unique_ptr<TransformerModel> model;
    LossVariances etas;
    std::optional<TaskHeadParams> reg_head;
    std::optional<TaskHeadParams> cls_head;
    AdamState adam;
    Rng loop_rng{1};
    long step = 0;
    int epoch = 0;
    double attr_mean = 0.0;
    double attr_std = 1.0;

    // best dev-perplexity epoch seen so far (tracked when a dev split exists)
    int best_epoch = 0;
    double best_dev_ppl = 0.0;
    std::map<std::string, std::vector<double>> best_params;

    std::map<std::string, Tensor> trainable_params();
    void zero_grads();
    // checkpoints are self-contained: rebuild the tokenizer the model trained with
    std::unique_ptr<Tokenizer> make_tok() const;
};

// swap the best dev-epoch parameters in (no-op when none were tracked)
void restore_best(TrainedModel& tm);

void save_trained(const std::string& path, TrainedModel& tm);
TrainedModel load_trained(const std::string& path);

// ---------------------------------------------------------------------------
// training entry points
// ---------------------------------------------------------------------------

TrainedModel pretrain(const std::vector<AuthorRecord>& train_authors,
                      const std::vector<AuthorRecord>& dev_authors, const ModelConfig& model_cfg,
                      const RegimeConfig& regime_cfg, const Tokenizer& tok,
                      const std::string& tokenizer_spec, TrainLogs* logs = nullptr,
                      const std::string& run_dir = "");

// continue an existing run up to total_epochs (resume support)
void pretrain_continue(TrainedModel& tm, const std::vector<AuthorRecord>& train_authors,
                       const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok,
                       int total_epochs, TrainLogs* logs = nullptr,
                       const std::string& run_dir = "");

struct TaskSpec {
    enum class Kind { user_regression, doc_classification };
    Kind kind = Kind::user_regression;
    std::string target;  // attribute name or document label name
    int n_classes = 0;   // doc_classification only
    bool use_history = false;

    enum class Metric { pearson, disattenuated_pearson, f1_macro, f1_weighted, mse };
    Metric dev_metric = Metric::pearson;
};
TaskSpec::Metric parse_task_metric(const std::string& s);
bool metric_higher_is_better(TaskSpec::Metric m);

struct FinetuneConfig {
    double lr = 1e-3;
    int epochs = 4;
    int batch = 4;
    int max_blocks = 4;
    uint64_t seed = 1;
};

struct FinetuneResult {
    int best_epoch = 0;
    double best_dev_metric = 0.0;
    std::vector<std::pair<int, double>> dev_by_epoch;
};

// fine-tunes all parameters plus a fresh task head on the task loss alone;
// restores the best dev-metric epoch before returning
FinetuneResult finetune(TrainedModel& tm, const TaskSpec& task,
                        const std::vector<AuthorRecord>& train_authors,
                        const std::vector<AuthorRecord>& dev_authors, const FinetuneConfig& cfg,
                        const Tokenizer& tok);

// continued joint training of a group_individual checkpoint on attribute B:
// fresh regression head, re-initialized etas, fresh optimizer
void transfer_learn(TrainedModel& tm, const std::string& target_attribute,
                    const std::vector<AuthorRecord>& train_authors,
                    const std::vector<AuthorRecord>& dev_authors, const Tokenizer& tok, int epochs,
                    double lr, TrainLogs* logs = nullptr, const std::string& run_dir = "");

// ---------------------------------------------------------------------------
// learning-rate search
// ---------------------------------------------------------------------------

struct LrSearchSpace {
    double low = 5e-6;
    double high = 5e-4;
    int trials = 0;            // sampled log-uniform when grid is empty
    std::vector<double> grid;  // explicit grid takes precedence
};

struct LrTrial {
    double lr;
    double metric;
};

// evaluates dev_metric_for_lr per candidate; ties break toward the smaller lr
double lr_search(const LrSearchSpace& space, uint64_t seed, bool maximize,
                 const std::function<double(double)>& dev_metric_for_lr,
                 std::vector<LrTrial>* trace = nullptr);

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

std::vector<BlockSequence> build_split_sequences(const std::vector<AuthorRecord>& authors,
                                                 const Tokenizer& tok, int block_len,
                                                 int max_blocks);

// de-standardized attribute predictions per author (regression head), or
// sigmoid probabilities (binary head)
PredictionSet predict_user_attribute(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                     const Tokenizer& tok);

// argmax class per labeled document; ids are author_id#doc_index
PredictionSet predict_doc_label(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                const TaskSpec& task, const Tokenizer& tok);

// per-author mean NLL pairs for significance testing
std::vector<double> per_author_nll(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                                   const Tokenizer& tok);

// optional per-author user-state dump (JSON lines: author_id, user_state)
std::string user_state_dump(TrainedModel& tm, const std::vector<AuthorRecord>& authors,
                            const Tokenizer& tok);

}  // namespace hulm
