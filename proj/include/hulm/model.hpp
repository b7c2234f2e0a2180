#pragma once

#include <map>
#include <string>
#include <vector>

#include "hulm/corpus.hpp"
#include "hulm/tensor.hpp"

namespace hulm {

// GPT-2-style pre-LN causal transformer with two extra knobs: the insert
// layer, whose attention query can take a user-state contribution, and the
// extract layer, whose hidden states feed the user-state update.
struct ModelConfig {
    int vocab_size = 257;  // byte tokenizer default
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 4;
    int block_len = 64;
    int insert_layer = 2;   // 1-based
    int extract_layer = 0;  // 0 resolves to n_layers - 1 (but at least 1)
    int d_user = 0;         // 0 resolves to d_model
    int max_blocks = 8;
    double dropout_rate = 0.1;
    bool user_state_pathway = true;

    int resolved_extract_layer() const { return extract_layer > 0 ? extract_layer : std::max(1, n_layers - 1); }
    int resolved_d_user() const { return d_user > 0 ? d_user : d_model; }
    void validate() const;

    // 12 x 768 heads 12, 1024-token blocks; far beyond desk-scale training,
    // provided as a config preset only
    static ModelConfig full_scale();
};

struct AttentionProj {
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wq_user;  // defined only at the insert layer of a user-state model
};

struct LayerWeights {
    Tensor ln1_g, ln1_b;
    AttentionProj attn;
    Tensor wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// per-layer output hidden states, for structural probes
struct LayerActivations {
    std::vector<Tensor> hidden;
};

// Multi-head causal self-attention over a post-layer-norm input h [T x d].
// Keys and values always come from h; the query is computed from h unless
// query_override is given. key_valid masks padded key positions.
Tensor causal_attention(const Tensor& h, const AttentionProj& proj, int n_heads,
                        const std::vector<uint8_t>& key_valid,
                        const Tensor* query_override = nullptr);

class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor& param(const std::string& name);
    const LayerWeights& layer(int idx) const { return layers_[static_cast<size_t>(idx)]; }

    // user-state parameters (defined iff cfg.user_state_pathway)
    Tensor user_u0() { return param("user.u0"); }
    Tensor user_wu() { return param("user.wu"); }
    Tensor user_wh() { return param("user.wh"); }

    void set_train(bool on, Rng* dropout_rng = nullptr);
    bool training() const { return train_; }

    struct BlockResult {
        Tensor logits;          // [T x vocab]
        Tensor extract_hidden;  // [T x d], output of the extract layer
        Tensor final_hidden;    // [T x d], output of the last layer (pre final LN)
    };
    // user_state, when given, feeds the insert layer's query; all other
    // layers are standard. Without it the model is a plain causal LM.
    BlockResult forward_block(const Block& block, const Tensor* user_state = nullptr,
                              LayerActivations* trace = nullptr);

    void zero_grads();

private:
    Tensor register_param(const std::string& name, Tensor t);
    Tensor init_weight(const std::string& name, std::vector<int> shape, double stdev);

    ModelConfig cfg_;
    uint64_t seed_;
    std::map<std::string, Tensor> params_;
    std::vector<LayerWeights> layers_;
    Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_;
    bool train_ = false;
    Rng* dropout_rng_ = nullptr;
};

}  // namespace hulm
