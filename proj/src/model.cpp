#include "hulm/model.hpp"

#include <cmath>

#include "hulm/human_context.hpp"

namespace hulm {

void ModelConfig::validate() const {
    if (vocab_size < 2) {
        throw ConfigError("model: vocab_size must be >= 2");
    }
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
        throw ConfigError("model: d_model must be a positive multiple of n_heads");
    }
    if (n_layers < 1 || block_len < 2 || max_blocks < 1) {
        throw ConfigError("model: n_layers >= 1, block_len >= 2, max_blocks >= 1 required");
    }
    const int e = resolved_extract_layer();
    if (!(1 <= insert_layer && insert_layer <= e && e <= n_layers)) {
        throw ConfigError("model: need 1 <= insert_layer (" + std::to_string(insert_layer) +
                          ") <= extract_layer (" + std::to_string(e) + ") <= n_layers (" +
                          std::to_string(n_layers) + ")");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("model: dropout_rate must be in [0, 1)");
    }
}

ModelConfig ModelConfig::full_scale() {
    ModelConfig cfg;
    cfg.vocab_size = 50257;
    cfg.d_model = 768;
    cfg.n_heads = 12;
    cfg.n_layers = 12;
    cfg.block_len = 1024;
    cfg.insert_layer = 2;
    cfg.extract_layer = 11;
    cfg.max_blocks = 8;
    return cfg;
}

// ----------------------------------------------------------------------------
// attention
// ----------------------------------------------------------------------------

Tensor causal_attention(const Tensor& h, const AttentionProj& proj, int n_heads,
                        const std::vector<uint8_t>& key_valid, const Tensor* query_override) {
    const int t = h.dim(0);
    const int d = h.dim(1);
    if (d % n_heads != 0) {
        throw ConfigError("causal_attention: d_model not divisible by n_heads");
    }
    if (key_valid.size() < static_cast<size_t>(t)) {
        throw ShapeError("causal_attention: key_valid shorter than sequence");
    }
    if (query_override != nullptr &&
        (query_override->dim(0) != t || query_override->dim(1) != d)) {
        throw ShapeError("causal_attention: query_override shape " +
                         shape_str(query_override->shape()) + " does not match " +
                         shape_str(h.shape()));
    }
    const int dh = d / n_heads;

    Tensor q = query_override != nullptr ? *query_override : add(matmul(h, proj.wq), proj.bq);
    Tensor k = add(matmul(h, proj.wk), proj.bk);
    Tensor v = add(matmul(h, proj.wv), proj.bv);

    // additive mask: position i sees j <= i among non-padded keys
    Tensor mask = Tensor::zeros({t, t});
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
            if (j > i || !key_valid[static_cast<size_t>(j)]) {
                mask.values()[static_cast<size_t>(i) * t + j] = -1e30;
            }
        }
    }

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int hi = 0; hi < n_heads; ++hi) {
        Tensor qh = slice_cols(q, hi * dh, dh);
        Tensor kh = slice_cols(k, hi * dh, dh);
        Tensor vh = slice_cols(v, hi * dh, dh);
        Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask);
        Tensor probs = softmax_lastdim(scores);
        heads.push_back(matmul(probs, vh));
    }
    return n_heads == 1 ? heads[0] : concat_cols(heads);
}

// ----------------------------------------------------------------------------
// model
// ----------------------------------------------------------------------------

TransformerModel::TransformerModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    const int d = cfg_.d_model;
    const int du = cfg_.resolved_d_user();
    const int ff = 4 * d;

    tok_emb_ = init_weight("tok_emb", {cfg_.vocab_size, d}, 0.02);
    pos_emb_ = init_weight("pos_emb", {cfg_.block_len, d}, 0.01);

    layers_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        LayerWeights& lw = layers_[static_cast<size_t>(l)];
        lw.ln1_g = register_param(p + "ln1.gain", Tensor::full({d}, 1.0, true));
        lw.ln1_b = register_param(p + "ln1.bias", Tensor::zeros({d}, true));
        lw.attn.wq = init_weight(p + "attn.wq", {d, d}, 0.02);
        lw.attn.bq = register_param(p + "attn.bq", Tensor::zeros({1, d}, true));
        lw.attn.wk = init_weight(p + "attn.wk", {d, d}, 0.02);
        lw.attn.bk = register_param(p + "attn.bk", Tensor::zeros({1, d}, true));
        lw.attn.wv = init_weight(p + "attn.wv", {d, d}, 0.02);
        lw.attn.bv = register_param(p + "attn.bv", Tensor::zeros({1, d}, true));
        lw.wo = init_weight(p + "attn.wo", {d, d}, 0.02);
        lw.bo = register_param(p + "attn.bo", Tensor::zeros({1, d}, true));
        if (cfg_.user_state_pathway && l == cfg_.insert_layer - 1) {
            // zero start: the injected query equals the plain query until the
            // pathway earns weight, which keeps regimes identical at step 0
            lw.attn.wq_user = register_param(p + "attn.wq_user", Tensor::zeros({du, d}, true));
        }
        lw.ln2_g = register_param(p + "ln2.gain", Tensor::full({d}, 1.0, true));
        lw.ln2_b = register_param(p + "ln2.bias", Tensor::zeros({d}, true));
        lw.ffn_w1 = init_weight(p + "ffn.w1", {d, ff}, 0.02);
        lw.ffn_b1 = register_param(p + "ffn.b1", Tensor::zeros({1, ff}, true));
        lw.ffn_w2 = init_weight(p + "ffn.w2", {ff, d}, 0.02);
        lw.ffn_b2 = register_param(p + "ffn.b2", Tensor::zeros({1, d}, true));
    }
    lnf_g_ = register_param("ln_f.gain", Tensor::full({d}, 1.0, true));
    lnf_b_ = register_param("ln_f.bias", Tensor::zeros({d}, true));

    if (cfg_.user_state_pathway) {
        register_param("user.u0", Tensor::zeros({1, du}, true));
        init_weight("user.wu", {du, du}, 0.02);
        init_weight("user.wh", {d, du}, 0.02);
    }
}

Tensor TransformerModel::register_param(const std::string& name, Tensor t) {
    params_.emplace(name, t);
    return t;
}

Tensor TransformerModel::init_weight(const std::string& name, std::vector<int> shape, double stdev) {
    // per-name seeding: adding or removing other parameters never shifts a
    // tensor's initial values, which keeps regime variants comparable
    Rng rng(derive_seed(seed_, "init/" + name));
    return register_param(name, Tensor::randn(std::move(shape), stdev, rng, true));
}

Tensor& TransformerModel::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ConfigError("unknown parameter '" + name + "'");
    }
    return it->second;
}

void TransformerModel::set_train(bool on, Rng* dropout_rng) {
    train_ = on;
    dropout_rng_ = dropout_rng;
    if (train_ && cfg_.dropout_rate > 0.0 && dropout_rng_ == nullptr) {
        throw ConfigError("set_train: dropout requires an rng");
    }
}

void TransformerModel::zero_grads() {
    for (auto& [name, t] : params_) {
        t.zero_grad();
    }
}

TransformerModel::BlockResult TransformerModel::forward_block(const Block& block,
                                                              const Tensor* user_state,
                                                              LayerActivations* trace) {
    const int t = static_cast<int>(block.tokens.size());
    if (t == 0 || t > cfg_.block_len) {
        throw ContractError("forward_block: block length " + std::to_string(t) +
                            " outside (0, " + std::to_string(cfg_.block_len) + "]");
    }
    if (block.mask.size() != block.tokens.size()) {
        throw ContractError("forward_block: mask/token length mismatch");
    }
    if (user_state != nullptr && !cfg_.user_state_pathway) {
        throw ConfigError("forward_block: model has no user-state pathway");
    }

    const bool drop = train_ && cfg_.dropout_rate > 0.0;
    auto maybe_dropout = [&](Tensor x) {
        return drop ? dropout(x, cfg_.dropout_rate, *dropout_rng_) : x;
    };

    Tensor x = add(embedding(tok_emb_, block.tokens), slice_rows(pos_emb_, 0, t));
    x = maybe_dropout(x);

    Tensor extract_hidden;
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerWeights& lw = layers_[static_cast<size_t>(l)];
        Tensor a_in = layer_norm(x, lw.ln1_g, lw.ln1_b);

        Tensor injected;
        const Tensor* qov = nullptr;
        if (user_state != nullptr && l == cfg_.insert_layer - 1) {
            injected = inject_query(a_in, *user_state, lw.attn.wq, lw.attn.wq_user, lw.attn.bq);
            qov = &injected;
        }
        Tensor att = causal_attention(a_in, lw.attn, cfg_.n_heads, block.mask, qov);
        att = maybe_dropout(add(matmul(att, lw.wo), lw.bo));
        x = add(x, att);

        Tensor f_in = layer_norm(x, lw.ln2_g, lw.ln2_b);
        Tensor f = matmul(gelu(add(matmul(f_in, lw.ffn_w1), lw.ffn_b1)), lw.ffn_w2);
        f = maybe_dropout(add(f, lw.ffn_b2));
        x = add(x, f);

        if (l == cfg_.resolved_extract_layer() - 1) {
            extract_hidden = x;
        }
        if (trace != nullptr) {
            trace->hidden.push_back(x);
        }
    }

    BlockResult res;
    res.final_hidden = x;
    res.extract_hidden = extract_hidden;
    res.logits = matmul(layer_norm(x, lnf_g_, lnf_b_), transpose(tok_emb_));
    return res;
}

}  // namespace hulm
