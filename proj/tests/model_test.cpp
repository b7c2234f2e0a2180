#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hulm/human_context.hpp"
#include "hulm/model.hpp"
#include "hulm/tensor.hpp"
#include "test_util.hpp"

using namespace hulm;

namespace {

Block make_block(std::vector<int> tokens, int block_len, int sep_id) {
    Block b;
    b.valid_len = static_cast<int>(tokens.size());
    b.tokens = std::move(tokens);
    b.mask.assign(b.tokens.size(), 1);
    while (static_cast<int>(b.tokens.size()) < block_len) {
        b.tokens.push_back(sep_id);
        b.mask.push_back(0);
    }
    return b;
}

// Fully independent scalar-loop forward pass of the whole transformer block,
// mirroring the architecture with none of the library's tensor machinery.
struct NaiveForward {
    const TransformerModel& model;

    const std::vector<double>& w(const std::string& name) {
        return const_cast<TransformerModel&>(model).param(name).values();
    }

    static std::vector<double> layer_norm_rows(const std::vector<double>& x, int rows, int cols,
                                               const std::vector<double>& g,
                                               const std::vector<double>& b) {
        std::vector<double> y(x.size());
        for (int r = 0; r < rows; ++r) {
            double mu = 0;
            for (int c = 0; c < cols; ++c) {
                mu += x[r * cols + c];
            }
            mu /= cols;
            double var = 0;
            for (int c = 0; c < cols; ++c) {
                var += (x[r * cols + c] - mu) * (x[r * cols + c] - mu);
            }
            var /= cols;
            const double rs = 1.0 / std::sqrt(var + 1e-5);
            for (int c = 0; c < cols; ++c) {
                y[r * cols + c] = (x[r * cols + c] - mu) * rs * g[c] + b[c];
            }
        }
        return y;
    }

    static std::vector<double> linear(const std::vector<double>& x, int rows, int in, int out,
                                      const std::vector<double>& wmat,
                                      const std::vector<double>* bias) {
        std::vector<double> y(static_cast<size_t>(rows) * out, 0.0);
        for (int r = 0; r < rows; ++r) {
            for (int o = 0; o < out; ++o) {
                double acc = bias != nullptr ? (*bias)[o] : 0.0;
                for (int i = 0; i < in; ++i) {
                    acc += x[r * in + i] * wmat[i * out + o];
                }
                y[r * out + o] = acc;
            }
        }
        return y;
    }

    std::vector<double> run(const Block& block) {
        const auto& cfg = model.config();
        const int t = static_cast<int>(block.tokens.size());
        const int d = cfg.d_model;
        const int dh = d / cfg.n_heads;

        std::vector<double> x(static_cast<size_t>(t) * d);
        const auto& emb = w("tok_emb");
        const auto& pos = w("pos_emb");
        for (int r = 0; r < t; ++r) {
            for (int c = 0; c < d; ++c) {
                x[r * d + c] = emb[block.tokens[r] * d + c] + pos[r * d + c];
            }
        }

        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layer." + std::to_string(l) + ".";
            auto a_in = layer_norm_rows(x, t, d, w(p + "ln1.gain"), w(p + "ln1.bias"));
            auto bq = w(p + "attn.bq");
            auto bk = w(p + "attn.bk");
            auto bv = w(p + "attn.bv");
            auto q = linear(a_in, t, d, d, w(p + "attn.wq"), &bq);
            auto k = linear(a_in, t, d, d, w(p + "attn.wk"), &bk);
            auto v = linear(a_in, t, d, d, w(p + "attn.wv"), &bv);

            std::vector<double> att(static_cast<size_t>(t) * d, 0.0);
            for (int h = 0; h < cfg.n_heads; ++h) {
                for (int i = 0; i < t; ++i) {
                    std::vector<double> scores(static_cast<size_t>(t), -1e30);
                    double mx = -1e30;
                    for (int j = 0; j <= i; ++j) {
                        if (!block.mask[j]) {
                            continue;
                        }
                        double s = 0;
                        for (int c = 0; c < dh; ++c) {
                            s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                        }
                        scores[j] = s / std::sqrt(static_cast<double>(dh));
                        mx = std::max(mx, scores[j]);
                    }
                    double z = 0;
                    for (int j = 0; j < t; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        z += scores[j];
                    }
                    for (int j = 0; j < t; ++j) {
                        const double pw = scores[j] / z;
                        for (int c = 0; c < dh; ++c) {
                            att[i * d + h * dh + c] += pw * v[j * d + h * dh + c];
                        }
                    }
                }
            }
            auto bo = w(p + "attn.bo");
            auto proj = linear(att, t, d, d, w(p + "attn.wo"), &bo);
            for (size_t i = 0; i < x.size(); ++i) {
                x[i] += proj[i];
            }

            auto f_in = layer_norm_rows(x, t, d, w(p + "ln2.gain"), w(p + "ln2.bias"));
            auto b1 = w(p + "ffn.b1");
            auto hmid = linear(f_in, t, d, 4 * d, w(p + "ffn.w1"), &b1);
            for (double& hv : hmid) {
                const double u = 0.7978845608028654 * (hv + 0.044715 * hv * hv * hv);
                hv = 0.5 * hv * (1.0 + std::tanh(u));
            }
            auto b2 = w(p + "ffn.b2");
            auto f = linear(hmid, t, 4 * d, d, w(p + "ffn.w2"), &b2);
            for (size_t i = 0; i < x.size(); ++i) {
                x[i] += f[i];
            }
        }

        auto h_ln = layer_norm_rows(x, t, d, w("ln_f.gain"), w("ln_f.bias"));
        // logits = h_ln * tok_emb^T
        std::vector<double> logits(static_cast<size_t>(t) * cfg.vocab_size, 0.0);
        for (int r = 0; r < t; ++r) {
            for (int vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                double acc = 0;
                for (int c = 0; c < d; ++c) {
                    acc += h_ln[r * d + c] * emb[vtok * d + c];
                }
                logits[r * cfg.vocab_size + vtok] = acc;
            }
        }
        return logits;
    }
};

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 5;
    cfg.d_model = 4;
    cfg.n_heads = 1;
    cfg.n_layers = 1;
    cfg.block_len = 8;
    cfg.insert_layer = 1;
    cfg.extract_layer = 1;
    cfg.dropout_rate = 0.0;
    cfg.user_state_pathway = false;
    return cfg;
}

}  // namespace

TEST_CASE("single-layer single-head forward matches the scalar-loop oracle") {
    TransformerModel model(tiny_config(), 123);
    Block b = make_block({0, 3, 1, 4, 2}, 8, 4);
    auto res = model.forward_block(b);
    NaiveForward oracle{model};
    auto expect = oracle.run(b);
    REQUIRE(res.logits.numel() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(res.logits.values()[i] - expect[i]) < 1e-10);
    }
}

TEST_CASE("multi-layer multi-head forward matches the scalar-loop oracle") {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 3;
    cfg.block_len = 6;
    cfg.insert_layer = 2;
    cfg.extract_layer = 2;
    cfg.dropout_rate = 0.0;
    cfg.user_state_pathway = false;
    TransformerModel model(cfg, 7);
    Block b = make_block({1, 9, 4, 7}, 6, 10);
    auto res = model.forward_block(b);
    NaiveForward oracle{model};
    auto expect = oracle.run(b);
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(res.logits.values()[i] - expect[i]) < 1e-10);
    }
}

TEST_CASE("causal_attention: length-1 sequence returns its value vector") {
    Rng rng(3);
    const int d = 6;
    AttentionProj proj;
    proj.wq = testutil::random_tensor({d, d}, rng);
    proj.bq = Tensor::zeros({1, d});
    proj.wk = testutil::random_tensor({d, d}, rng);
    proj.bk = Tensor::zeros({1, d});
    proj.wv = testutil::random_tensor({d, d}, rng);
    proj.bv = Tensor::zeros({1, d});
    Tensor h = testutil::random_tensor({1, d}, rng);
    Tensor out = causal_attention(h, proj, 2, {1});
    Tensor v = add(matmul(h, proj.wv), proj.bv);
    for (int c = 0; c < d; ++c) {
        CHECK(out.values()[c] == doctest::Approx(v.values()[c]).epsilon(1e-12));
    }
}

TEST_CASE("causal_attention: padded keys get zero weight from valid positions") {
    Rng rng(4);
    const int d = 4;
    AttentionProj proj;
    proj.wq = testutil::random_tensor({d, d}, rng);
    proj.bq = Tensor::zeros({1, d});
    proj.wk = testutil::random_tensor({d, d}, rng);
    proj.bk = Tensor::zeros({1, d});
    proj.wv = testutil::random_tensor({d, d}, rng);
    proj.bv = Tensor::zeros({1, d});
    Tensor h1 = testutil::random_tensor({4, d}, rng);
    Tensor h2 = Tensor::from(h1.shape(), h1.values());
    // rewrite the padded suffix rows arbitrarily
    for (int c = 0; c < d; ++c) {
        h2.values()[2 * d + c] = 99.0 + c;
        h2.values()[3 * d + c] = -55.0 - c;
    }
    std::vector<uint8_t> valid{1, 1, 0, 0};
    Tensor o1 = causal_attention(h1, proj, 2, valid);
    Tensor o2 = causal_attention(h2, proj, 2, valid);
    for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < d; ++c) {
            CHECK(o1.at(r, c) == doctest::Approx(o2.at(r, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("causal_attention: 3-token case against direct summation") {
    Rng rng(5);
    const int d = 6;
    const int heads = 3;
    const int dh = d / heads;
    AttentionProj proj;
    proj.wq = testutil::random_tensor({d, d}, rng);
    proj.bq = testutil::random_tensor({1, d}, rng);
    proj.wk = testutil::random_tensor({d, d}, rng);
    proj.bk = testutil::random_tensor({1, d}, rng);
    proj.wv = testutil::random_tensor({d, d}, rng);
    proj.bv = testutil::random_tensor({1, d}, rng);
    Tensor h = testutil::random_tensor({3, d}, rng);
    Tensor out = causal_attention(h, proj, heads, {1, 1, 1});

    auto lin = [&](const Tensor& wm, const Tensor& bv2) {
        std::vector<double> y(3 * d, 0.0);
        for (int r = 0; r < 3; ++r) {
            for (int o = 0; o < d; ++o) {
                double acc = bv2.values()[o];
                for (int i = 0; i < d; ++i) {
                    acc += h.values()[r * d + i] * wm.values()[i * d + o];
                }
                y[r * d + o] = acc;
            }
        }
        return y;
    };
    auto q = lin(proj.wq, proj.bq);
    auto k = lin(proj.wk, proj.bk);
    auto v = lin(proj.wv, proj.bv);
    for (int hi = 0; hi < heads; ++hi) {
        for (int i = 0; i < 3; ++i) {
            std::vector<double> e(3, 0.0);
            double z = 0;
            for (int j = 0; j <= i; ++j) {
                double s = 0;
                for (int c = 0; c < dh; ++c) {
                    s += q[i * d + hi * dh + c] * k[j * d + hi * dh + c];
                }
                e[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                z += e[j];
            }
            for (int c = 0; c < dh; ++c) {
                double acc = 0;
                for (int j = 0; j <= i; ++j) {
                    acc += e[j] / z * v[j * d + hi * dh + c];
                }
                CHECK(std::abs(out.at(i, hi * dh + c) - acc) < 1e-12);
            }
        }
    }
}

TEST_CASE("causality: perturbing token t changes logits only at positions >= t") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 2;
    cfg.extract_layer = 0;
    cfg.vocab_size = 7;
    TransformerModel model(cfg, 21);
    Block b1 = make_block({0, 1, 2, 3, 4, 5}, 8, 6);
    Block b2 = b1;
    const int perturb_at = 3;
    b2.tokens[perturb_at] = 6;
    auto r1 = model.forward_block(b1);
    auto r2 = model.forward_block(b2);
    const int v = cfg.vocab_size;
    double before = 0;
    double after = 0;
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < v; ++c) {
            const double d = std::abs(r1.logits.at(r, c) - r2.logits.at(r, c));
            if (r < perturb_at) {
                before = std::max(before, d);
            } else {
                after = std::max(after, d);
            }
        }
    }
    CHECK(before == 0.0);
    CHECK(after > 1e-6);
}

TEST_CASE("zero user-state columns: hulm forward equals plain forward") {
    ModelConfig cfg;
    cfg.vocab_size = 9;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 3;
    cfg.block_len = 8;
    cfg.insert_layer = 2;
    cfg.extract_layer = 2;
    cfg.dropout_rate = 0.0;
    TransformerModel model(cfg, 99);
    // wq_user and u0 are zero-initialized; give the recurrence nonzero weights
    Rng rng(1);
    Block b = make_block({0, 5, 3, 7, 2, 8}, 8, 8);
    Tensor u = testutil::random_tensor({1, 8}, rng, -0.9, 0.9, false);
    auto plain = model.forward_block(b);
    auto hulm = model.forward_block(b, &u);
    for (size_t i = 0; i < plain.logits.numel(); ++i) {
        CHECK(std::abs(plain.logits.values()[i] - hulm.logits.values()[i]) < 1e-10);
    }

    // nonzero wq_user must break the equivalence
    auto& wq_user = model.param("layer.1.attn.wq_user");
    for (double& x : wq_user.values()) {
        x = rng.uniform(-0.3, 0.3);
    }
    auto hulm2 = model.forward_block(b, &u);
    double diff = 0;
    for (size_t i = 0; i < plain.logits.numel(); ++i) {
        diff = std::max(diff, std::abs(plain.logits.values()[i] - hulm2.logits.values()[i]));
    }
    CHECK(diff > 1e-8);
}

TEST_CASE("zero output head gives uniform distribution, perplexity = vocab size") {
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = 5;
    TransformerModel model(cfg, 77);
    for (double& v : model.param("tok_emb").values()) {
        v = 0.0;
    }
    Block b = make_block({0, 1, 2, 3}, 8, 4);
    auto res = model.forward_block(b);
    std::vector<int> targets{1, 2, 3, 0, 0, 0, 0, 0};
    std::vector<uint8_t> valid{1, 1, 1, 0, 0, 0, 0, 0};
    int count = 0;
    Tensor nll = cross_entropy_sum(res.logits, targets, valid, &count);
    const double ppl = std::exp(nll.item() / count);
    CHECK(ppl == doctest::Approx(5.0).epsilon(0.001));
}

TEST_CASE("insert layer moves with the config (structural layer trace)") {
    auto first_diff_layer = [](int insert) {
        ModelConfig cfg;
        cfg.vocab_size = 9;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 4;
        cfg.block_len = 8;
        cfg.insert_layer = insert;
        cfg.extract_layer = 3;
        cfg.dropout_rate = 0.0;
        TransformerModel model(cfg, 31);
        Rng rng(9);
        auto& wq_user = model.param("layer." + std::to_string(insert - 1) + ".attn.wq_user");
        for (double& x : wq_user.values()) {
            x = rng.uniform(-0.5, 0.5);
        }
        Tensor u = testutil::random_tensor({1, 8}, rng, -0.9, 0.9, false);
        Block b = make_block({0, 5, 3, 7}, 8, 8);
        LayerActivations plain_trace;
        LayerActivations hulm_trace;
        model.forward_block(b, nullptr, &plain_trace);
        model.forward_block(b, &u, &hulm_trace);
        for (int l = 0; l < cfg.n_layers; ++l) {
            double d = 0;
            for (size_t i = 0; i < plain_trace.hidden[l].numel(); ++i) {
                d = std::max(d, std::abs(plain_trace.hidden[l].values()[i] -
                                         hulm_trace.hidden[l].values()[i]));
            }
            if (d > 1e-12) {
                return l + 1;  // 1-based
            }
        }
        return -1;
    };
    CHECK(first_diff_layer(2) == 2);
    CHECK(first_diff_layer(3) == 3);
}

TEST_CASE("whole block gradients vs finite differences at d_model=8") {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.block_len = 6;
    cfg.insert_layer = 1;
    cfg.extract_layer = 1;
    cfg.dropout_rate = 0.0;
    cfg.user_state_pathway = false;
    TransformerModel model(cfg, 17);
    Block b = make_block({1, 9, 4, 7, 2}, 6, 10);
    std::vector<int> targets{9, 4, 7, 2, 0, 0};
    std::vector<uint8_t> valid{1, 1, 1, 1, 0, 0};

    auto forward = [&]() {
        int count = 0;
        return cross_entropy_sum(model.forward_block(b).logits, targets, valid, &count);
    };
    model.zero_grads();
    backward(forward());
    Rng picker(55);
    for (auto& [name, t] : model.params()) {
        auto res = testutil::finite_diff_check(
            t, [&]() { return forward().item(); }, 1e-4, 6, &picker);
        CHECK_MESSAGE(res.ok, name, ": worst rel err ", res.worst_err, " analytic ", res.analytic,
                      " numeric ", res.numeric);
    }
}

TEST_CASE("forward_block contract errors") {
    ModelConfig cfg = tiny_config();
    TransformerModel model(cfg, 1);
    Block over = make_block(std::vector<int>(9, 0), 9, 4);
    CHECK_THROWS_AS(model.forward_block(over), ContractError);
    Block bad = make_block({0, 1, 17}, 8, 4);
    CHECK_THROWS_AS(model.forward_block(bad), VocabError);
}
