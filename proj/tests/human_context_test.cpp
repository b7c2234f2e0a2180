#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hulm/human_context.hpp"
#include "hulm/model.hpp"
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

ModelConfig hc_config(int n_layers = 3) {
    ModelConfig cfg;
    cfg.vocab_size = 9;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = n_layers;
    cfg.block_len = 6;
    cfg.insert_layer = std::min(2, n_layers);
    cfg.extract_layer = std::max(1, n_layers - 1);
    cfg.max_blocks = 8;
    cfg.dropout_rate = 0.0;
    cfg.user_state_pathway = true;
    return cfg;
}

void randomize(Tensor t, Rng& rng, double lo = -0.4, double hi = 0.4) {
    for (double& v : t.values()) {
        v = rng.uniform(lo, hi);
    }
}

}  // namespace

TEST_CASE("inject_query: zero user columns reduce to the plain query") {
    Rng rng(1);
    const int d = 5;
    const int du = 4;
    Tensor h = testutil::random_tensor({3, d}, rng);
    Tensor u = testutil::random_tensor({1, du}, rng);
    Tensor wq = testutil::random_tensor({d, d}, rng);
    Tensor wq_user = Tensor::zeros({du, d});
    Tensor bq = testutil::random_tensor({1, d}, rng);
    Tensor q = inject_query(h, u, wq, wq_user, bq);
    Tensor plain = add(matmul(h, wq), bq);
    for (size_t i = 0; i < q.numel(); ++i) {
        CHECK(q.values()[i] == doctest::Approx(plain.values()[i]).epsilon(1e-14));
    }
}

TEST_CASE("inject_query: zero hidden makes every position's query identical") {
    Rng rng(2);
    const int d = 4;
    Tensor h = Tensor::zeros({5, d});
    Tensor u = testutil::random_tensor({1, d}, rng);
    Tensor wq = testutil::random_tensor({d, d}, rng);
    Tensor wq_user = testutil::random_tensor({d, d}, rng);
    Tensor bq = Tensor::zeros({1, d});
    Tensor q = inject_query(h, u, wq, wq_user, bq);
    Tensor expect = matmul(u, wq_user);
    for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < d; ++c) {
            CHECK(q.at(r, c) == doctest::Approx(expect.values()[c]).epsilon(1e-14));
        }
    }
}

TEST_CASE("inject_query matches the concatenate-then-multiply oracle") {
    Rng rng(3);
    const int t = 3;
    const int d = 4;
    const int du = 4;
    Tensor h = testutil::random_tensor({t, d}, rng);
    Tensor u = testutil::random_tensor({1, du}, rng);
    Tensor wq = testutil::random_tensor({d, d}, rng);
    Tensor wq_user = testutil::random_tensor({du, d}, rng);
    Tensor bq = Tensor::zeros({1, d});
    Tensor q = inject_query(h, u, wq, wq_user, bq);

    // oracle: build [h ; u] rows of width d + du, multiply by stacked weight
    std::vector<double> cat(static_cast<size_t>(t) * (d + du));
    for (int r = 0; r < t; ++r) {
        for (int c = 0; c < d; ++c) {
            cat[r * (d + du) + c] = h.values()[r * d + c];
        }
        for (int c = 0; c < du; ++c) {
            cat[r * (d + du) + d + c] = u.values()[c];
        }
    }
    std::vector<double> stacked(static_cast<size_t>(d + du) * d);
    for (int i = 0; i < d; ++i) {
        for (int o = 0; o < d; ++o) {
            stacked[i * d + o] = wq.values()[i * d + o];
        }
    }
    for (int i = 0; i < du; ++i) {
        for (int o = 0; o < d; ++o) {
            stacked[(d + i) * d + o] = wq_user.values()[i * d + o];
        }
    }
    auto expect = testutil::matmul_oracle(cat, stacked, t, d + du, d);
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(q.values()[i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("update_user_state: zero weights give the zero vector") {
    Rng rng(4);
    Tensor u = testutil::random_tensor({1, 4}, rng);
    Tensor h = testutil::random_tensor({5, 6}, rng);
    Tensor wu = Tensor::zeros({4, 4});
    Tensor wh = Tensor::zeros({6, 4});
    Tensor out = update_user_state(u, h, {1, 1, 1, 0, 0}, wu, wh);
    for (double v : out.values()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("update_user_state: large identity wu saturates toward 1") {
    Tensor u = Tensor::from({1, 3}, {5.0, 5.0, 5.0});
    Tensor wu = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) {
        wu.values()[i * 3 + i] = 10.0;
    }
    Tensor h = Tensor::zeros({2, 4});
    Tensor wh = Tensor::zeros({4, 3});
    Tensor out = update_user_state(u, h, {1, 1}, wu, wh);
    for (double v : out.values()) {
        // tanh's range is open, but doubles round the saturated tail to 1.0
        CHECK(v > 0.999);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("update_user_state matches a scalar-loop oracle") {
    Rng rng(5);
    const int du = 3;
    const int d = 4;
    const int t = 5;
    Tensor u = testutil::random_tensor({1, du}, rng);
    Tensor h = testutil::random_tensor({t, d}, rng);
    Tensor wu = testutil::random_tensor({du, du}, rng);
    Tensor wh = testutil::random_tensor({d, du}, rng);
    std::vector<uint8_t> mask{1, 0, 1, 1, 0};
    Tensor out = update_user_state(u, h, mask, wu, wh);

    // oracle
    std::vector<double> pool(d, 0.0);
    int kept = 0;
    for (int r = 0; r < t; ++r) {
        if (!mask[r]) {
            continue;
        }
        ++kept;
        for (int c = 0; c < d; ++c) {
            pool[c] += h.values()[r * d + c];
        }
    }
    for (double& p : pool) {
        p /= kept;
    }
    for (int o = 0; o < du; ++o) {
        double acc = 0;
        for (int i = 0; i < du; ++i) {
            acc += u.values()[i] * wu.values()[i * du + o];
        }
        for (int i = 0; i < d; ++i) {
            acc += pool[i] * wh.values()[i * du + o];
        }
        CHECK(std::abs(out.values()[o] - std::tanh(acc)) < 1e-12);
    }
}

TEST_CASE("user state components never leave [-1, 1]") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor u = testutil::random_tensor({1, 4}, rng, -50, 50);
        Tensor h = testutil::random_tensor({3, 4}, rng, -50, 50);
        Tensor wu = testutil::random_tensor({4, 4}, rng, -5, 5);
        Tensor wh = testutil::random_tensor({4, 4}, rng, -5, 5);
        Tensor out = update_user_state(u, h, {1, 1, 1}, wu, wh);
        for (double v : out.values()) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("process_author: one block, one injection, one update") {
    TransformerModel model(hc_config(), 11);
    Rng rng(7);
    randomize(model.user_wu(), rng);
    randomize(model.user_wh(), rng);
    BlockSequence seq;
    seq.block_len = 6;
    seq.blocks.push_back(make_block({1, 2, 3}, 6, 8));
    seq.non_padded_block_count = 1;
    auto pass = process_author(model, seq, ForwardMode::hulm);
    REQUIRE(pass.states.size() == 2);
    CHECK(pass.non_padded_blocks == 1);
    // U_0 is the zero-initialized parameter, U_1 must differ
    double diff = 0;
    for (size_t i = 0; i < pass.states[0].numel(); ++i) {
        diff = std::max(diff, std::abs(pass.states[1].values()[i] - pass.states[0].values()[i]));
    }
    CHECK(diff > 1e-8);
    // single block: average equals U_1
    Tensor avg = average_user_states(pass);
    CHECK(avg.values() == pass.states[1].values());
}

TEST_CASE("process_author: recurrence is stateful across identical blocks") {
    TransformerModel model(hc_config(), 12);
    Rng rng(8);
    randomize(model.user_wu(), rng);
    randomize(model.user_wh(), rng);
    BlockSequence seq;
    seq.block_len = 6;
    seq.blocks.push_back(make_block({1, 2, 3, 4}, 6, 8));
    seq.blocks.push_back(make_block({1, 2, 3, 4}, 6, 8));
    seq.non_padded_block_count = 2;
    auto pass = process_author(model, seq, ForwardMode::hulm);
    REQUIRE(pass.states.size() == 3);
    double diff = 0;
    for (size_t i = 0; i < pass.states[1].numel(); ++i) {
        diff = std::max(diff, std::abs(pass.states[2].values()[i] - pass.states[1].values()[i]));
    }
    CHECK(diff > 1e-10);
}

TEST_CASE("process_author: empty author is a contract error") {
    TransformerModel model(hc_config(), 13);
    BlockSequence seq;
    seq.block_len = 6;
    CHECK_THROWS_AS(process_author(model, seq, ForwardMode::hulm), ContractError);
}

TEST_CASE("average_user_states: hand-built states and padded blocks") {
    AuthorPass pass;
    pass.mode = ForwardMode::hulm;
    pass.states.push_back(Tensor::from({1, 2}, {9, 9}));  // U_0, excluded
    pass.states.push_back(Tensor::from({1, 2}, {1, 0}));
    pass.states.push_back(Tensor::from({1, 2}, {0, 1}));
    pass.non_padded = {1, 1};
    pass.non_padded_blocks = 2;
    Tensor avg = average_user_states(pass);
    CHECK(avg.values() == std::vector<double>{0.5, 0.5});

    // 4 blocks with one fully padded: mean over the 3 non-padded states
    AuthorPass p4;
    p4.mode = ForwardMode::hulm;
    p4.states.push_back(Tensor::from({1, 1}, {0.0}));
    const std::vector<double> vals{0.2, 0.4, 0.4, 0.9};
    const std::vector<uint8_t> flags{1, 1, 0, 1};
    for (int i = 0; i < 4; ++i) {
        p4.states.push_back(Tensor::from({1, 1}, {vals[static_cast<size_t>(i)]}));
        p4.non_padded.push_back(flags[static_cast<size_t>(i)]);
        if (flags[static_cast<size_t>(i)]) {
            ++p4.non_padded_blocks;
        }
    }
    // oracle: direct mean of the included values
    double expect = (0.2 + 0.4 + 0.9) / 3.0;
    CHECK(average_user_states(p4).values()[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("fully padded blocks neither inject nor update") {
    TransformerModel model(hc_config(), 14);
    Rng rng(9);
    randomize(model.user_wu(), rng);
    randomize(model.user_wh(), rng);
    BlockSequence seq;
    seq.block_len = 6;
    seq.blocks.push_back(make_block({1, 2, 3}, 6, 8));
    Block padded;
    padded.tokens.assign(6, 8);
    padded.mask.assign(6, 0);
    padded.valid_len = 0;
    seq.blocks.push_back(padded);
    seq.non_padded_block_count = 1;
    auto pass = process_author(model, seq, ForwardMode::hulm);
    REQUIRE(pass.states.size() == 3);
    CHECK(pass.non_padded_blocks == 1);
    CHECK(pass.states[2].values() == pass.states[1].values());
    CHECK_FALSE(pass.block_logits[1].defined());
}

TEST_CASE("gradients flow through the full 3-block recurrence") {
    TransformerModel model(hc_config(), 15);
    Rng rng(10);
    randomize(model.user_wu(), rng);
    randomize(model.user_wh(), rng);
    randomize(model.param("layer.1.attn.wq_user"), rng);

    BlockSequence seq;
    seq.block_len = 6;
    seq.blocks.push_back(make_block({1, 2, 3, 4}, 6, 8));
    seq.blocks.push_back(make_block({5, 6, 0, 2}, 6, 8));
    seq.blocks.push_back(make_block({7, 3, 1, 5}, 6, 8));
    seq.non_padded_block_count = 3;

    // loss on the LAST block only: a nonzero wu gradient proves the
    // recurrence carries gradient back through blocks 1-2
    auto forward_last = [&]() {
        auto pass = process_author(model, seq, ForwardMode::hulm);
        std::vector<int> targets{3, 1, 5, 0, 0, 0};
        std::vector<uint8_t> valid{1, 1, 1, 0, 0, 0};
        int count = 0;
        return cross_entropy_sum(pass.block_logits[2], targets, valid, &count);
    };
    model.zero_grads();
    backward(forward_last());
    double wu_grad_norm = 0;
    for (double g : model.user_wu().grad()) {
        wu_grad_norm += g * g;
    }
    CHECK(wu_grad_norm > 1e-20);

    // finite differences through the unrolled recurrence
    auto forward_total = [&]() {
        auto pass = process_author(model, seq, ForwardMode::hulm);
        Tensor total = Tensor::scalar(0.0);
        for (int bi = 0; bi < 3; ++bi) {
            const Block& blk = seq.blocks[static_cast<size_t>(bi)];
            std::vector<int> targets;
            std::vector<uint8_t> valid;
            for (size_t i = 0; i < blk.tokens.size(); ++i) {
                const bool ok = i + 1 < blk.tokens.size() && blk.mask[i] && blk.mask[i + 1];
                targets.push_back(ok ? blk.tokens[i + 1] : 0);
                valid.push_back(ok ? 1 : 0);
            }
            int count = 0;
            total = add(total, cross_entropy_sum(pass.block_logits[static_cast<size_t>(bi)],
                                                 targets, valid, &count));
        }
        return total;
    };
    model.zero_grads();
    backward(forward_total());
    Rng picker(77);
    for (const std::string name : {"user.wu", "user.wh", "user.u0", "layer.1.attn.wq_user"}) {
        auto res = testutil::finite_diff_check(
            model.param(name), [&]() { return forward_total().item(); }, 1e-4, 8, &picker);
        CHECK_MESSAGE(res.ok, name, ": worst rel err ", res.worst_err);
    }
}

TEST_CASE("document order changes the user-state trace; plain blocks do not care") {
    TransformerModel model(hc_config(), 16);
    Rng rng(11);
    randomize(model.user_wu(), rng);
    randomize(model.user_wh(), rng);
    randomize(model.param("layer.1.attn.wq_user"), rng);

    Block b1 = make_block({1, 2, 3, 4, 5}, 6, 8);
    Block b2 = make_block({5, 4, 3, 2, 1}, 6, 8);
    BlockSequence fwd;
    fwd.block_len = 6;
    fwd.blocks = {b1, b2};
    fwd.non_padded_block_count = 2;
    BlockSequence rev;
    rev.block_len = 6;
    rev.blocks = {b2, b1};
    rev.non_padded_block_count = 2;

    auto pf = process_author(model, fwd, ForwardMode::hulm);
    auto pr = process_author(model, rev, ForwardMode::hulm);
    double trace_diff = 0;
    for (size_t i = 0; i < pf.states[2].numel(); ++i) {
        trace_diff = std::max(trace_diff,
                              std::abs(pf.states[2].values()[i] - pr.states[2].values()[i]));
    }
    CHECK(trace_diff > 1e-10);

    // plain mode: each block's logits depend only on its own content
    auto qf = process_author(model, fwd, ForwardMode::plain);
    auto qr = process_author(model, rev, ForwardMode::plain);
    CHECK(qf.block_logits[0].values() == qr.block_logits[1].values());
    CHECK(qf.block_logits[1].values() == qr.block_logits[0].values());
}
