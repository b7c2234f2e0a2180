#include "hulm/human_context.hpp"

#include "hulm/model.hpp"

namespace hulm {

Tensor inject_query(const Tensor& h, const Tensor& u_prev, const Tensor& wq,
                    const Tensor& wq_user, const Tensor& bq) {
    if (u_prev.rank() != 2 || u_prev.dim(0) != 1 || u_prev.dim(1) != wq_user.dim(0)) {
        throw ConfigError("inject_query: user state " + shape_str(u_prev.shape()) +
                          " does not match wq_user " + shape_str(wq_user.shape()));
    }
    if (wq.dim(1) != wq_user.dim(1)) {
        throw ConfigError("inject_query: wq " + shape_str(wq.shape()) + " and wq_user " +
                          shape_str(wq_user.shape()) + " disagree on output width");
    }
    // equals [h ; u] through the stacked [wq over wq_user] by block structure
    Tensor q = add(matmul(h, wq), matmul(u_prev, wq_user));
    return add(q, bq);
}

Tensor update_user_state(const Tensor& u_prev, const Tensor& extract_hidden,
                         const std::vector<uint8_t>& mask, const Tensor& wu, const Tensor& wh) {
    Tensor pooled = mean_rows_masked(extract_hidden, mask);
    return tanh(add(matmul(u_prev, wu), matmul(pooled, wh)));
}

AuthorPass process_author(TransformerModel& model, const BlockSequence& seq, ForwardMode mode) {
    if (seq.blocks.empty()) {
        throw ContractError("process_author: author has zero blocks");
    }
    if (static_cast<int>(seq.blocks.size()) > model.config().max_blocks) {
        throw ContractError("process_author: " + std::to_string(seq.blocks.size()) +
                            " blocks exceed max_blocks " + std::to_string(model.config().max_blocks));
    }
    if (mode == ForwardMode::hulm && !model.config().user_state_pathway) {
        throw ConfigError("process_author: hulm mode requires a user-state pathway");
    }

    AuthorPass pass;
    pass.mode = mode;
    Tensor u;
    if (mode == ForwardMode::hulm) {
        u = model.user_u0();
        pass.states.push_back(u);
    }

    for (const Block& block : seq.blocks) {
        if (block.fully_padded()) {
            pass.block_logits.emplace_back();
            pass.final_hiddens.emplace_back();
            pass.non_padded.push_back(0);
            if (mode == ForwardMode::hulm) {
                pass.states.push_back(u);  // no injection, no update
            }
            continue;
        }
        auto res = model.forward_block(block, mode == ForwardMode::hulm ? &u : nullptr);
        pass.block_logits.push_back(res.logits);
        pass.final_hiddens.push_back(res.final_hidden);
        pass.non_padded.push_back(1);
        ++pass.non_padded_blocks;
        if (mode == ForwardMode::hulm) {
            u = update_user_state(u, res.extract_hidden, block.mask, model.user_wu(), model.user_wh());
            pass.states.push_back(u);
        }
    }
    return pass;
}

Tensor average_user_states(const AuthorPass& pass) {
    if (pass.mode != ForwardMode::hulm || pass.states.empty()) {
        throw ContractError("average_user_states: pass has no user-state trace");
    }
    if (pass.non_padded_blocks == 0) {
        throw ContractError("average_user_states: no non-padded blocks");
    }
    std::vector<Tensor> kept;
    for (size_t i = 0; i < pass.non_padded.size(); ++i) {
        if (pass.non_padded[i]) {
            kept.push_back(pass.states[i + 1]);  // U_0 excluded
        }
    }
    if (kept.size() == 1) {
        return kept[0];
    }
    return mean_rows_masked(concat_rows(kept), std::vector<uint8_t>(kept.size(), 1));
}

}  // namespace hulm
