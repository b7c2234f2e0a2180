#pragma once

#include <cstdint>
#include <vector>

#include "hulm/corpus.hpp"
#include "hulm/tensor.hpp"

namespace hulm {

class TransformerModel;

enum class ForwardMode { plain, hulm };

// One whole-history forward pass over an author's blocks. In hulm mode the
// user-state trace holds U_0..U_T (one more entry than blocks); fully padded
// blocks neither inject nor update, so their trace entry repeats U_{t-1}.
struct AuthorPass {
    std::vector<Tensor> states;
    std::vector<Tensor> block_logits;    // undefined Tensor for fully padded blocks
    std::vector<Tensor> final_hiddens;   // last-layer hidden per block
    std::vector<uint8_t> non_padded;     // per block
    int non_padded_blocks = 0;
    ForwardMode mode = ForwardMode::plain;
};

// Query with user-state contribution: per position, [h ; u] through the
// stacked weight [wq over wq_user], i.e. h*wq + u*wq_user + bq broadcast.
Tensor inject_query(const Tensor& h, const Tensor& u_prev, const Tensor& wq,
                    const Tensor& wq_user, const Tensor& bq);

// U_t = tanh(U_{t-1} * wu + pool(H_extract) * wh) where pool is the mean over
// non-padded positions. Requires at least one non-padded position.
Tensor update_user_state(const Tensor& u_prev, const Tensor& extract_hidden,
                         const std::vector<uint8_t>& mask, const Tensor& wu, const Tensor& wh);

// Blocks are processed in temporal order within a single pass; plain mode
// never injects user states (each block is an independent forward).
AuthorPass process_author(TransformerModel& model, const BlockSequence& seq, ForwardMode mode);

// Mean of U_1..U_T over non-padded blocks (U_0 excluded).
Tensor average_user_states(const AuthorPass& pass);

}  // namespace hulm
