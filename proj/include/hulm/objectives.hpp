#pragma once

#include <string>
#include <vector>

#include "hulm/corpus.hpp"
#include "hulm/human_context.hpp"
#include "hulm/tensor.hpp"

namespace hulm {

// How the language-model loss and the attribute loss are combined into the
// training objective. The two stabilized rules are the joint regression +
// classification objective in log-variance form; "unhalved" moves the LM
// eta term out of the 1/2 grouping (the better-performing variant and the
// default for joint runs).
enum class CombineRule {
    sum_unweighted,
    per_task_uncertainty,
    stabilized_halved,
    stabilized_unhalved,
};

CombineRule parse_combine_rule(const std::string& s);
std::string to_string(CombineRule rule);

// Learnable log-variance scalars (eta = log sigma^2), zero-initialized so
// both tasks start equally weighted.
struct LossVariances {
    Tensor eta_lm;
    Tensor eta_attr;
    static LossVariances init();
    void reset();
};

// Summed token-level NLL over an author pass. Targets are the inputs shifted
// by one within each block; positions whose target is padding are excluded.
Tensor hulm_nll_sum(const AuthorPass& pass, const BlockSequence& seq, long* count);
// Mean over all counted positions; contract error when nothing counts.
Tensor hulm_loss(const AuthorPass& pass, const BlockSequence& seq);

// Mean squared error over a batch of scalar predictions [n x 1].
Tensor attribute_regression_loss(const Tensor& predictions, const std::vector<double>& targets);

// Mean binary cross-entropy on sigmoid(logits) for labels in {0,1}.
Tensor attribute_classification_loss(const Tensor& logits, const std::vector<double>& labels);

// Per-task homoscedastic weighting: 1/2 e^{-eta} L + 1/2 eta.
Tensor uncertainty_weighted(const Tensor& task_loss, const Tensor& eta);

// Joint objective over the LM loss and the attribute regression loss under a
// stabilized rule:
//   halved:   e^{-eta_lm} L_lm + 1/2 e^{-eta_attr} L_attr + 1/2 eta_lm + 1/2 eta_attr
//   unhalved: e^{-eta_lm} L_lm + 1/2 e^{-eta_attr} L_attr +     eta_lm + 1/2 eta_attr
Tensor combine_joint(const Tensor& l_lm, const Tensor& l_attr, const Tensor& eta_lm,
                     const Tensor& eta_attr, CombineRule rule);

// Dispatch over all rules; l_attr may be null for LM-only training.
Tensor combine_losses(CombineRule rule, const Tensor& l_lm, const Tensor* l_attr,
                      LossVariances& etas);

}  // namespace hulm
