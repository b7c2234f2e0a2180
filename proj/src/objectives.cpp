#include "hulm/objectives.hpp"

namespace hulm {

CombineRule parse_combine_rule(const std::string& s) {
    if (s == "sum") {
        return CombineRule::sum_unweighted;
    }
    if (s == "per-task") {
        return CombineRule::per_task_uncertainty;
    }
    if (s == "halved") {
        return CombineRule::stabilized_halved;
    }
    if (s == "unhalved") {
        return CombineRule::stabilized_unhalved;
    }
    throw ConfigError("unknown combine rule '" + s + "' (sum | per-task | halved | unhalved)");
}

std::string to_string(CombineRule rule) {
    switch (rule) {
        case CombineRule::sum_unweighted: return "sum";
        case CombineRule::per_task_uncertainty: return "per-task";
        case CombineRule::stabilized_halved: return "halved";
        case CombineRule::stabilized_unhalved: return "unhalved";
    }
    throw ConfigError("bad combine rule value");
}

LossVariances LossVariances::init() {
    LossVariances lv;
    lv.eta_lm = Tensor::zeros({1}, true);
    lv.eta_attr = Tensor::zeros({1}, true);
    return lv;
}

void LossVariances::reset() {
    eta_lm.values()[0] = 0.0;
    eta_attr.values()[0] = 0.0;
    eta_lm.zero_grad();
    eta_attr.zero_grad();
}

Tensor hulm_nll_sum(const AuthorPass& pass, const BlockSequence& seq, long* count) {
    if (pass.block_logits.size() != seq.blocks.size()) {
        throw ContractError("hulm_nll_sum: pass and sequence disagree on block count");
    }
    Tensor total;
    long total_count = 0;
    for (size_t bi = 0; bi < seq.blocks.size(); ++bi) {
        if (!pass.non_padded.empty() && !pass.non_padded[bi]) {
            continue;
        }
        const Block& blk = seq.blocks[bi];
        std::vector<int> targets(blk.tokens.size(), 0);
        std::vector<uint8_t> valid(blk.tokens.size(), 0);
        for (size_t i = 0; i + 1 < blk.tokens.size(); ++i) {
            if (blk.mask[i] && blk.mask[i + 1]) {
                targets[i] = blk.tokens[i + 1];
                valid[i] = 1;
            }
        }
        int c = 0;
        Tensor nll = cross_entropy_sum(pass.block_logits[bi], targets, valid, &c);
        total_count += c;
        total = total.defined() ? add(total, nll) : nll;
    }
    if (count != nullptr) {
        *count = total_count;
    }
    if (!total.defined()) {
        return Tensor::scalar(0.0);
    }
    return total;
}

Tensor hulm_loss(const AuthorPass& pass, const BlockSequence& seq) {
    long count = 0;
    Tensor total = hulm_nll_sum(pass, seq, &count);
    if (count == 0) {
        throw ContractError("hulm_loss: no non-padded next-token positions");
    }
    return scale(total, 1.0 / static_cast<double>(count));
}

Tensor attribute_regression_loss(const Tensor& predictions, const std::vector<double>& targets) {
    if (predictions.numel() != targets.size() || targets.empty()) {
        throw ContractError("attribute_regression_loss: predictions and targets must align");
    }
    Tensor target_t = Tensor::from(predictions.shape(), std::vector<double>(targets));
    Tensor diff = add(predictions, scale(target_t, -1.0));
    return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(targets.size()));
}

Tensor attribute_classification_loss(const Tensor& logits, const std::vector<double>& labels) {
    return bce_with_logits_mean(logits, labels);
}

Tensor uncertainty_weighted(const Tensor& task_loss, const Tensor& eta) {
    Tensor precision = exp(scale(eta, -1.0));
    return add(scale(mul(precision, task_loss), 0.5), scale(eta, 0.5));
}

Tensor combine_joint(const Tensor& l_lm, const Tensor& l_attr, const Tensor& eta_lm,
                     const Tensor& eta_attr, CombineRule rule) {
    if (rule != CombineRule::stabilized_halved && rule != CombineRule::stabilized_unhalved) {
        throw ConfigError("combine_joint: rule must be halved or unhalved");
    }
    Tensor lm_term = mul(exp(scale(eta_lm, -1.0)), l_lm);
    Tensor attr_term = scale(mul(exp(scale(eta_attr, -1.0)), l_attr), 0.5);
    const double lm_eta_weight = rule == CombineRule::stabilized_halved ? 0.5 : 1.0;
    Tensor reg = add(scale(eta_lm, lm_eta_weight), scale(eta_attr, 0.5));
    return add(add(lm_term, attr_term), reg);
}

Tensor combine_losses(CombineRule rule, const Tensor& l_lm, const Tensor* l_attr,
                      LossVariances& etas) {
    if (l_attr == nullptr) {
        if (rule != CombineRule::sum_unweighted) {
            throw ConfigError("combine_losses: rule '" + to_string(rule) +
                              "' needs an attribute loss");
        }
        return l_lm;
    }
    switch (rule) {
        case CombineRule::sum_unweighted:
            return add(l_lm, *l_attr);
        case CombineRule::per_task_uncertainty:
            return add(uncertainty_weighted(l_lm, etas.eta_lm),
                       uncertainty_weighted(*l_attr, etas.eta_attr));
        case CombineRule::stabilized_halved:
        case CombineRule::stabilized_unhalved:
            return combine_joint(l_lm, *l_attr, etas.eta_lm, etas.eta_attr, rule);
    }
    throw ConfigError("combine_losses: bad rule");
}

}  // namespace hulm
