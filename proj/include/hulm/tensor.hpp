#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hulm/errors.hpp"
#include "hulm/rng.hpp"

namespace hulm {

// Reverse-mode autodiff over dense row-major double tensors. A Tensor is a
// shared handle to a graph node; ops are free functions that record their
// backward rule on the output node. backward(loss) walks the recorded graph
// once in reverse topological order and accumulates gradients additively
// (callers zero grads between steps).

class TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

class TensorNode {
public:
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;     // allocated iff requires_grad
    std::vector<double> scratch;  // per-backward-pass upstream buffer
    bool requires_grad = false;

    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    size_t numel() const { return value.size(); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    // i.i.d. normal(0, stdev) entries drawn from rng
    static Tensor randn(std::vector<int> shape, double stdev, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->value.size(); }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad();

    // scalar accessors
    double item() const;
    double at(int r, int c) const;

    NodePtr node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    NodePtr node_;
};

// ---- graph construction helpers (used by ops; exposed for extensions) ----
Tensor make_op_output(std::vector<int> shape, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn);
void accumulate(TensorNode& parent, size_t index, double v);

// ---- ops ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// add/mul accept equal shapes, a row vector ({1,n} or {n}) broadcast over the
// rows of a 2-d left operand, or a scalar right operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor slice_rows(const Tensor& a, int r0, int len);
Tensor slice_cols(const Tensor& a, int c0, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// rows of table selected by ids -> [ids.size() x d]; backward scatter-adds
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// mean over rows with mask[r] != 0 -> [1 x d]; at least one row must be kept
Tensor mean_rows_masked(const Tensor& x, const std::vector<uint8_t>& mask);

Tensor sum(const Tensor& a);

// Summed token-level negative log-likelihood over positions with valid != 0.
// targets[i] is the class index for row i of logits. count returns the number
// of positions that entered the sum.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& valid, int* count);

// Mean binary cross-entropy on sigmoid(logits) against labels in {0,1}.
Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& labels);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// ---- backward ----
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);

}  // namespace hulm
