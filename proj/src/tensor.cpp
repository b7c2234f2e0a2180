#include "hulm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "hulm/kernels.hpp"

namespace hulm {

namespace {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        }
        n *= static_cast<size_t>(d);
    }
    return n;
}

// rows/cols view of a tensor flattened to 2-d over the last axis
std::pair<int, int> rows_cols(const std::vector<int>& shape) {
    if (shape.empty()) {
        return {1, 1};
    }
    int cols = shape.back();
    int rows = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) {
        rows *= shape[i];
    }
    return {rows, cols};
}

void check_finite(const Tensor& a, const char* op) {
    for (double v : a.values()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input value");
        }
    }
}

bool is_scalar(const Tensor& t) { return t.numel() == 1; }

// b broadcasts over the rows of a when it is {n} or {1,n} and a is {m,n}
bool row_broadcastable(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2) {
        return false;
    }
    const auto& bs = b.shape();
    const int n = a.dim(1);
    return (bs.size() == 1 && bs[0] == n) || (bs.size() == 2 && bs[0] == 1 && bs[1] == n);
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += "x";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// ----------------------------------------------------------------------------
// Tensor
// ----------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    if (requires_grad) {
        n->grad.assign(n->value.size(), 0.0);
    }
    return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), fill);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.values() = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, double stdev, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) {
        v = rng.gaussian() * stdev;
    }
    return t;
}

std::vector<double>& Tensor::grad() {
    if (!node_->requires_grad) {
        throw ContractError("grad() on a tensor without requires_grad");
    }
    if (node_->grad.size() != node_->value.size()) {
        node_->grad.assign(node_->value.size(), 0.0);
    }
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    return const_cast<Tensor*>(this)->grad();
}

void Tensor::zero_grad() {
    if (node_->requires_grad) {
        node_->grad.assign(node_->value.size(), 0.0);
    }
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(int r, int c) const {
    return node_->value[static_cast<size_t>(r) * shape().back() + c];
}

// ----------------------------------------------------------------------------
// graph plumbing
// ----------------------------------------------------------------------------

Tensor make_op_output(std::vector<int> shape, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    bool needs_grad = false;
    for (const auto& p : parents) {
        needs_grad = needs_grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros(std::move(shape), false);
    out.node()->requires_grad = needs_grad;
    if (needs_grad) {
        for (auto& p : parents) {
            out.node()->parents.push_back(p.node());
        }
        out.node()->backward_fn = std::move(backward_fn);
    }
    return out;
}

void accumulate(TensorNode& parent, size_t index, double v) {
    if (parent.requires_grad) {
        parent.scratch[index] += v;
    }
}

// ----------------------------------------------------------------------------
// ops
// ----------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0);
    const int k = a.dim(1);
    const int n = b.dim(1);
    auto an = a.node();
    auto bn = b.node();
    Tensor out = make_op_output({m, n}, {a, b}, [an, bn, m, k, n](TensorNode& self) {
        if (an->requires_grad) {
            kernels::matmul_nt_acc(self.scratch.data(), bn->value.data(), an->scratch.data(), m, n, k);
        }
        if (bn->requires_grad) {
            kernels::matmul_tn_acc(an->value.data(), self.scratch.data(), bn->scratch.data(), m, k, n);
        }
    });
    kernels::matmul(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape()));
    }
    const int m = a.dim(0);
    const int n = a.dim(1);
    auto an = a.node();
    Tensor out = make_op_output({n, m}, {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                an->scratch[static_cast<size_t>(i) * n + j] += self.scratch[static_cast<size_t>(j) * m + i];
            }
        }
    });
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out.values()[static_cast<size_t>(j) * m + i] = a.values()[static_cast<size_t>(i) * n + j];
        }
    }
    return out;
}

namespace {

enum class BroadcastKind { same, row, scalar };

BroadcastKind classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) {
        return BroadcastKind::same;
    }
    if (is_scalar(b)) {
        return BroadcastKind::scalar;
    }
    if (row_broadcastable(a, b)) {
        return BroadcastKind::row;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const BroadcastKind kind = classify_broadcast(a, b, "add");
    auto an = a.node();
    auto bn = b.node();
    const auto [rows, cols] = rows_cols(a.shape());
    Tensor out = make_op_output(a.shape(), {a, b}, [an, bn, kind, rows = rows, cols = cols](TensorNode& self) {
        if (an->requires_grad) {
            for (size_t i = 0; i < self.scratch.size(); ++i) {
                an->scratch[i] += self.scratch[i];
            }
        }
        if (!bn->requires_grad) {
            return;
        }
        switch (kind) {
            case BroadcastKind::same:
                for (size_t i = 0; i < self.scratch.size(); ++i) {
                    bn->scratch[i] += self.scratch[i];
                }
                break;
            case BroadcastKind::scalar:
                for (double g : self.scratch) {
                    bn->scratch[0] += g;
                }
                break;
            case BroadcastKind::row:
                for (int r = 0; r < rows; ++r) {
                    for (int c = 0; c < cols; ++c) {
                        bn->scratch[c] += self.scratch[static_cast<size_t>(r) * cols + c];
                    }
                }
                break;
        }
    });
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    switch (kind) {
        case BroadcastKind::same:
            for (size_t i = 0; i < ov.size(); ++i) {
                ov[i] = av[i] + bv[i];
            }
            break;
        case BroadcastKind::scalar:
            for (size_t i = 0; i < ov.size(); ++i) {
                ov[i] = av[i] + bv[0];
            }
            break;
        case BroadcastKind::row:
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < cols; ++c) {
                    ov[static_cast<size_t>(r) * cols + c] = av[static_cast<size_t>(r) * cols + c] + bv[c];
                }
            }
            break;
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const BroadcastKind kind = classify_broadcast(a, b, "mul");
    auto an = a.node();
    auto bn = b.node();
    const auto [rows, cols] = rows_cols(a.shape());
    Tensor out = make_op_output(a.shape(), {a, b}, [an, bn, kind, rows = rows, cols = cols](TensorNode& self) {
        const auto& av = an->value;
        const auto& bv = bn->value;
        switch (kind) {
            case BroadcastKind::same:
                for (size_t i = 0; i < self.scratch.size(); ++i) {
                    const double g = self.scratch[i];
                    accumulate(*an, i, g * bv[i]);
                    accumulate(*bn, i, g * av[i]);
                }
                break;
            case BroadcastKind::scalar:
                for (size_t i = 0; i < self.scratch.size(); ++i) {
                    const double g = self.scratch[i];
                    accumulate(*an, i, g * bv[0]);
                    accumulate(*bn, 0, g * av[i]);
                }
                break;
            case BroadcastKind::row:
                for (int r = 0; r < rows; ++r) {
                    for (int c = 0; c < cols; ++c) {
                        const size_t i = static_cast<size_t>(r) * cols + c;
                        const double g = self.scratch[i];
                        accumulate(*an, i, g * bv[c]);
                        accumulate(*bn, c, g * av[i]);
                    }
                }
                break;
        }
    });
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    switch (kind) {
        case BroadcastKind::same:
            for (size_t i = 0; i < ov.size(); ++i) {
                ov[i] = av[i] * bv[i];
            }
            break;
        case BroadcastKind::scalar:
            for (size_t i = 0; i < ov.size(); ++i) {
                ov[i] = av[i] * bv[0];
            }
            break;
        case BroadcastKind::row:
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < cols; ++c) {
                    ov[static_cast<size_t>(r) * cols + c] = av[static_cast<size_t>(r) * cols + c] * bv[c];
                }
            }
            break;
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    auto an = a.node();
    Tensor out = make_op_output(a.shape(), {a}, [an, c](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (size_t i = 0; i < self.scratch.size(); ++i) {
            an->scratch[i] += c * self.scratch[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) {
        out.values()[i] = c * a.values()[i];
    }
    return out;
}

namespace {

// elementwise op with derivative expressed from (x, y)
Tensor unary_op(const Tensor& a, double (*fwd)(double), double (*dfdx)(double, double)) {
    auto an = a.node();
    Tensor out = make_op_output(a.shape(), {a}, [an, dfdx](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (size_t i = 0; i < self.scratch.size(); ++i) {
            an->scratch[i] += dfdx(an->value[i], self.value[i]) * self.scratch[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) {
        out.values()[i] = fwd(a.values()[i]);
    }
    return out;
}

}  // namespace

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    check_finite(a, "log");
    for (double v : a.values()) {
        if (v <= 0.0) {
            throw NumericError("log: non-positive input " + std::to_string(v));
        }
    }
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                   : std::exp(x) / (1.0 + std::exp(x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    // tanh approximation, same as the GPT-2 reference
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return unary_op(a,
                    [](double x) {
                        const double u = kC * (x + kA * x * x * x);
                        return 0.5 * x * (1.0 + std::tanh(u));
                    },
                    [](double x, double) {
                        const double u = kC * (x + kA * x * x * x);
                        const double t = std::tanh(u);
                        const double du = kC * (1.0 + 3.0 * kA * x * x);
                        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
}

Tensor softmax_lastdim(const Tensor& a) {
    check_finite(a, "softmax");
    const auto [rows, cols] = rows_cols(a.shape());
    auto an = a.node();
    Tensor out = make_op_output(a.shape(), {a}, [an, rows = rows, cols = cols](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        kernels::softmax_rows_backward(self.value.data(), self.scratch.data(), an->scratch.data(),
                                       rows, cols);
    });
    kernels::softmax_rows(a.values().data(), out.values().data(), rows, cols);
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto [rows, cols] = rows_cols(x.shape());
    if (static_cast<int>(gain.numel()) != cols || static_cast<int>(bias.numel()) != cols) {
        throw ShapeError("layer_norm: gain/bias size must equal last dim " + std::to_string(cols));
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto mean = std::make_shared<std::vector<double>>(rows);
    auto rstd = std::make_shared<std::vector<double>>(rows);
    Tensor out = make_op_output(x.shape(), {x, gain, bias},
                                [xn, gn, bn, mean, rstd, rows = rows, cols = cols](TensorNode& self) {
        std::vector<double> dgain(cols, 0.0);
        std::vector<double> dbias(cols, 0.0);
        std::vector<double> dx(static_cast<size_t>(rows) * cols, 0.0);
        kernels::layer_norm_rows_backward(xn->value.data(), gn->value.data(), mean->data(),
                                          rstd->data(), self.scratch.data(), dx.data(),
                                          dgain.data(), dbias.data(), rows, cols);
        if (xn->requires_grad) {
            for (size_t i = 0; i < dx.size(); ++i) {
                xn->scratch[i] += dx[i];
            }
        }
        for (int c = 0; c < cols; ++c) {
            accumulate(*gn, c, dgain[c]);
            accumulate(*bn, c, dbias[c]);
        }
    });
    kernels::layer_norm_rows(x.values().data(), gain.values().data(), bias.values().data(),
                             out.values().data(), mean->data(), rstd->data(), rows, cols, eps);
    return out;
}

Tensor slice_rows(const Tensor& a, int r0, int len) {
    if (a.rank() != 2 || r0 < 0 || len <= 0 || r0 + len > a.dim(0)) {
        throw ShapeError("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                         std::to_string(r0 + len) + ") for " + shape_str(a.shape()));
    }
    const int cols = a.dim(1);
    auto an = a.node();
    Tensor out = make_op_output({len, cols}, {a}, [an, r0, len, cols](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (int r = 0; r < len; ++r) {
            for (int c = 0; c < cols; ++c) {
                an->scratch[static_cast<size_t>(r0 + r) * cols + c] +=
                    self.scratch[static_cast<size_t>(r) * cols + c];
            }
        }
    });
    std::copy_n(a.values().begin() + static_cast<size_t>(r0) * cols,
                static_cast<size_t>(len) * cols, out.values().begin());
    return out;
}

Tensor slice_cols(const Tensor& a, int c0, int len) {
    if (a.rank() != 2 || c0 < 0 || len <= 0 || c0 + len > a.dim(1)) {
        throw ShapeError("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                         std::to_string(c0 + len) + ") for " + shape_str(a.shape()));
    }
    const int rows = a.dim(0);
    const int cols = a.dim(1);
    auto an = a.node();
    Tensor out = make_op_output({rows, len}, {a}, [an, c0, len, rows, cols](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < len; ++c) {
                an->scratch[static_cast<size_t>(r) * cols + c0 + c] +=
                    self.scratch[static_cast<size_t>(r) * len + c];
            }
        }
    });
    for (int r = 0; r < rows; ++r) {
        std::copy_n(a.values().begin() + static_cast<size_t>(r) * cols + c0, len,
                    out.values().begin() + static_cast<size_t>(r) * len);
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_rows: empty input");
    }
    if (parts[0].rank() != 2) {
        throw ShapeError("concat_rows: rank-2 parts required, got " + shape_str(parts[0].shape()));
    }
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) {
            throw ShapeError("concat_rows: column mismatch at " + shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) {
        nodes.push_back(p.node());
    }
    Tensor out = make_op_output({rows, cols}, parts, [nodes, cols](TensorNode& self) {
        size_t offset = 0;
        for (const auto& pn : nodes) {
            const size_t n = pn->value.size();
            if (pn->requires_grad) {
                for (size_t i = 0; i < n; ++i) {
                    pn->scratch[i] += self.scratch[offset + i];
                }
            }
            offset += n;
        }
        (void)cols;
    });
    size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + offset);
        offset += p.numel();
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: empty input");
    }
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
        }
        cols += p.dim(1);
    }
    std::vector<NodePtr> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    Tensor out = make_op_output({rows, cols}, parts, [nodes, widths, rows, cols](TensorNode& self) {
        int c0 = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
            const int w = widths[pi];
            auto& pn = *nodes[pi];
            if (pn.requires_grad) {
                for (int r = 0; r < rows; ++r) {
                    for (int c = 0; c < w; ++c) {
                        pn.scratch[static_cast<size_t>(r) * w + c] +=
                            self.scratch[static_cast<size_t>(r) * cols + c0 + c];
                    }
                }
            }
            c0 += w;
        }
    });
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r) {
            std::copy_n(p.values().begin() + static_cast<size_t>(r) * w, w,
                        out.values().begin() + static_cast<size_t>(r) * cols + c0);
        }
        c0 += w;
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding: table must be rank-2, got " + shape_str(table.shape()));
    }
    const int vocab = table.dim(0);
    const int d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw VocabError("embedding: token id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    const int rows = static_cast<int>(ids.size());
    Tensor out = make_op_output({rows, d}, {table}, [tn, ids_copy, d](TensorNode& self) {
        if (!tn->requires_grad) {
            return;
        }
        for (size_t r = 0; r < ids_copy->size(); ++r) {
            const size_t dst = static_cast<size_t>((*ids_copy)[r]) * d;
            for (int c = 0; c < d; ++c) {
                tn->scratch[dst + c] += self.scratch[r * d + c];
            }
        }
    });
    for (size_t r = 0; r < ids.size(); ++r) {
        std::copy_n(table.values().begin() + static_cast<size_t>(ids[r]) * d, d,
                    out.values().begin() + r * d);
    }
    return out;
}

Tensor mean_rows_masked(const Tensor& x, const std::vector<uint8_t>& mask) {
    if (x.rank() != 2 || mask.size() != static_cast<size_t>(x.dim(0))) {
        throw ShapeError("mean_rows_masked: mask length must equal row count of " +
                         shape_str(x.shape()));
    }
    const int rows = x.dim(0);
    const int cols = x.dim(1);
    int kept = 0;
    for (uint8_t m : mask) {
        kept += m ? 1 : 0;
    }
    if (kept == 0) {
        throw ContractError("mean_rows_masked: no rows kept by mask");
    }
    auto xn = x.node();
    auto mask_copy = std::make_shared<std::vector<uint8_t>>(mask);
    const double inv = 1.0 / kept;
    Tensor out = make_op_output({1, cols}, {x}, [xn, mask_copy, rows, cols, inv](TensorNode& self) {
        if (!xn->requires_grad) {
            return;
        }
        for (int r = 0; r < rows; ++r) {
            if (!(*mask_copy)[r]) {
                continue;
            }
            for (int c = 0; c < cols; ++c) {
                xn->scratch[static_cast<size_t>(r) * cols + c] += self.scratch[c] * inv;
            }
        }
    });
    for (int r = 0; r < rows; ++r) {
        if (!mask[r]) {
            continue;
        }
        for (int c = 0; c < cols; ++c) {
            out.values()[c] += x.values()[static_cast<size_t>(r) * cols + c] * inv;
        }
    }
    return out;
}

Tensor sum(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op_output({1}, {a}, [an](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (double& g : an->scratch) {
            g += self.scratch[0];
        }
    });
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    out.values()[0] = s;
    return out;
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& valid, int* count) {
    const auto [rows, cols] = rows_cols(logits.shape());
    if (targets.size() != static_cast<size_t>(rows) || valid.size() != static_cast<size_t>(rows)) {
        throw ShapeError("cross_entropy_sum: targets/valid must have one entry per logit row");
    }
    check_finite(logits, "cross_entropy_sum");
    int kept = 0;
    for (int r = 0; r < rows; ++r) {
        if (!valid[r]) {
            continue;
        }
        ++kept;
        if (targets[r] < 0 || targets[r] >= cols) {
            throw VocabError("cross_entropy_sum: target id " + std::to_string(targets[r]) +
                             " outside vocabulary of size " + std::to_string(cols));
        }
    }
    if (count != nullptr) {
        *count = kept;
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
    kernels::softmax_rows(logits.values().data(), probs->data(), rows, cols);
    auto ln = logits.node();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto val = std::make_shared<std::vector<uint8_t>>(valid);
    Tensor out = make_op_output({1}, {logits}, [ln, probs, tgt, val, rows = rows, cols = cols](TensorNode& self) {
        if (!ln->requires_grad) {
            return;
        }
        const double g = self.scratch[0];
        for (int r = 0; r < rows; ++r) {
            if (!(*val)[r]) {
                continue;
            }
            const size_t off = static_cast<size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) {
                ln->scratch[off + c] += g * (*probs)[off + c];
            }
            ln->scratch[off + (*tgt)[r]] -= g;
        }
    });
    double nll = 0.0;
    for (int r = 0; r < rows; ++r) {
        if (!valid[r]) {
            continue;
        }
        // log of the softmax probability; probs are strictly positive
        nll -= std::log((*probs)[static_cast<size_t>(r) * cols + targets[r]]);
    }
    out.values()[0] = nll;
    return out;
}

Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& labels) {
    if (logits.numel() != labels.size()) {
        throw ShapeError("bce_with_logits_mean: logits and labels must align");
    }
    for (double z : labels) {
        if (z != 0.0 && z != 1.0) {
            throw ContractError("bce_with_logits_mean: label " + std::to_string(z) +
                                " not in {0,1}");
        }
    }
    const size_t n = labels.size();
    auto ln = logits.node();
    auto lab = std::make_shared<std::vector<double>>(labels);
    const double inv = 1.0 / static_cast<double>(n);
    Tensor out = make_op_output({1}, {logits}, [ln, lab, inv](TensorNode& self) {
        if (!ln->requires_grad) {
            return;
        }
        const double g = self.scratch[0] * inv;
        for (size_t i = 0; i < lab->size(); ++i) {
            const double x = ln->value[i];
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            ln->scratch[i] += g * (s - (*lab)[i]);
        }
    });
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double x = logits.values()[i];
        const double z = labels[i];
        // max(x,0) - x*z + log(1 + exp(-|x|)), the overflow-safe form
        total += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
    }
    out.values()[0] = total * inv;
    return out;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must be in [0,1)");
    }
    if (rate == 0.0) {
        return scale(a, 1.0);
    }
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(a.numel());
    for (double& m : *mask) {
        m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }
    auto an = a.node();
    Tensor out = make_op_output(a.shape(), {a}, [an, mask](TensorNode& self) {
        if (!an->requires_grad) {
            return;
        }
        for (size_t i = 0; i < self.scratch.size(); ++i) {
            an->scratch[i] += self.scratch[i] * (*mask)[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) {
        out.values()[i] = a.values()[i] * (*mask)[i];
    }
    return out;
}

// ----------------------------------------------------------------------------
// backward
// ----------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a defined scalar tensor");
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss does not depend on any requires_grad tensor");
    }

    // Iterative DFS builds the tape: children appear after all their parents,
    // so reverse iteration is a reverse topological order visiting each node once.
    std::vector<TensorNode*> tape;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.raw(), 0);
    visited.insert(loss.raw());
    while (!stack.empty()) {
        auto& [node, next_parent] = stack.back();
        if (next_parent < node->parents.size()) {
            TensorNode* parent = node->parents[next_parent++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            tape.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : tape) {
        n->scratch.assign(n->value.size(), 0.0);
    }
    loss.raw()->scratch[0] = 1.0;

    for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) {
            n->backward_fn(*n);
        }
    }

    // accumulate into persistent grads; accumulation is additive across calls
    for (TensorNode* n : tape) {
        if (n->grad.size() != n->value.size()) {
            n->grad.assign(n->value.size(), 0.0);
        }
        for (size_t i = 0; i < n->scratch.size(); ++i) {
            n->grad[i] += n->scratch[i];
        }
        n->scratch.clear();
        n->scratch.shrink_to_fit();
    }
}

}  // namespace hulm
