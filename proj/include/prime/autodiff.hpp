#pragma once

// Reverse-mode differentiation over dense f64 matrices.
//
// A Tape records every op of one forward pass. Values are 2-D (rank-1 values
// are single rows). Parameters enter the tape as leaves once per tape and
// receive accumulated gradients on backward(). Constants (including sampled
// augmentation draws) never receive gradient.

#include "prime/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace prime::ad {

struct Parameter {
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape(), 0.0) {}

    void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// The same Parameter always maps to the same leaf on one tape.
    Var param(Parameter& p);

    /// Records an op output. Throws NonFiniteError if `value` holds NaN/Inf.
    Var push(const char* op, Tensor value, std::vector<int> inputs, BackwardFn backward);

    void backward(Var loss);

    bool grad_enabled() const noexcept { return grad_enabled_; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    /// Gradient buffer of a node; allocated as zeros on first access.
    Tensor& grad(int id);
    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }
    int input(int id, std::size_t k) const { return nodes_[static_cast<std::size_t>(id)].inputs[k]; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> inputs;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool needs_grad = false;
    };

    std::deque<Node> nodes_; // stable addresses: value() references survive later pushes
    std::unordered_map<const Parameter*, int> param_ids_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

// ---- linear algebra ----
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
/// Scales each row of a (m x n) by the matching entry of col (m x 1).
Var mul_col(Var a, Var col);
Var gelu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);

// ---- row-wise ----
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps);
/// Throws ZeroVector on a zero-norm row.
Var l2_normalize_rows(Var a);

// ---- reductions ----
/// Mean over rows: m x n -> 1 x n.
Var mean_rows(Var a);
Var sum_all(Var a);
Var mean_all(Var a);
/// Averages column blocks: k x (blocks*n) -> k x n.
Var block_mean_cols(Var a, std::size_t blocks);

// ---- structure ----
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var a, std::span<const std::size_t> index);
/// out (n_rows x cols) with out[index[i]] += a[i].
Var scatter_rows(Var a, std::span<const std::size_t> index, std::size_t n_rows);

// ---- losses / gating ----
/// Mean over rows of -log softmax(logits)[row, target[row]].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);
/// Mean binary cross-entropy of an n x 1 logit column against 0/1 labels.
Var bce_with_logits(Var logits, std::span<const double> labels);
/// out[i,e] = p[i,e] * keep[i,e] / sum_e' p[i,e'] * keep[i,e']; keep is a 0/1 mask.
Var renormalize_selected(Var probs, const Tensor& keep);

/// Multi-head scaled dot-product attention of queries q (Tq x D) over keys k and
/// values v (L x D). Masked keys (key_mask[l] == false) get an additive -1e9 on
/// their logits. An empty mask means every key is valid. Throws AllKeysMasked
/// when no key is valid and ShapeMismatch when D is not divisible by n_heads.
Var cross_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const bool> key_mask = {});

} // namespace prime::ad
