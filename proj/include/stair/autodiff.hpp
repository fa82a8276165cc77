#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "stair/tensor.hpp"

namespace stair::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// the owning tape is alive.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// recording order is already a topological order for backward().
class Tape {
public:
    using Backward = std::function<void(Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Gradient of the last backward() target with respect to `v`; zeros
    /// when nothing flowed into it.
    Tensor grad(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule.
    void backward(Var loss);

    // Interface for op implementations.
    Var record(Tensor value, bool requires_grad, Backward fn);
    const Tensor& node_grad(std::uint32_t id) const { return nodes_[id].grad; }
    Tensor& accumulator(std::uint32_t id);

    // Kink bookkeeping: ops with a max/ReLU branch fold the branch they took
    // into a running signature so finite-difference checks can detect when a
    // perturbation crossed a kink.
    void track_branches(bool on) { track_branches_ = on; }
    bool tracking_branches() const { return track_branches_; }
    void note_branch(std::uint64_t value);
    std::uint64_t branch_signature() const { return branch_hash_; }

    std::size_t node_count() const { return nodes_.size(); }

    /// Drops every node recorded after the first `count`. Used to reuse
    /// bound constants across many inference forwards.
    void rewind(std::size_t count);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };

    std::vector<Node> nodes_;
    bool track_branches_ = false;
    std::uint64_t branch_hash_ = 1469598103934665603ull;
};

// Dense kernels shared with non-tape code paths. All accumulate into `c`.
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c); // c += a * b
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c); // c += a * b^T
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c); // c += a^T * b

double gelu_value(double x);

/// -log softmax(logits)[target], stabilized by subtracting the max.
double softmax_xent(std::span<const double> logits, std::size_t target);

// ---- differentiable ops ---------------------------------------------------

Var matmul(Var a, Var b);             // [m x k] * [k x n]
Var matmul_nt(Var a, Var b);          // [m x k] * [n x k]^T
Var transpose(Var a);
Var add(Var a, Var b);                // same shape
Var add_row(Var a, Var bias);         // [n x d] + [d] broadcast over rows
Var scale(Var a, double factor);
Var mul_const(Var a, const Tensor& factor); // elementwise by a constant
Var relu(Var a);
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps);

/// Row softmax. Columns with key_valid[c] == false receive probability 0.
Var softmax_rows(Var a, const std::vector<bool>& key_valid = {});

Var gather_rows(Var table, std::span<const std::uint32_t> ids);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var stack_rows(std::span<const Var> parts);

/// Per column k: log(1 + max(0, max over valid rows j of a[j, k])). [1 x V].
Var pool_log_relu_max(Var logits, const std::vector<bool>& valid);

/// Mean over valid rows. [1 x d].
Var mean_rows(Var a, const std::vector<bool>& valid);

/// Rows scaled to unit L2 norm; all-zero rows stay zero.
Var l2_normalize_rows(Var a);

/// a / max(exp(log_temperature), floor). log_temperature is a 1-element var.
Var divide_by_temperature(Var a, Var log_temperature, double floor);

/// Mean over rows of -log softmax(row)[targets[row]]. Scalar.
Var softmax_xent_rows(Var logits, std::span<const std::size_t> targets);

/// Sum over columns of the squared column mean. Scalar.
Var column_mean_square_sum(Var a);

Var sum(Var a);
Var sum_squares(Var a);

/// Scalar linear combination sum_i w_i * v_i.
Var linear_combination(std::span<const std::pair<double, Var>> terms);

} // namespace stair::ad
