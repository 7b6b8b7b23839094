#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace hydronet {

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff over dense Eigen matrices, specialized to the batched
/// sequence layout used throughout the model: a matrix of shape
/// (blocks * rows_per_block) x channels, where a block is one time step of one
/// batch element and rows within a block are graph elements.
///
/// Nodes are recorded in evaluation order; backward() walks them in reverse
/// and accumulates gradients into every node that requires them. Ops skip
/// recording a backward closure when no input requires gradients, so the same
/// code path serves training and (cheaper) inference.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Eigen::MatrixXd value, bool requires_grad = false);

    const Eigen::MatrixXd& value(Var v) const;
    /// Gradient of the last backward() target with respect to v; zero matrix
    /// if v was never touched.
    Eigen::MatrixXd gradient(Var v) const;
    bool requires_grad(Var v) const;
    void backward(Var loss);
    int size() const { return static_cast<int>(nodes_.size()); }

    // Elementwise and affine ops.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var cmul(Var a, Var b);
    Var scale(Var a, double c);
    Var relu(Var a);
    Var leaky_relu(Var a, double slope);
    Var sigmoid(Var a);
    Var matmul(Var a, Var b);
    /// x * w + bias broadcast over rows; bias is 1 x out.
    Var linear(Var x, Var w, Var bias);

    // Column structure.
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, int first, int count);

    // Per-block left products: y_block = L * x_block for every block of
    // rows_per_block rows. L is fixed for the const variant (e.g. an
    // incidence-derived 0/1 matrix) and a tape variable for the var one
    // (e.g. masked exchange weights).
    Var block_lmul_const(const Eigen::MatrixXd& l, Var x, int rows_per_block);
    Var block_lmul_var(Var l, Var x, int rows_per_block);

    /// Single-head neighborhood attention applied independently to every
    /// block: logits lrelu_{0.2}(z_i a_src + z_j a_dst) over j in nbrs[i],
    /// softmax within the neighborhood, output is the convex combination of
    /// neighbor rows of z. a_src and a_dst are d x 1.
    Var attention(Var z, Var a_src, Var a_dst,
                  const std::vector<std::vector<int>>& nbrs);

    /// Dilated causal convolution along the step axis: block (b, t) of the
    /// output is sum_k x(b, t - k*dilation) * taps[k] + bias, with x rows
    /// before t = 0 treated as zero. Layout: batch * steps blocks of
    /// rows_per_block rows.
    Var causal_conv(Var x, const std::vector<Var>& taps, Var bias,
                    int dilation, int batch, int steps, int rows_per_block);

    /// Rows of the last step of every batch element: (batch*steps*R) x c ->
    /// (batch*R) x c.
    Var take_last_step(Var x, int batch, int steps, int rows_per_block);

    /// Adds a per-batch-element context to every step: x (batch*steps*R) x c
    /// plus ctx (batch*R) x c tiled over steps.
    Var broadcast_step_add(Var x, Var ctx, int batch, int steps, int rows_per_block);

    /// Splits grouped columns into rows: (g) x (f*c) -> (g*f) x c, where
    /// input row r holds groups of c columns per produced row (element-major
    /// flattening). Inverse of flattening per-element channels into one row.
    Var split_rows(Var x, int factor, int out_cols);

    // Scalar losses (1 x 1 results).
    /// weight * sum((pred - target)^2)
    Var mse(Var pred, const Eigen::MatrixXd& target, double weight);
    /// weight * sum(softplus-form binary cross-entropy of logits z vs labels)
    Var bce_logits(Var z, const Eigen::MatrixXd& labels, double weight);

private:
    struct Node {
        Eigen::MatrixXd value;
        Eigen::MatrixXd grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    Var emplace(Eigen::MatrixXd value, bool requires_grad);
    const Node& node(Var v) const;
    void accumulate(int id, const Eigen::MatrixXd& g);
    void check(Var v) const;

    std::vector<Node> nodes_;
};

}  // namespace hydronet
