#pragma once

#include "musteer/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace musteer::ag {

// Reverse-mode automatic differentiation over dense double matrices.
// Graphs are built dynamically; children hold shared ownership of parents,
// so releasing the root frees all intermediates while leaves survive.
// Everything is single-threaded and deterministic.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat val;
    Mat grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    Eigen::Index rows() const { return val.rows(); }
    Eigen::Index cols() const { return val.cols(); }
    void ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    }
};

/// Leaf with no gradient.
Var constant(Mat value);

/// Leaf that accumulates gradient (a trainable parameter or probed input).
Var leaf(Mat value);

/// Runs backpropagation from a 1x1 root with seed gradient 1.
void backward(const Var& root);

void zero_grad(const std::vector<Var>& vars);

// ---- arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_const(const Var& a, const Mat& m);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add_rowvec(const Var& a, const Var& bias);  // bias is 1 x C, broadcast over rows

// ---- shape ----
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var pad_rows_edge(const Var& a, Eigen::Index total_rows);  // replicate last row
Var repeat_interleave_rows(const Var& a, int times);
Var detach(const Var& a);

// ---- nonlinearities ----
Var tanh_op(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
/// Exact Gaussian-CDF GELU: x * Phi(x).
Var gelu(const Var& a);
Var softmax_rows(const Var& a);

// ---- normalization ----
/// Rows scaled to unit Euclidean norm. Throws NumericalError when a row norm
/// falls below min_norm.
Var normalize_rows(const Var& a, double min_norm = 1e-8);
/// Layer normalization over the feature axis with learnable gain/bias (1 x C).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_sq(const Var& a);                       // sum of squared entries -> 1x1
Var l1_diff_sum(const Var& a, const Mat& target);  // sum |a - target| -> 1x1

// ---- structured ops ----
/// Row gather: out.row(i) = table.row(ids[i]); backward scatter-adds.
Var embedding_lookup(const Var& table, const std::vector<int>& ids);

/// Mean softmax cross-entropy over the rows where supervised[i] != 0.
/// logits: [N x C], targets: class index per row. Fused stable backward.
Var masked_nll(const Var& logits, const std::vector<int>& targets,
               const std::vector<unsigned char>& supervised);

/// Multi-head scaled dot-product self-attention over a packed batch.
/// q,k,v: [B*T x d_model] with d_model = heads * head_dim. attn_mask, when
/// given, is [T x T] additive per sample b (entries 0 or large negative).
/// One mask per sample: masks[b] may be null for "no masking".
Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq_len,
              int heads, const std::vector<const Mat*>& masks);

/// im2col for 1-D convolution over rows (rows = time, cols = channels).
/// Output row t = concat of input rows [t*stride - pad, ...] over the kernel
/// window, zero-padded outside. Output: [n_out x kernel*channels].
Var im2col_1d(const Var& x, int kernel, int stride, int pad);

/// Number of output rows im2col_1d produces.
Eigen::Index conv1d_out_rows(Eigen::Index in_rows, int kernel, int stride, int pad);

}  // namespace musteer::ag
