#pragma once

#include "pser/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace pser::ad {

// Reverse-mode autodiff over dense Eigen matrices. A forward pass builds a DAG
// of Node values; backward(root) accumulates gradients into every node of the
// graph. Model parameters are long-lived leaf nodes shared across graphs.
struct Node {
  Matrix value;
  Matrix grad;  // sized lazily by backward()
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into inputs
};

using NodePtr = std::shared_ptr<Node>;

NodePtr constant(Matrix v);
NodePtr leaf(Matrix v);  // alias of constant; names a trainable parameter

// root must be 1x1. Zeroes gradients across the reachable graph, seeds the
// root with 1 and runs the tape in reverse topological order.
void backward(const NodePtr& root);

// Elementwise / scalar ops.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr div(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double s);
NodePtr relu(const NodePtr& a);
NodePtr gelu(const NodePtr& a);

// Matrix products.
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr matmul_nt(const NodePtr& a, const NodePtr& b);  // a * b^T

// Broadcasts of a 1xC row over all rows of x.
NodePtr add_row_broadcast(const NodePtr& x, const NodePtr& row);
NodePtr mul_row_broadcast(const NodePtr& x, const NodePtr& row);

// Broadcasts of a 1x1 scalar node.
NodePtr sub_bcast(const NodePtr& x, const NodePtr& s);

// Reductions.
NodePtr sum_all(const NodePtr& x);
NodePtr mean_all(const NodePtr& x);
NodePtr mean_rows(const NodePtr& x);  // 1xC column means (mean-pooling over frames)

// Structure ops.
NodePtr slice_rows(const NodePtr& x, int r0, int n);
NodePtr slice_cols(const NodePtr& x, int c0, int n);
NodePtr concat_rows(const std::vector<NodePtr>& parts);
NodePtr concat_cols(const std::vector<NodePtr>& parts);

// Rows listed in `rows` are replaced by the broadcast 1xC vector `v`.
NodePtr replace_rows(const NodePtr& x, const std::vector<int>& rows, const NodePtr& v);

// Row-wise softmax (stabilized).
NodePtr softmax_rows(const NodePtr& x);

// Row-wise layer norm with learnable 1xC gamma/beta.
NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                   double eps = 1e-5);

// Column-wise batch norm using batch statistics (training mode). Batch mean
// and population variance per feature are exposed for running-stat estimation.
struct BatchNormOut {
  NodePtr y;
  Vector batch_mean;
  Vector batch_var;
};
BatchNormOut batch_norm_train(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                              double eps = 1e-5);

// Unfolds a TxC input into sliding windows of `kernel` frames every `stride`
// frames; row t of the result is the window starting at t*stride, flattened
// frame-major. Convolution becomes a matmul against a (kernel*C)xC_out weight.
NodePtr im2col(const NodePtr& x, int kernel, int stride);

// Sum over `rows` of -log softmax(logits_r)[labels[r]] (cross-entropy on the
// selected rows only). Gradient is confined to those rows.
NodePtr cross_entropy_rows(const NodePtr& logits, const std::vector<int>& labels,
                           const std::vector<int>& rows);

}  // namespace pser::ad
