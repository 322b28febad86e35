#include "pser/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace pser::ad {

namespace {

NodePtr make_node(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  n->backprop = std::move(fn);
  return n;
}

void ensure_grad(Node& n) {
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

NodePtr constant(Matrix v) { return make_node(std::move(v), {}, nullptr); }
NodePtr leaf(Matrix v) { return constant(std::move(v)); }

void backward(const NodePtr& root) {
  if (root->value.rows() != 1 || root->value.cols() != 1) {
    throw ShapeError("backward: root must be a 1x1 scalar");
  }
  // Iterative post-order DFS; topo holds every node after all of its inputs.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next = 0;
  };
  std::vector<Frame> stack{{root.get()}};
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->inputs.size()) {
      Node* child = f.n->inputs[f.next++].get();
      if (visited.insert(child).second) stack.push_back({child});
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  for (Node* n : topo) {
    ensure_grad(*n);
    n->grad.setZero();
  }
  root->grad(0, 0) = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad;
    n.inputs[1]->grad += n.grad;
  });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "sub");
  return make_node(a->value - b->value, {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad;
    n.inputs[1]->grad -= n.grad;
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "mul");
  return make_node(a->value.cwiseProduct(b->value), {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad.cwiseProduct(n.inputs[1]->value);
    n.inputs[1]->grad += n.grad.cwiseProduct(n.inputs[0]->value);
  });
}

NodePtr div(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a, b, "div");
  return make_node(a->value.cwiseQuotient(b->value), {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    const Matrix& bv = n.inputs[1]->value;
    n.inputs[0]->grad += n.grad.cwiseQuotient(bv);
    n.inputs[1]->grad -=
        n.grad.cwiseProduct(n.inputs[0]->value).cwiseQuotient(bv.cwiseProduct(bv));
  });
}

NodePtr scale(const NodePtr& a, double s) {
  return make_node(a->value * s, {a}, [s](Node& n) {
    ensure_grad(*n.inputs[0]);
    n.inputs[0]->grad += n.grad * s;
  });
}

NodePtr relu(const NodePtr& a) {
  return make_node(a->value.cwiseMax(0.0), {a}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    Matrix mask = (n.inputs[0]->value.array() > 0.0).cast<double>().matrix();
    n.inputs[0]->grad += n.grad.cwiseProduct(mask);
  });
}

NodePtr gelu(const NodePtr& a) {
  Matrix y = a->value.unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); });
  return make_node(std::move(y), {a}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    Matrix d = n.inputs[0]->value.unaryExpr([](double x) {
      double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    });
    n.inputs[0]->grad += n.grad.cwiseProduct(d);
  });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.cols() != b->value.rows()) throw ShapeError("matmul: inner dims differ");
  return make_node(a->value * b->value, {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad * n.inputs[1]->value.transpose();
    n.inputs[1]->grad += n.inputs[0]->value.transpose() * n.grad;
  });
}

NodePtr matmul_nt(const NodePtr& a, const NodePtr& b) {
  if (a->value.cols() != b->value.cols()) throw ShapeError("matmul_nt: inner dims differ");
  return make_node(a->value * b->value.transpose(), {a, b}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad * n.inputs[1]->value;
    n.inputs[1]->grad += n.grad.transpose() * n.inputs[0]->value;
  });
}

NodePtr add_row_broadcast(const NodePtr& x, const NodePtr& row) {
  if (row->value.rows() != 1 || row->value.cols() != x->value.cols()) {
    throw ShapeError("add_row_broadcast: row must be 1 x cols(x)");
  }
  Matrix y = x->value;
  y.rowwise() += row->value.row(0);
  return make_node(std::move(y), {x, row}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad;
    n.inputs[1]->grad.row(0) += n.grad.colwise().sum();
  });
}

NodePtr mul_row_broadcast(const NodePtr& x, const NodePtr& row) {
  if (row->value.rows() != 1 || row->value.cols() != x->value.cols()) {
    throw ShapeError("mul_row_broadcast: row must be 1 x cols(x)");
  }
  Matrix y = x->value;
  y.array().rowwise() *= row->value.row(0).array();
  return make_node(std::move(y), {x, row}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    Matrix gx = n.grad;
    gx.array().rowwise() *= n.inputs[1]->value.row(0).array();
    n.inputs[0]->grad += gx;
    n.inputs[1]->grad.row(0) += n.grad.cwiseProduct(n.inputs[0]->value).colwise().sum();
  });
}

NodePtr sub_bcast(const NodePtr& x, const NodePtr& s) {
  if (s->value.rows() != 1 || s->value.cols() != 1) throw ShapeError("sub_bcast: s must be 1x1");
  Matrix y = x->value;
  y.array() -= s->value(0, 0);
  return make_node(std::move(y), {x, s}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    n.inputs[0]->grad += n.grad;
    n.inputs[1]->grad(0, 0) -= n.grad.sum();
  });
}

NodePtr sum_all(const NodePtr& x) {
  Matrix y(1, 1);
  y(0, 0) = x->value.sum();
  return make_node(std::move(y), {x}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    n.inputs[0]->grad.array() += n.grad(0, 0);
  });
}

NodePtr mean_all(const NodePtr& x) {
  double inv = 1.0 / static_cast<double>(x->value.size());
  Matrix y(1, 1);
  y(0, 0) = x->value.sum() * inv;
  return make_node(std::move(y), {x}, [inv](Node& n) {
    ensure_grad(*n.inputs[0]);
    n.inputs[0]->grad.array() += n.grad(0, 0) * inv;
  });
}

NodePtr mean_rows(const NodePtr& x) {
  double inv = 1.0 / static_cast<double>(x->value.rows());
  Matrix y = x->value.colwise().mean();
  return make_node(std::move(y), {x}, [inv](Node& n) {
    ensure_grad(*n.inputs[0]);
    n.inputs[0]->grad.rowwise() += n.grad.row(0) * inv;
  });
}

NodePtr slice_rows(const NodePtr& x, int r0, int n) {
  if (r0 < 0 || n < 1 || r0 + n > x->value.rows()) throw ShapeError("slice_rows: out of range");
  return make_node(x->value.middleRows(r0, n), {x}, [r0, n](Node& nd) {
    ensure_grad(*nd.inputs[0]);
    nd.inputs[0]->grad.middleRows(r0, n) += nd.grad;
  });
}

NodePtr slice_cols(const NodePtr& x, int c0, int n) {
  if (c0 < 0 || n < 1 || c0 + n > x->value.cols()) throw ShapeError("slice_cols: out of range");
  return make_node(x->value.middleCols(c0, n), {x}, [c0, n](Node& nd) {
    ensure_grad(*nd.inputs[0]);
    nd.inputs[0]->grad.middleCols(c0, n) += nd.grad;
  });
}

NodePtr concat_rows(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  Eigen::Index cols = parts[0]->value.cols(), rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p->value.rows()) = p->value;
    r += p->value.rows();
  }
  return make_node(std::move(y), parts, [](Node& n) {
    Eigen::Index r = 0;
    for (auto& p : n.inputs) {
      ensure_grad(*p);
      p->grad += n.grad.middleRows(r, p->value.rows());
      r += p->value.rows();
    }
  });
}

NodePtr concat_cols(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  Eigen::Index rows = parts[0]->value.rows(), cols = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p->value.cols()) = p->value;
    c += p->value.cols();
  }
  return make_node(std::move(y), parts, [](Node& n) {
    Eigen::Index c = 0;
    for (auto& p : n.inputs) {
      ensure_grad(*p);
      p->grad += n.grad.middleCols(c, p->value.cols());
      c += p->value.cols();
    }
  });
}

NodePtr replace_rows(const NodePtr& x, const std::vector<int>& rows, const NodePtr& v) {
  if (v->value.rows() != 1 || v->value.cols() != x->value.cols()) {
    throw ShapeError("replace_rows: v must be 1 x cols(x)");
  }
  Matrix y = x->value;
  for (int r : rows) {
    if (r < 0 || r >= y.rows()) throw ShapeError("replace_rows: row out of range");
    y.row(r) = v->value.row(0);
  }
  return make_node(std::move(y), {x, v}, [rows](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    Matrix g = n.grad;
    for (int r : rows) {
      n.inputs[1]->grad.row(0) += g.row(r);
      g.row(r).setZero();
    }
    n.inputs[0]->grad += g;
  });
}

NodePtr softmax_rows(const NodePtr& x) {
  Matrix y = x->value;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_node(std::move(y), {x}, [](Node& n) {
    ensure_grad(*n.inputs[0]);
    const Matrix& y = n.value;
    Vector dot = n.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = n.grad;
    g.colwise() -= dot;
    n.inputs[0]->grad += g.cwiseProduct(y);
  });
}

NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps) {
  Eigen::Index C = x->value.cols();
  if (gamma->value.rows() != 1 || gamma->value.cols() != C || beta->value.rows() != 1 ||
      beta->value.cols() != C) {
    throw ShapeError("layer_norm: gamma/beta must be 1 x cols(x)");
  }
  Vector mu = x->value.rowwise().mean();
  Matrix xc = x->value;
  xc.colwise() -= mu;
  Vector var = xc.cwiseProduct(xc).rowwise().mean();
  Vector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xn = xc;
  xn.array().colwise() *= inv_std.array();
  Matrix y = xn;
  y.array().rowwise() *= gamma->value.row(0).array();
  y.rowwise() += beta->value.row(0);
  struct Saved {
    Matrix xn;
    Vector inv_std;
  };
  auto saved = std::make_shared<Saved>(Saved{std::move(xn), std::move(inv_std)});
  return make_node(std::move(y), {x, gamma, beta}, [saved](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    ensure_grad(*n.inputs[2]);
    const Matrix& xn = saved->xn;
    double Cd = static_cast<double>(xn.cols());
    Matrix dxn = n.grad;
    dxn.array().rowwise() *= n.inputs[1]->value.row(0).array();
    Vector sum_dxn = dxn.rowwise().sum();
    Vector sum_dxn_xn = dxn.cwiseProduct(xn).rowwise().sum();
    Matrix tmp = xn;
    tmp.array().colwise() *= (sum_dxn_xn.array() / Cd);
    tmp.array().colwise() += sum_dxn.array() / Cd;
    Matrix dx = dxn - tmp;
    dx.array().colwise() *= saved->inv_std.array();
    n.inputs[0]->grad += dx;
    n.inputs[1]->grad.row(0) += n.grad.cwiseProduct(xn).colwise().sum();
    n.inputs[2]->grad.row(0) += n.grad.colwise().sum();
  });
}

BatchNormOut batch_norm_train(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                              double eps) {
  Eigen::Index C = x->value.cols();
  if (gamma->value.rows() != 1 || gamma->value.cols() != C || beta->value.rows() != 1 ||
      beta->value.cols() != C) {
    throw ShapeError("batch_norm: gamma/beta must be 1 x cols(x)");
  }
  Eigen::Index B = x->value.rows();
  Vector mu = x->value.colwise().mean().transpose();
  Matrix xc = x->value;
  xc.rowwise() -= mu.transpose();
  Vector var = xc.cwiseProduct(xc).colwise().mean().transpose();
  Vector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xn = xc;
  xn.array().rowwise() *= inv_std.transpose().array();
  Matrix y = xn;
  y.array().rowwise() *= gamma->value.row(0).array();
  y.rowwise() += beta->value.row(0);
  struct Saved {
    Matrix xn;
    Vector inv_std;
  };
  auto saved = std::make_shared<Saved>(Saved{xn, inv_std});
  NodePtr node = make_node(std::move(y), {x, gamma, beta}, [saved, B](Node& n) {
    ensure_grad(*n.inputs[0]);
    ensure_grad(*n.inputs[1]);
    ensure_grad(*n.inputs[2]);
    const Matrix& xn = saved->xn;
    double Bd = static_cast<double>(B);
    Matrix dxn = n.grad;
    dxn.array().rowwise() *= n.inputs[1]->value.row(0).array();
    Eigen::RowVectorXd sum_dxn = dxn.colwise().sum();
    Eigen::RowVectorXd sum_dxn_xn = dxn.cwiseProduct(xn).colwise().sum();
    Matrix tmp = xn;
    tmp.array().rowwise() *= (sum_dxn_xn.array() / Bd);
    tmp.array().rowwise() += sum_dxn.array() / Bd;
    Matrix dx = dxn - tmp;
    dx.array().rowwise() *= saved->inv_std.transpose().array();
    n.inputs[0]->grad += dx;
    n.inputs[1]->grad.row(0) += n.grad.cwiseProduct(xn).colwise().sum();
    n.inputs[2]->grad.row(0) += n.grad.colwise().sum();
  });
  return {node, std::move(mu), std::move(var)};
}

NodePtr im2col(const NodePtr& x, int kernel, int stride) {
  if (kernel < 1 || stride < 1) throw ShapeError("im2col: kernel and stride must be positive");
  Eigen::Index T = x->value.rows(), C = x->value.cols();
  if (T < kernel) throw ShapeError("im2col: input shorter than kernel");
  Eigen::Index T_out = (T - kernel) / stride + 1;
  Matrix y(T_out, kernel * C);
  for (Eigen::Index t = 0; t < T_out; ++t) {
    for (int k = 0; k < kernel; ++k) {
      y.block(t, k * C, 1, C) = x->value.row(t * stride + k);
    }
  }
  return make_node(std::move(y), {x}, [kernel, stride, C](Node& n) {
    ensure_grad(*n.inputs[0]);
    for (Eigen::Index t = 0; t < n.value.rows(); ++t) {
      for (int k = 0; k < kernel; ++k) {
        n.inputs[0]->grad.row(t * stride + k) += n.grad.block(t, k * C, 1, C);
      }
    }
  });
}

NodePtr cross_entropy_rows(const NodePtr& logits, const std::vector<int>& labels,
                           const std::vector<int>& rows) {
  Eigen::Index T = logits->value.rows(), K = logits->value.cols();
  if (static_cast<Eigen::Index>(labels.size()) != T) {
    throw ShapeError("cross_entropy_rows: one label per row required");
  }
  if (rows.empty()) throw ValidationError("cross_entropy_rows: no rows selected");
  auto probs = std::make_shared<Matrix>(static_cast<Eigen::Index>(rows.size()), K);
  double loss = 0.0;
  for (size_t i = 0; i < rows.size(); ++i) {
    int r = rows[i];
    if (r < 0 || r >= T) throw ShapeError("cross_entropy_rows: row out of range");
    int lab = labels[static_cast<size_t>(r)];
    if (lab < 0 || lab >= K) throw ValidationError("cross_entropy_rows: label out of range");
    Eigen::RowVectorXd z = logits->value.row(r);
    double m = z.maxCoeff();
    Eigen::RowVectorXd e = (z.array() - m).exp().matrix();
    probs->row(static_cast<Eigen::Index>(i)) = e / e.sum();
    loss -= std::log((*probs)(static_cast<Eigen::Index>(i), lab));
  }
  Matrix y(1, 1);
  y(0, 0) = loss;
  return make_node(std::move(y), {logits},
                   [probs, rows, labels](Node& n) {
                     ensure_grad(*n.inputs[0]);
                     double g = n.grad(0, 0);
                     for (size_t i = 0; i < rows.size(); ++i) {
                       int r = rows[i];
                       n.inputs[0]->grad.row(r) += g * probs->row(static_cast<Eigen::Index>(i));
                       n.inputs[0]->grad(r, labels[static_cast<size_t>(r)]) -= g;
                     }
                   });
}

}  // namespace pser::ad
