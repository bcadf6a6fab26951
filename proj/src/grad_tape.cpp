#include "mats/grad_tape.hpp"

#include <cmath>
#include <memory>
#include <utility>

#include "mats/error.hpp"
#include "mats/nn_kernels.hpp"

namespace mats {

GradTape::Ref GradTape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size() - 1);
}

Matrix& GradTape::gbuf(Ref r) {
  Node& n = node(r);
  if (n.grad.size() == 0) {
    const Matrix& v = val(r);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

const Matrix& GradTape::value(Ref r) const { return val(r); }

double GradTape::scalar(Ref r) const {
  const Matrix& v = val(r);
  if (v.size() != 1) throw UsageError("GradTape::scalar: node is not 1x1");
  return v(0, 0);
}

GradTape::Ref GradTape::constant(Matrix v) {
  Node n;
  n.value = std::move(v);
  return push(std::move(n));
}

GradTape::Ref GradTape::constant_view(const Matrix* v) {
  Node n;
  n.view = v;
  return push(std::move(n));
}

GradTape::Ref GradTape::param(ParamStore& store, const std::string& name) {
  Param& p = store.at(name);
  Node n;
  n.view = &p.value;
  n.requires_grad = p.trainable;
  if (p.trainable) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, pp = &p](GradTape& t) { pp->grad += t.node(self).grad; };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::matmul(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.cols() != B.rows()) throw UsageError("GradTape::matmul: shape mismatch");
  Node n;
  n.value = A * B;
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, b](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * G);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::add(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw UsageError("GradTape::add: shape mismatch");
  Node n;
  n.value = A + B;
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, b](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G);
      t.accum(b, G);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::sub(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw UsageError("GradTape::sub: shape mismatch");
  Node n;
  n.value = A - B;
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, b](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G);
      t.accum(b, -G);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::add_rowvec(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (B.rows() != 1 || B.cols() != A.cols())
    throw UsageError("GradTape::add_rowvec: b must be 1 x cols(a)");
  Node n;
  n.value = A.rowwise() + B.row(0);
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, b](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G);
      t.accum(b, G.colwise().sum());
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::hadamard(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw UsageError("GradTape::hadamard: shape mismatch");
  Node n;
  n.value = A.cwiseProduct(B);
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, b](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G.cwiseProduct(t.val(b)));
      t.accum(b, G.cwiseProduct(t.val(a)));
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::scale(Ref a, double c) {
  Node n;
  n.value = val(a) * c;
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, c](GradTape& t) {
      t.accum(a, t.node(self).grad * c);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::transpose(Ref a) {
  Node n;
  n.value = val(a).transpose();
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a](GradTape& t) {
      t.accum(a, t.node(self).grad.transpose());
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::concat_rows(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.cols() != B.cols())
    throw UsageError("GradTape::concat_rows: column mismatch");
  Node n;
  n.value.resize(A.rows() + B.rows(), A.cols());
  n.value.topRows(A.rows()) = A;
  n.value.bottomRows(B.rows()) = B;
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    const Index ra = A.rows(), rb = B.rows();
    n.back = [self, a, b, ra, rb](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G.topRows(ra));
      t.accum(b, G.bottomRows(rb));
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::concat_cols(Ref a, Ref b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.rows() != B.rows())
    throw UsageError("GradTape::concat_cols: row mismatch");
  Node n;
  n.value.resize(A.rows(), A.cols() + B.cols());
  n.value.leftCols(A.cols()) = A;
  n.value.rightCols(B.cols()) = B;
  n.requires_grad = needs(a) || needs(b);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    const Index ca = A.cols(), cb = B.cols();
    n.back = [self, a, b, ca, cb](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(a, G.leftCols(ca));
      t.accum(b, G.rightCols(cb));
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::slice_rows(Ref a, Index r0, Index nrows) {
  const Matrix& A = val(a);
  if (r0 < 0 || nrows < 0 || r0 + nrows > A.rows())
    throw UsageError("GradTape::slice_rows: range out of bounds");
  Node n;
  n.value = A.middleRows(r0, nrows);
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, r0, nrows](GradTape& t) {
      if (!t.needs(a)) return;
      t.gbuf(a).middleRows(r0, nrows) += t.node(self).grad;
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::slice_cols(Ref a, Index c0, Index ncols) {
  const Matrix& A = val(a);
  if (c0 < 0 || ncols < 0 || c0 + ncols > A.cols())
    throw UsageError("GradTape::slice_cols: range out of bounds");
  Node n;
  n.value = A.middleCols(c0, ncols);
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, c0, ncols](GradTape& t) {
      if (!t.needs(a)) return;
      t.gbuf(a).middleCols(c0, ncols) += t.node(self).grad;
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::gather_rows(Ref table, std::vector<Index> ids) {
  const Matrix& T = val(table);
  for (Index id : ids)
    if (id < 0 || id >= T.rows())
      throw UsageError("GradTape::gather_rows: id out of range");
  Node n;
  n.value.resize(static_cast<Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    n.value.row(static_cast<Index>(i)) = T.row(ids[i]);
  n.requires_grad = needs(table);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, table, ids = std::move(ids)](GradTape& t) {
      if (!t.needs(table)) return;
      const Matrix& G = t.node(self).grad;
      Matrix& g = t.gbuf(table);
      for (std::size_t i = 0; i < ids.size(); ++i)
        g.row(ids[i]) += G.row(static_cast<Index>(i));
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::softmax_rows(Ref a) {
  Node n;
  n.value = val(a);
  softmax_rows_inplace(n.value);
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a](GradTape& t) {
      const Matrix& Y = t.node(self).value;
      const Matrix& G = t.node(self).grad;
      Vector s = G.cwiseProduct(Y).rowwise().sum();
      t.accum(a, ((G.array().colwise() - s.array()) * Y.array()).matrix());
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::gelu_op(Ref a) {
  Node n;
  n.value = gelu(val(a));
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a](GradTape& t) {
      const Matrix& X = t.val(a);
      const Matrix& G = t.node(self).grad;
      t.accum(a, G.cwiseProduct(X.unaryExpr(
                     [](double v) { return gelu_grad_scalar(v); })));
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::layer_norm_rows(Ref a, Ref gain, Ref bias, double eps) {
  const Matrix& X = val(a);
  const Matrix& Gn = val(gain);
  const Matrix& Bs = val(bias);
  if (Gn.rows() != 1 || Bs.rows() != 1 || Gn.cols() != X.cols() ||
      Bs.cols() != X.cols())
    throw UsageError("GradTape::layer_norm_rows: gain/bias must be 1 x cols");
  auto xhat = std::make_shared<Matrix>();
  auto inv = std::make_shared<Vector>();
  Node n;
  n.value = mats::layer_norm_rows(X, Gn, Bs, eps, xhat.get(), inv.get());
  n.requires_grad = needs(a) || needs(gain) || needs(bias);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, gain, bias, xhat, inv](GradTape& t) {
      const Matrix& G = t.node(self).grad;
      t.accum(bias, G.colwise().sum());
      t.accum(gain, G.cwiseProduct(*xhat).colwise().sum());
      if (!t.needs(a)) return;
      const Matrix& Gn2 = t.val(gain);
      const double ncols = static_cast<double>(G.cols());
      Matrix dxhat(G.rows(), G.cols());
      for (Index r = 0; r < G.rows(); ++r)
        dxhat.row(r) = G.row(r).cwiseProduct(Gn2.row(0));
      Matrix dx(G.rows(), G.cols());
      for (Index r = 0; r < G.rows(); ++r) {
        const double m1 = dxhat.row(r).mean();
        const double m2 =
            dxhat.row(r).cwiseProduct(xhat->row(r)).sum() / ncols;
        dx.row(r) =
            ((*inv)[r] *
             (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2))
                .matrix();
      }
      t.accum(a, dx);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::l2_normalize_rows(Ref a) {
  const Matrix& X = val(a);
  Node n;
  n.value.resize(X.rows(), X.cols());
  Vector norms(X.rows());
  for (Index r = 0; r < X.rows(); ++r) {
    const double nr = X.row(r).norm();
    if (nr == 0.0)
      throw NumericError("GradTape::l2_normalize_rows: zero row");
    norms[r] = nr;
    n.value.row(r) = X.row(r) / nr;
  }
  n.requires_grad = needs(a);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, a, norms = std::move(norms)](GradTape& t) {
      const Matrix& Y = t.node(self).value;
      const Matrix& G = t.node(self).grad;
      Matrix dx(G.rows(), G.cols());
      for (Index r = 0; r < G.rows(); ++r) {
        const double gy = G.row(r).dot(Y.row(r));
        dx.row(r) = (G.row(r) - gy * Y.row(r)) / norms[r];
      }
      t.accum(a, dx);
    };
  }
  return push(std::move(n));
}

GradTape::Ref GradTape::cross_entropy_rows(Ref logits, std::vector<Index> rows,
                                           std::vector<TokenId> targets) {
  if (rows.empty())
    throw UsageError("GradTape::cross_entropy_rows: no loss rows");
  if (rows.size() != targets.size())
    throw UsageError("GradTape::cross_entropy_rows: rows/targets mismatch");
  const Matrix& L = val(logits);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= L.rows())
      throw UsageError("GradTape::cross_entropy_rows: row out of range");
    if (targets[i] < 0 || targets[i] >= L.cols())
      throw UsageError("GradTape::cross_entropy_rows: target out of range");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double lse = logsumexp_row(L.row(rows[i]));
    loss += lse - L(rows[i], targets[i]);
  }
  loss /= static_cast<double>(rows.size());
  Node n;
  n.value = Matrix::Constant(1, 1, loss);
  n.requires_grad = needs(logits);
  if (n.requires_grad) {
    Ref self = static_cast<Ref>(nodes_.size());
    n.back = [self, logits, rows = std::move(rows),
              targets = std::move(targets)](GradTape& t) {
      if (!t.needs(logits)) return;
      const double g = t.node(self).grad(0, 0) /
                       static_cast<double>(rows.size());
      const Matrix& L2 = t.val(logits);
      Matrix& gl = t.gbuf(logits);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const Index r = rows[i];
        Eigen::RowVectorXd p = L2.row(r);
        const double m = p.maxCoeff();
        p = (p.array() - m).exp();
        p /= p.sum();
        gl.row(r) += g * p;
        gl(r, targets[i]) -= g;
      }
    };
  }
  return push(std::move(n));
}

void GradTape::backward(Ref loss) {
  Node& ln = node(loss);
  const Matrix& lv = val(loss);
  if (lv.size() != 1)
    throw UsageError("GradTape::backward: loss must be a 1x1 node");
  if (!ln.requires_grad) return;  // nothing trainable feeds the loss
  gbuf(loss)(0, 0) = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.grad.size() != 0 && n.back) n.back(*this);
  }
}

}  // namespace mats
