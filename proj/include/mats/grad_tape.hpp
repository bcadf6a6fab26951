#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mats/param_store.hpp"
#include "mats/types.hpp"

namespace mats {

// Reverse-mode tape over dense matrices. A forward pass records nodes; ops
// only reference earlier nodes, so reverse creation order is a valid
// topological order for backward(). Gradients flow only through nodes
// reachable from trainable parameters; constants and frozen params never
// allocate gradient buffers, which is what makes "frozen" an enforced
// property rather than a convention.
//
// Lifetime: param() and constant_view() hold pointers into caller-owned
// storage; that storage must outlive the tape and stay unmodified until
// backward() has run.
class GradTape {
 public:
  using Ref = std::int32_t;

  explicit GradTape(std::size_t reserve = 512) { nodes_.reserve(reserve); }

  // Leaves.
  Ref constant(Matrix v);
  Ref constant_view(const Matrix* v);
  Ref param(ParamStore& store, const std::string& name);

  // Ops. Shapes follow Eigen matmul rules; rows are tokens/samples.
  Ref matmul(Ref a, Ref b);
  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref add_rowvec(Ref a, Ref b);  // b is 1 x C, added to every row of a
  Ref hadamard(Ref a, Ref b);
  Ref scale(Ref a, double c);
  Ref transpose(Ref a);
  Ref concat_rows(Ref a, Ref b);
  Ref concat_cols(Ref a, Ref b);
  Ref slice_rows(Ref a, Index r0, Index nrows);
  Ref slice_cols(Ref a, Index c0, Index ncols);
  Ref gather_rows(Ref table, std::vector<Index> ids);
  Ref softmax_rows(Ref a);
  Ref gelu_op(Ref a);
  Ref layer_norm_rows(Ref a, Ref gain, Ref bias, double eps = 1e-5);
  Ref l2_normalize_rows(Ref a);
  // Mean over the listed rows of (logsumexp(row) - row[target]). Scalar node.
  Ref cross_entropy_rows(Ref logits, std::vector<Index> rows,
                         std::vector<TokenId> targets);

  const Matrix& value(Ref r) const;
  double scalar(Ref r) const;

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once. loss must be 1 x 1.
  // Parameter gradients accumulate into their ParamStore entries.
  void backward(Ref loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;             // empty when viewing external storage
    const Matrix* view = nullptr;
    Matrix grad;              // lazily sized; empty means zero
    bool requires_grad = false;
    std::function<void(GradTape&)> back;
  };

  const Matrix& val(Ref r) const {
    const Node& n = nodes_[static_cast<std::size_t>(r)];
    return n.view ? *n.view : n.value;
  }
  Node& node(Ref r) { return nodes_[static_cast<std::size_t>(r)]; }
  bool needs(Ref r) const {
    return nodes_[static_cast<std::size_t>(r)].requires_grad;
  }
  // Gradient buffer of r, allocated zero on first touch.
  Matrix& gbuf(Ref r);
  template <class D>
  void accum(Ref r, const Eigen::MatrixBase<D>& g) {
    if (!needs(r)) return;
    gbuf(r) += g;
  }
  Ref push(Node n);

  std::vector<Node> nodes_;
};

}  // namespace mats
