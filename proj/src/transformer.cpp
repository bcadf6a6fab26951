#include "mats/transformer.hpp"

#include <cmath>

#include "mats/error.hpp"

namespace mats {

Matrix uniform_matrix(RngStream& rng, Index rows, Index cols, double limit) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      m(i, j) = limit * (2.0 * rng.next_uniform() - 1.0);
  return m;
}

void init_linear(ParamStore& ps, const std::string& name, Index d_in,
                 Index d_out, RngStream& rng, double limit) {
  ps.add(name + ".W", uniform_matrix(rng, d_in, d_out, limit));
  ps.add(name + ".b", Matrix::Zero(1, d_out));
}

void init_block(ParamStore& ps, const std::string& prefix, Index d_model,
                RngStream& rng, double limit) {
  for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
    ps.add(prefix + w, uniform_matrix(rng, d_model, d_model, limit));
  // No key bias: a per-key constant is row-uniform in the scores and cancels
  // in the softmax, leaving a parameter with an identically zero gradient.
  for (const char* b : {".attn.bq", ".attn.bv", ".attn.bo"})
    ps.add(prefix + b, Matrix::Zero(1, d_model));
  for (const char* ln : {".ln1", ".ln2"}) {
    ps.add(prefix + ln + ".g", Matrix::Ones(1, d_model));
    ps.add(prefix + ln + ".b", Matrix::Zero(1, d_model));
  }
  ps.add(prefix + ".ffn.w1", uniform_matrix(rng, d_model, 4 * d_model, limit));
  ps.add(prefix + ".ffn.b1", Matrix::Zero(1, 4 * d_model));
  ps.add(prefix + ".ffn.w2", uniform_matrix(rng, 4 * d_model, d_model, limit));
  ps.add(prefix + ".ffn.b2", Matrix::Zero(1, d_model));
}

GradTape::Ref tape_linear(GradTape& t, ParamStore& ps, const std::string& name,
                          GradTape::Ref x) {
  return t.add_rowvec(t.matmul(x, t.param(ps, name + ".W")),
                      t.param(ps, name + ".b"));
}

namespace {

GradTape::Ref projection(GradTape& t, ParamStore& ps,
                         const std::string& prefix, const char* proj,
                         GradTape::Ref x, const ProjDelta& delta) {
  GradTape::Ref out = t.matmul(x, t.param(ps, prefix + ".w" + proj));
  if (proj != std::string("k"))
    out = t.add_rowvec(out, t.param(ps, prefix + ".b" + proj));
  if (delta) {
    GradTape::Ref d = delta(t, x, proj);
    if (d >= 0) out = t.add(out, d);
  }
  return out;
}

}  // namespace

GradTape::Ref tape_attention(GradTape& t, ParamStore& ps,
                             const std::string& prefix, GradTape::Ref x,
                             Index n_heads, bool causal,
                             const ProjDelta& delta) {
  const Index d_model = t.value(x).cols();
  const Index s = t.value(x).rows();
  if (n_heads < 1 || d_model % n_heads != 0)
    throw UsageError("tape_attention: heads must divide d_model");
  const Index d_head = d_model / n_heads;

  GradTape::Ref q = projection(t, ps, prefix, "q", x, delta);
  GradTape::Ref k = projection(t, ps, prefix, "k", x, delta);
  GradTape::Ref v = projection(t, ps, prefix, "v", x, delta);

  GradTape::Ref mask = -1;
  if (causal) {
    Matrix m = Matrix::Zero(s, s);
    for (Index i = 0; i < s; ++i)
      for (Index j = i + 1; j < s; ++j) m(i, j) = -1e9;
    mask = t.constant(std::move(m));
  }

  GradTape::Ref ctx = -1;
  for (Index h = 0; h < n_heads; ++h) {
    GradTape::Ref qh = t.slice_cols(q, h * d_head, d_head);
    GradTape::Ref kh = t.slice_cols(k, h * d_head, d_head);
    GradTape::Ref vh = t.slice_cols(v, h * d_head, d_head);
    GradTape::Ref scores = t.scale(t.matmul(qh, t.transpose(kh)),
                                   1.0 / std::sqrt(static_cast<double>(d_head)));
    if (causal) scores = t.add(scores, mask);
    GradTape::Ref head = t.matmul(t.softmax_rows(scores), vh);
    ctx = (h == 0) ? head : t.concat_cols(ctx, head);
  }
  return projection(t, ps, prefix, "o", ctx, delta);
}

GradTape::Ref tape_ffn(GradTape& t, ParamStore& ps, const std::string& prefix,
                       GradTape::Ref x) {
  GradTape::Ref h =
      t.add_rowvec(t.matmul(x, t.param(ps, prefix + ".ffn.w1")),
                   t.param(ps, prefix + ".ffn.b1"));
  return t.add_rowvec(t.matmul(t.gelu_op(h), t.param(ps, prefix + ".ffn.w2")),
                      t.param(ps, prefix + ".ffn.b2"));
}

GradTape::Ref tape_block(GradTape& t, ParamStore& ps, const std::string& prefix,
                         GradTape::Ref x, Index n_heads, bool causal,
                         const ProjDelta& delta) {
  GradTape::Ref a_in = t.layer_norm_rows(x, t.param(ps, prefix + ".ln1.g"),
                                         t.param(ps, prefix + ".ln1.b"));
  x = t.add(x, tape_attention(t, ps, prefix + ".attn", a_in, n_heads, causal,
                              delta));
  GradTape::Ref f_in = t.layer_norm_rows(x, t.param(ps, prefix + ".ln2.g"),
                                         t.param(ps, prefix + ".ln2.b"));
  return t.add(x, tape_ffn(t, ps, prefix, f_in));
}

}  // namespace mats
