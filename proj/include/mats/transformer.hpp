#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mats/grad_tape.hpp"
#include "mats/param_store.hpp"
#include "mats/rng.hpp"
#include "mats/types.hpp"

namespace mats {

// Transformer plumbing shared by the mapper (bidirectional) and the decoder
// (causal). Parameter naming under a prefix P:
//   P.wq P.bq P.wk P.wv P.bv P.wo P.bo        attention (keys carry no bias)
//   P.ln1.g P.ln1.b P.ln2.g P.ln2.b           pre-norm gains/biases
//   P.ffn.w1 P.ffn.b1 P.ffn.w2 P.ffn.b2       GELU feed-forward, 4x expansion
// Weights are (d_in x d_out) applied as X * W; biases are 1 x d_out rows.

Matrix uniform_matrix(RngStream& rng, Index rows, Index cols, double limit);

void init_linear(ParamStore& ps, const std::string& name, Index d_in,
                 Index d_out, RngStream& rng, double limit);

void init_block(ParamStore& ps, const std::string& prefix, Index d_model,
                RngStream& rng, double limit);

// Adapter hook: given the input of projection `proj` ("q"/"k"/"v"/"o"),
// returns a node to add to that projection's output, or -1 for none.
using ProjDelta = std::function<GradTape::Ref(
    GradTape&, GradTape::Ref x, const std::string& proj)>;

GradTape::Ref tape_linear(GradTape& t, ParamStore& ps, const std::string& name,
                          GradTape::Ref x);

// Multi-head self-attention over the rows of x (S x d_model). Causal masking
// is an additive -1e9 on future positions, which underflows to exact zero
// weight after the max-subtracted softmax.
GradTape::Ref tape_attention(GradTape& t, ParamStore& ps,
                             const std::string& prefix, GradTape::Ref x,
                             Index n_heads, bool causal,
                             const ProjDelta& delta = {});

GradTape::Ref tape_ffn(GradTape& t, ParamStore& ps, const std::string& prefix,
                       GradTape::Ref x);

// Pre-norm residual block: x + attn(ln1(x)), then + ffn(ln2(x)).
GradTape::Ref tape_block(GradTape& t, ParamStore& ps, const std::string& prefix,
                         GradTape::Ref x, Index n_heads, bool causal,
                         const ProjDelta& delta = {});

}  // namespace mats
