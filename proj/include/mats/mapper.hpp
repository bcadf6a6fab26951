#pragma once

#include <cstdint>
#include <string>

#include "mats/grad_tape.hpp"
#include "mats/param_store.hpp"
#include "mats/types.hpp"

namespace mats {

// Connection module between the frozen encoder and the frozen decoder: a set
// of learnable query rows attends over the encoder embedding (entering as a
// single token) through a small bidirectional transformer, and the query
// outputs are projected into decoder space as a prefix. The queries carry no
// positional encoding; attention tells them apart by content.

struct MapperShape {
  Index queries = 4;
  Index d_in = 16;     // encoder embedding width
  Index d_model = 32;
  Index d_dec = 64;    // decoder embedding width
  int n_layers = 2;
  Index n_heads = 4;
};

// Registers all mapper parameters under "mapper." with uniform init of limit
// 1/sqrt(d_model); biases zero, norm gains one. Deterministic in seed.
void init_mapper(ParamStore& ps, const MapperShape& shape, std::uint64_t seed);

// Closed-form trainable scalar count for the shape.
std::int64_t mapper_param_count(const MapperShape& shape);

// z is the encoder embedding (length d_in), entering the tape as a constant:
// the prefix is differentiable in the mapper parameters only. Returns a
// queries x d_dec node.
GradTape::Ref mapper_forward(GradTape& t, ParamStore& ps,
                             const MapperShape& shape, const Vector& z);

// Convenience wrapper for inference paths: runs a throwaway tape.
Matrix mapper_apply(ParamStore& ps, const MapperShape& shape, const Vector& z);

}  // namespace mats
