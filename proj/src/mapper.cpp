#include "mats/mapper.hpp"

#include <cmath>
#include <string>

#include "mats/error.hpp"
#include "mats/rng.hpp"
#include "mats/transformer.hpp"

namespace mats {

namespace {

void validate_shape(const MapperShape& s) {
  if (s.queries < 1) throw ConfigError("mapper queries must be >= 1");
  if (s.d_in < 1 || s.d_model < 1 || s.d_dec < 1)
    throw ConfigError("mapper dimensions must be >= 1");
  if (s.n_layers < 1) throw ConfigError("mapper n_layers must be >= 1");
  if (s.n_heads < 1 || s.d_model % s.n_heads != 0)
    throw ConfigError("mapper n_heads must divide d_model");
}

}  // namespace

void init_mapper(ParamStore& ps, const MapperShape& shape,
                 std::uint64_t seed) {
  validate_shape(shape);
  RngStream rng = RngStream(seed).fork("mapper");
  const double limit = 1.0 / std::sqrt(static_cast<double>(shape.d_model));
  ps.add("mapper.queries",
         uniform_matrix(rng, shape.queries, shape.d_model, limit));
  init_linear(ps, "mapper.in", shape.d_in, shape.d_model, rng, limit);
  for (int l = 0; l < shape.n_layers; ++l)
    init_block(ps, "mapper.blk" + std::to_string(l), shape.d_model, rng,
               limit);
  init_linear(ps, "mapper.out", shape.d_model, shape.d_dec, rng, limit);
}

std::int64_t mapper_param_count(const MapperShape& s) {
  const std::int64_t d = s.d_model;
  const std::int64_t per_block = 4 * d * d + 3 * d    // attention, no key bias
                                 + 4 * d              // two layer norms
                                 + 8 * d * d + 5 * d; // feed-forward
  return s.queries * d + (s.d_in * d + d) + s.n_layers * per_block +
         (d * s.d_dec + s.d_dec);
}

GradTape::Ref mapper_forward(GradTape& t, ParamStore& ps,
                             const MapperShape& shape, const Vector& z) {
  if (z.size() != shape.d_in)
    throw UsageError("mapper_forward: embedding width mismatch");
  if (!z.allFinite())
    throw NumericError("mapper_forward: non-finite input embedding");
  GradTape::Ref tok = tape_linear(t, ps, "mapper.in",
                                  t.constant(z.transpose()));
  GradTape::Ref x = t.concat_rows(t.param(ps, "mapper.queries"), tok);
  for (int l = 0; l < shape.n_layers; ++l)
    x = tape_block(t, ps, "mapper.blk" + std::to_string(l), x, shape.n_heads,
                   /*causal=*/false);
  return tape_linear(t, ps, "mapper.out",
                     t.slice_rows(x, 0, shape.queries));
}

Matrix mapper_apply(ParamStore& ps, const MapperShape& shape,
                    const Vector& z) {
  GradTape t;
  return t.value(mapper_forward(t, ps, shape, z));
}

}  // namespace mats
