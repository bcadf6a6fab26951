#pragma once

#include <functional>
#include <string>

#include "mats/param_store.hpp"

namespace mats {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_row = 0;
  Index worst_col = 0;
  std::int64_t entries_checked = 0;
  std::int64_t entries_over_tol = 0;
};

// Central-difference check of every trainable entry in `params` against the
// analytic gradients produced by loss_fn(true). loss_fn(false) must evaluate
// the same deterministic loss without touching gradients. Frozen parameters
// are skipped; they have no analytic gradient to compare.
GradCheckReport check_gradients(ParamStore& params,
                                const std::function<double(bool)>& loss_fn,
                                double h = 1e-5, double tol = 1e-4);

}  // namespace mats
