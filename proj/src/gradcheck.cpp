#include "mats/gradcheck.hpp"

#include <cmath>
#include <vector>

#include "mats/error.hpp"

namespace mats {

GradCheckReport check_gradients(ParamStore& params,
                                const std::function<double(bool)>& loss_fn,
                                double h, double tol) {
  if (!(h > 0.0)) throw UsageError("check_gradients: h must be positive");
  params.zero_grads();
  const double base = loss_fn(true);
  if (!std::isfinite(base))
    throw NumericError("check_gradients: non-finite loss at base point");

  // Snapshot analytic grads before finite differencing perturbs anything.
  std::vector<Matrix> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    analytic[i] = params.param_at(i).grad;

  GradCheckReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params.param_at(i);
    if (!p.trainable) continue;
    for (Index c = 0; c < p.value.cols(); ++c) {
      for (Index r = 0; r < p.value.rows(); ++r) {
        const double saved = p.value(r, c);
        p.value(r, c) = saved + h;
        const double lp = loss_fn(false);
        p.value(r, c) = saved - h;
        const double lm = loss_fn(false);
        p.value(r, c) = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm))
          throw NumericError("check_gradients: non-finite perturbed loss");
        const double fd = (lp - lm) / (2.0 * h);
        const double an = analytic[i](r, c);
        const double rel = std::abs(an - fd) /
                           std::max({std::abs(an), std::abs(fd), 1e-8});
        ++rep.entries_checked;
        if (rel > tol) ++rep.entries_over_tol;
        if (rel > rep.max_rel_error) {
          rep.max_rel_error = rel;
          rep.worst_param = params.name_at(i);
          rep.worst_row = r;
          rep.worst_col = c;
        }
      }
    }
  }
  return rep;
}

}  // namespace mats
