#pragma once

#include <cmath>
#include <cstddef>

#include "tebm/image.hpp"

namespace tebm {

struct CgResult {
  Image x;
  int iterations = 0;
  bool breakdown = false;  // a search direction had zero curvature
};

/// Conjugate gradient for an SPD operator given as apply(const Image&) -> Image.
/// Runs exactly max_iter iterations unless the residual vanishes (below
/// tol * ||b||) or curvature breaks down.
template <typename Apply>
CgResult conjugate_gradient(Apply&& apply, const Image& b, Image x0, int max_iter, double tol = 0.0) {
  require_same_size(b, x0, "conjugate_gradient");
  CgResult res{std::move(x0), 0, false};
  Image r = b;
  r.values -= apply(res.x).values;
  Image p = r;
  double rr = squared_norm(r);
  const double stop = tol * tol * squared_norm(b);
  for (int it = 0; it < max_iter; ++it) {
    if (rr == 0.0 || rr <= stop) break;
    const Image Ap = apply(p);
    const double pAp = dot(p, Ap);
    if (!(pAp > 0.0) || !std::isfinite(pAp)) {
      res.breakdown = true;
      break;
    }
    const double alpha = rr / pAp;
    res.x.values += alpha * p.values;
    r.values -= alpha * Ap.values;
    const double rr_new = squared_norm(r);
    p.values = r.values + (rr_new / rr) * p.values;
    rr = rr_new;
    res.iterations = it + 1;
  }
  return res;
}

}  // namespace tebm
