#pragma once

#include "sa/tensor.hpp"

namespace sa {

// Standard depth-evaluation metrics over masked-in pixels.
struct MetricsReport {
  double rel = 0.0;       // mean |p - g| / g
  double sq_rel = 0.0;    // mean (p - g)^2 / g
  double rmse = 0.0;      // sqrt(mean (p - g)^2)
  double log_rmse = 0.0;  // sqrt(mean (ln p - ln g)^2)
  double a1 = 0.0, a2 = 0.0, a3 = 0.0;  // fraction with max(p/g, g/p) < 1.25^i
  double valid_pixel_fraction = 0.0;
};

// pred, gt, mask: [1,H,W]; mask nonzero selects pixels. gt must be positive on
// every selected pixel; pred is floored at 1e-6 for the log/ratio terms.
// Throws on shape mismatch or an empty mask.
MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask);

}  // namespace sa
