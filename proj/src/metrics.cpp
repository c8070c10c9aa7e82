#include "sa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sa {

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  if (pred.shape != gt.shape || pred.shape != mask.shape || pred.shape.size() != 3 ||
      pred.shape[0] != 1)
    throw std::invalid_argument("compute_metrics: pred/gt/mask must share shape [1,H,W]");

  double rel = 0.0, sq_rel = 0.0, se = 0.0, log_se = 0.0;
  long n = 0, n1 = 0, n2 = 0, n3 = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    if (mask.data[i] == 0.0) continue;
    double g = gt.data[i];
    if (!(g > 0.0)) throw std::invalid_argument("compute_metrics: gt must be positive on the mask");
    double p = std::max(pred.data[i], 1e-6);
    double diff = p - g;
    rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    se += diff * diff;
    double ld = std::log(p) - std::log(g);
    log_se += ld * ld;
    double ratio = std::max(p / g, g / p);
    if (ratio < 1.25) ++n1;
    if (ratio < 1.25 * 1.25) ++n2;
    if (ratio < 1.25 * 1.25 * 1.25) ++n3;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("compute_metrics: empty mask");

  MetricsReport r;
  double dn = static_cast<double>(n);
  r.rel = rel / dn;
  r.sq_rel = sq_rel / dn;
  r.rmse = std::sqrt(se / dn);
  r.log_rmse = std::sqrt(log_se / dn);
  r.a1 = n1 / dn;
  r.a2 = n2 / dn;
  r.a3 = n3 / dn;
  r.valid_pixel_fraction = dn / static_cast<double>(pred.data.size());
  return r;
}

}  // namespace sa
