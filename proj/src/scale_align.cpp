#include "sa/scale_align.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sa {
namespace {

double feature_dot(const Tensor& a, const Tensor& b, int y, int xa, int xb) {
  const int C = a.shape[0], H = a.shape[1], W = a.shape[2];
  (void)H;
  double acc = 0.0;
  for (int c = 0; c < C; ++c)
    acc += a.data[(static_cast<size_t>(c) * a.shape[1] + y) * W + xa] *
           b.data[(static_cast<size_t>(c) * b.shape[1] + y) * W + xb];
  return acc;
}

// Softmax probability margin between the best and second-best entry.
double softmax_margin(const std::vector<double>& row, int best) {
  double m = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - m);
  double p_best = std::exp(row[best] - m) / z;
  double p_second = 0.0;
  for (size_t i = 0; i < row.size(); ++i) {
    if (static_cast<int>(i) == best) continue;
    p_second = std::max(p_second, std::exp(row[i] - m) / z);
  }
  return p_best - p_second;
}

void check_calib(const Calibration& calib) {
  if (!(calib.f > 0.0) || !(calib.b > 0.0))
    throw std::invalid_argument("calibration requires f > 0 and b > 0");
}

}  // namespace

Calibration::Calibration(double f_, double b_) : f(f_), b(b_) {
  check_calib(*this);
}

namespace {

// Per-pixel unit normalization so correlations are cosine similarities and
// the match-acceptance gap threshold is scale-free.
Tensor unit_normalize(const Tensor& f) {
  Tensor out = f;
  const int C = f.shape[0], H = f.shape[1], W = f.shape[2];
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double n = 0.0;
      for (int c = 0; c < C; ++c) n += f.at(c, y, x) * f.at(c, y, x);
      n = std::sqrt(n);
      if (n < 1e-12) continue;
      for (int c = 0; c < C; ++c) out.at(c, y, x) /= n;
    }
  return out;
}

}  // namespace

SparseMatches sparse_match(const Tensor& fl_raw, const Tensor& fr_raw,
                           int d_max, int stride) {
  if (fl_raw.shape != fr_raw.shape || fl_raw.shape.size() != 3)
    throw std::invalid_argument("sparse_match: mismatched feature shapes");
  if (d_max < 1 || stride < 1)
    throw std::invalid_argument("sparse_match: d_max and stride must be >= 1");
  const Tensor fl = unit_normalize(fl_raw);
  const Tensor fr = unit_normalize(fr_raw);
  // Features are unit-normalized, so the winning correlation is a cosine
  // similarity: a genuine correspondence scores near 1 while the best
  // accidental agreement between unrelated features stays well below it.
  // A margin-based test cannot play this role here because smooth features
  // make adjacent disparities score almost identically at true matches.
  constexpr double kMinScore = 0.9;
  const int H = fl.shape[1], W = fl.shape[2];
  SparseMatches out;
  std::vector<double> row;
  for (int y = 0; y < H; y += stride) {
    for (int x = 0; x < W; x += stride) {
      const int dm = std::min(d_max, x);
      if (dm < 1) continue;
      row.resize(static_cast<size_t>(dm) + 1);
      for (int d = 0; d <= dm; ++d) row[d] = feature_dot(fl, fr, y, x, x - d);
      int best = static_cast<int>(
          std::max_element(row.begin(), row.end()) - row.begin());
      if (best == 0) continue;
      if (row[best] < kMinScore) continue;
      double conf = softmax_margin(row, best);
      if (!(conf > 0.0)) continue;

      // Right -> left: the right pixel's best left candidate must land back
      // within 1 px of x.
      const int xr = x - best;
      int back = xr;
      double back_val = -1e300;
      for (int e = 0; e <= d_max && xr + e < W; ++e) {
        double v = feature_dot(fr, fl, y, xr, xr + e);
        if (v > back_val) {
          back_val = v;
          back = xr + e;
        }
      }
      if (std::abs(back - x) > 1) continue;
      out.push_back({x, y, static_cast<double>(best), std::min(conf, 1.0)});
    }
  }
  return out;
}

double disparity_depth_convert(double x, const Calibration& calib) {
  check_calib(calib);
  if (!(x > 0.0))
    throw std::invalid_argument("disparity_depth_convert: non-positive input");
  return calib.f * calib.b / x;
}

Tensor disparity_depth_convert(const Tensor& x, const Calibration& calib) {
  Tensor out(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = disparity_depth_convert(x.data[i], calib);
  return out;
}

std::pair<double, bool> scale_check(const Tensor& mono,
                                    const SparseMatches& matches,
                                    const Calibration& calib, double tau) {
  if (matches.empty())
    throw std::invalid_argument("scale_check: empty match set");
  double acc = 0.0;
  for (const Match& m : matches) {
    double mono_p = mono.at(0, m.y, m.x);
    if (!(mono_p > 0.0))
      throw std::invalid_argument("scale_check: non-positive mono depth");
    acc += disparity_depth_convert(m.d, calib) / mono_p;
  }
  double alpha = acc / static_cast<double>(matches.size());
  return {alpha, std::abs(alpha - 1.0) < tau};
}

ScaleShiftFit fit_scale_shift(const Tensor& mono, const SparseMatches& matches,
                              const Calibration& calib) {
  if (matches.size() < 2)
    throw std::invalid_argument("fit_scale_shift: need >= 2 matches");
  double sw = 0, swm = 0, swmm = 0, swd = 0, swmd = 0;
  for (const Match& q : matches) {
    double m = mono.at(0, q.y, q.x);
    double d = disparity_depth_convert(q.d, calib);
    sw += q.conf;
    swm += q.conf * m;
    swmm += q.conf * m * m;
    swd += q.conf * d;
    swmd += q.conf * m * d;
  }
  ScaleShiftFit fit;
  double det = swmm * sw - swm * swm;
  if (det <= 1e-12 * std::max(swmm * sw, 1e-300)) {
    fit.degenerate = true;
    fit.s = 1.0;
    fit.t = (swd - swm) / sw;  // shift-only weighted mean residual
    return fit;
  }
  fit.s = (swmd * sw - swm * swd) / det;
  fit.t = (swmm * swd - swm * swmd) / det;
  return fit;
}

double fit_residual(const Tensor& mono, const SparseMatches& matches,
                    const Calibration& calib, double s, double t) {
  double acc = 0.0;
  for (const Match& q : matches) {
    double r = s * mono.at(0, q.y, q.x) + t - disparity_depth_convert(q.d, calib);
    acc += q.conf * r * r;
  }
  return acc;
}

double bilateral_weight(int px, int py, int qx, int qy, const Tensor& image,
                        double sigma_d, double sigma_c) {
  double dist2 = static_cast<double>(px - qx) * (px - qx) +
                 static_cast<double>(py - qy) * (py - qy);
  double col2 = 0.0;
  for (int c = 0; c < image.shape[0]; ++c) {
    double diff = image.at(c, py, px) - image.at(c, qy, qx);
    col2 += diff * diff;
  }
  return std::exp(-dist2 / (2.0 * sigma_d * sigma_d)) *
         std::exp(-col2 / (2.0 * sigma_c * sigma_c));
}

Tensor bilateral_refine(const Tensor& depth_0, const SparseMatches& matches,
                        const Calibration& calib, const Tensor& image,
                        double sigma_d, double sigma_c) {
  if (!(sigma_d > 0.0) || !(sigma_c > 0.0))
    throw std::invalid_argument("bilateral_refine: sigmas must be positive");
  const int H = depth_0.shape[1], W = depth_0.shape[2];
  std::vector<double> resid(matches.size());
  for (size_t i = 0; i < matches.size(); ++i)
    resid[i] = disparity_depth_convert(matches[i].d, calib) -
               depth_0.at(0, matches[i].y, matches[i].x);
  const double radius = 3.0 * sigma_d;
  Tensor out = depth_0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double wsum = 0.0, corr = 0.0;
      for (size_t i = 0; i < matches.size(); ++i) {
        const Match& q = matches[i];
        if (std::abs(q.x - x) > radius || std::abs(q.y - y) > radius) continue;
        double d2 = static_cast<double>(q.x - x) * (q.x - x) +
                    static_cast<double>(q.y - y) * (q.y - y);
        if (d2 > radius * radius) continue;
        double w = bilateral_weight(x, y, q.x, q.y, image, sigma_d, sigma_c);
        wsum += w;
        corr += w * resid[i];
      }
      out.at(0, y, x) += corr / std::max(wsum, 1.0);
    }
  }
  return out;
}

AlignmentResult align_scale(const Tensor& mono, const SparseMatches& matches,
                            const Tensor& image, const Calibration& calib,
                            const AlignConfig& cfg) {
  AlignmentResult res;
  res.depth_0 = mono;
  if (matches.size() < 2) {
    // A single anchor cannot support the scale/shift fit; treat it like the
    // empty case rather than trusting one possibly-spurious match.
    res.depth_refined = mono;
    return res;  // unverified pass-through
  }
  res.verified = true;
  auto [alpha, reliable] = scale_check(mono, matches, calib, cfg.tau);
  res.alpha = alpha;
  res.reliable = reliable;
  if (!reliable) {
    ScaleShiftFit fit = fit_scale_shift(mono, matches, calib);
    res.s_hat = fit.s;
    res.t_hat = fit.t;
    res.degenerate = fit.degenerate;
    for (double& v : res.depth_0.data) v = fit.s * v + fit.t;
  }
  res.depth_refined = bilateral_refine(res.depth_0, matches, calib, image,
                                       cfg.sigma_d, cfg.sigma_c);
  return res;
}

}  // namespace sa
