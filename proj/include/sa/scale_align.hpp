#pragma once

#include <utility>
#include <vector>

#include "sa/tensor.hpp"

namespace sa {

// Stereo rig intrinsics used for disparity <-> depth conversion.
struct Calibration {
  double f = 0.0;  // focal length, pixels
  double b = 0.0;  // baseline, meters

  Calibration() = default;
  Calibration(double f_, double b_);
};

// One sparse stereo anchor: left pixel (x, y) matched at disparity d with
// confidence conf in (0, 1].
struct Match {
  int x = 0;
  int y = 0;
  double d = 0.0;
  double conf = 0.0;
};
using SparseMatches = std::vector<Match>;

struct ScaleShiftFit {
  double s = 1.0;
  double t = 0.0;
  bool degenerate = false;  // all mono values equal: shift-only solve
};

struct AlignmentResult {
  double alpha = 0.0;
  bool reliable = false;
  bool verified = false;  // false when the match set was empty (pass-through)
  double s_hat = 1.0;
  double t_hat = 0.0;
  bool degenerate = false;
  Tensor depth_0;        // after the (conditional) global correction
  Tensor depth_refined;  // after bilateral propagation of anchor residuals
};

struct AlignConfig {
  double tau = 0.1;
  double sigma_d = 16.0;
  double sigma_c = 0.1;
  int match_stride = 1;
};

// Exhaustive horizontal matching with a bidirectional (left->right->left)
// consistency check. Confidence is the softmax margin of the left pixel's
// correlation row. Matches with d == 0 or zero margin are dropped.
SparseMatches sparse_match(const Tensor& fl, const Tensor& fr, int d_max,
                           int stride = 1);

// D = f*b/d and d = f*b/D (self-inverse). Throws std::invalid_argument on a
// non-positive input value or bad calibration.
double disparity_depth_convert(double x, const Calibration& calib);
Tensor disparity_depth_convert(const Tensor& x, const Calibration& calib);

// alpha = mean_p D_sparse(p) / mono(p); reliable iff |alpha - 1| < tau.
// Throws std::invalid_argument on empty matches or non-positive mono at an
// anchor.
std::pair<double, bool> scale_check(const Tensor& mono,
                                    const SparseMatches& matches,
                                    const Calibration& calib, double tau);

// Weighted least squares for s*mono + t ~= D_sparse over the anchors,
// solved via the 2x2 normal equations.
ScaleShiftFit fit_scale_shift(const Tensor& mono, const SparseMatches& matches,
                              const Calibration& calib);

// Residual of the fit objective Sum_p w_p (s*mono(p) + t - D_sparse(p))^2.
double fit_residual(const Tensor& mono, const SparseMatches& matches,
                    const Calibration& calib, double s, double t);

double bilateral_weight(int px, int py, int qx, int qy, const Tensor& image,
                        double sigma_d, double sigma_c);

// depth_0 + normalized bilateral sum of anchor residuals. Anchors beyond
// 3*sigma_d of a pixel are skipped. Throws on non-positive sigmas.
Tensor bilateral_refine(const Tensor& depth_0, const SparseMatches& matches,
                        const Calibration& calib, const Tensor& image,
                        double sigma_d, double sigma_c);

// Full pipeline: scale check, conditional global fit, bilateral refinement.
// Empty matches fall back to pass-through with verified = false.
AlignmentResult align_scale(const Tensor& mono, const SparseMatches& matches,
                            const Tensor& image, const Calibration& calib,
                            const AlignConfig& cfg = {});

}  // namespace sa
