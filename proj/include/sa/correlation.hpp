#pragma once

#include <stdexcept>
#include <vector>

#include "sa/tape.hpp"

namespace sa {

// Multi-level stack of all-pairs left/right feature correlations, pooled
// along the disparity axis (spatial resolution preserved). Levels are tape
// nodes so gradients flow back to the stereo features.
template <typename T>
struct CorrelationPyramid {
  std::vector<int> levels;  // 4 nodes, level l shaped [H', W', (d_max+1)/2^l]
  int d_max = 0;
};

// C(i,j,d) = <f_L(i,j), f_R(i,j-d)>, d in [0, d_max]; out-of-range d masked 0.
template <typename T>
int build_volume(Tape<T>& tape, int f_left, int f_right, int d_max) {
  if (d_max >= tape.val(f_left).shape[2])
    throw std::invalid_argument("build_volume: d_max must be < feature width");
  return tape.corr_volume(f_left, f_right, d_max);
}

template <typename T>
CorrelationPyramid<T> build_pyramid(Tape<T>& tape, int volume) {
  const auto& shape = tape.val(volume).shape;
  int D = shape[2];
  if (D % 8 != 0) throw std::invalid_argument("build_pyramid: disparity length not divisible by 8");
  CorrelationPyramid<T> pyr;
  pyr.d_max = D - 1;
  pyr.levels.push_back(volume);
  for (int l = 1; l < 4; ++l) pyr.levels.push_back(tape.pool_disparity2(pyr.levels.back()));
  return pyr;
}

// Samples each level along the disparity axis at d/2^l + delta,
// delta in [-radius, radius]; concatenated over levels:
// [(2*radius+1)*4, H', W'].
template <typename T>
int lookup(Tape<T>& tape, const CorrelationPyramid<T>& pyr, int disparity, int radius) {
  std::vector<int> parts;
  T inv_scale = T(1);
  for (int l = 0; l < 4; ++l) {
    parts.push_back(tape.corr_lookup(pyr.levels[static_cast<size_t>(l)], disparity, inv_scale, radius));
    inv_scale /= T(2);
  }
  return tape.concat(parts);
}

}  // namespace sa
