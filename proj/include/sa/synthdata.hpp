#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "sa/scale_align.hpp"
#include "sa/tensor.hpp"

namespace sa {

enum class Layout { fronto_planes, slanted_plane, ramp, boxes };

Layout layout_from_string(const std::string& s);
std::string layout_to_string(Layout l);

struct WaterParams {
  std::array<double, 3> beta = {0.0, 0.0, 0.0};  // attenuation 1/m per channel
  std::array<double, 3> veil = {0.0, 0.0, 0.0};  // backscatter color
  double particle_density = 0.0;                 // speckles per pixel
};

struct SceneSpec {
  Layout layout = Layout::fronto_planes;
  double z_min = 0.8;
  double z_max = 6.0;
  int octaves = 3;
  double baseline_m = 0.10;  // {0.04, 0.10, 0.20, 0.40}
  double focal_px = 160.0;
  int width = 160;
  int height = 96;  // both divisible by 32
  WaterParams water;
};

struct Sample {
  Tensor il, ir;        // [3,H,W] in [0,1]
  Tensor gt_depth;      // [1,H,W], left camera
  Tensor gt_disparity;  // [1,H,W] = f*b / gt_depth, exact
  Calibration calib;
  uint64_t seed = 0;
};

// Ray-cast a rectified pair with analytic ground truth. World-space texture
// octaves give corresponding pixels identical albedo; scenes failing the
// texture-variance gate are regenerated from a derived seed (deterministic).
Sample gen_scene(const SceneSpec& spec, uint64_t seed);

// Per-sample variation for dataset generation: layout and baseline are drawn
// uniformly from their catalogs, derived deterministically from the seed.
SceneSpec randomize_spec(const SceneSpec& base, uint64_t seed);

// img'_c = img_c * e^{-beta_c z} + veil_c * (1 - e^{-beta_c z}), plus optional
// seeded speckle, clamped to [0,1]. Throws on negative beta.
Tensor degrade_underwater(const Tensor& img, const Tensor& depth, const WaterParams& water,
                          uint64_t speckle_seed);

// External dataset layout: one directory per sample with left.ppm, right.ppm,
// depth.pfm, disparity.pfm, meta.json.
void save_sample(const std::string& dir, const Sample& s, const SceneSpec& spec);
Sample load_sample(const std::string& dir);

// ---- image I/O ----
// Binary PPM (P6, 8-bit) and single-channel PFM (little-endian, scale -1.0,
// bottom-up rows). Bit-exact round trips.
void write_ppm(const std::string& path, const Tensor& img);
Tensor read_ppm(const std::string& path);
void write_pfm(const std::string& path, const Tensor& field);
Tensor read_pfm(const std::string& path);

}  // namespace sa
