#include "sa/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "nlohmann/json.hpp"
#include "sa/rng.hpp"

namespace sa {
namespace {

constexpr double kBaselines[4] = {0.04, 0.10, 0.20, 0.40};

bool valid_baseline(double b) {
  for (double v : kBaselines)
    if (std::abs(b - v) < 1e-12) return true;
  return false;
}

void validate_spec(const SceneSpec& spec) {
  if (!(spec.z_min > 0.0) || !(spec.z_min < spec.z_max) || !(spec.z_max <= 50.0))
    throw std::invalid_argument("gen_scene: depth range must satisfy 0 < z_min < z_max <= 50");
  if (!valid_baseline(spec.baseline_m))
    throw std::invalid_argument("gen_scene: baseline must be one of {0.04, 0.10, 0.20, 0.40}");
  if (spec.focal_px <= 0.0) throw std::invalid_argument("gen_scene: focal length must be positive");
  if (spec.width <= 0 || spec.height <= 0 || spec.width % 32 != 0 || spec.height % 32 != 0)
    throw std::invalid_argument("gen_scene: resolution must be positive and divisible by 32");
  if (spec.octaves < 1 || spec.octaves > 8)
    throw std::invalid_argument("gen_scene: octaves must be in [1, 8]");
  for (double b : spec.water.beta)
    if (b < 0.0) throw std::invalid_argument("gen_scene: attenuation beta must be non-negative");
  if (spec.water.particle_density < 0.0)
    throw std::invalid_argument("gen_scene: particle density must be non-negative");
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---- scene geometry -------------------------------------------------------
// Every surface is either a fronto-parallel rectangle (possibly unbounded) or
// a plane slanted along one world axis: z = z0 + slope * (x or y).

struct Surface {
  enum Kind { fronto, slant_x, slant_y } kind = fronto;
  double z0 = 1.0;
  double slope = 0.0;                        // slant_x / slant_y only
  double x_lo = -1e30, x_hi = 1e30;          // world-space extent at the surface
  double y_lo = -1e30, y_hi = 1e30;
};

struct Scene {
  std::vector<Surface> surfaces;  // nearest hit wins
};

// Ray from camera at (ox, 0, 0) through direction (dx, dy, 1); returns the
// depth z of the nearest surface hit, or +inf on a miss.
double trace(const Scene& scene, double ox, double dx, double dy) {
  double best = std::numeric_limits<double>::infinity();
  for (const Surface& s : scene.surfaces) {
    double z;
    switch (s.kind) {
      case Surface::fronto:
        z = s.z0;
        break;
      case Surface::slant_x: {
        double denom = 1.0 - s.slope * dx;
        if (denom <= 1e-9) continue;
        z = (s.z0 + s.slope * ox) / denom;
        break;
      }
      case Surface::slant_y: {
        double denom = 1.0 - s.slope * dy;
        if (denom <= 1e-9) continue;
        z = s.z0 / denom;
        break;
      }
    }
    if (z <= 0.0 || z >= best) continue;
    double x = ox + z * dx, y = z * dy;
    if (x < s.x_lo || x > s.x_hi || y < s.y_lo || y > s.y_hi) continue;
    best = z;
  }
  return best;
}

Scene build_scene(const SceneSpec& spec, Rng& rng) {
  Scene scene;
  const double zn = spec.z_min, zf = spec.z_max;
  // Visible world half-width at the far plane (either camera).
  const double cx = (spec.width - 1) * 0.5, cy = (spec.height - 1) * 0.5;
  const double half_w = zf * cx / spec.focal_px + spec.baseline_m;
  const double half_h = zf * cy / spec.focal_px;

  Surface bg;  // backdrop keeps every ray bounded
  bg.z0 = zf;
  scene.surfaces.push_back(bg);

  // Foreground depths live in [z_min, 0.7*z_max]; a spec that pins the depth
  // range shut degenerates to the bare backdrop plane.
  const bool has_room = 0.7 * zf > zn;

  switch (spec.layout) {
    case Layout::fronto_planes: {
      int n = has_room ? 2 + rng.uniform_int(2) : 0;
      for (int k = 0; k < n; ++k) {
        Surface s;
        s.z0 = rng.uniform(zn, 0.7 * zf);
        double c = rng.uniform(-half_w, half_w);
        double w = rng.uniform(0.15, 0.45) * half_w;
        s.x_lo = c - w;
        s.x_hi = c + w;
        scene.surfaces.push_back(s);
      }
      break;
    }
    case Layout::slanted_plane: {
      Surface s;
      s.kind = Surface::slant_x;
      // |dx| stays below ~(cx/f + b/z); cap the slope so depth stays in range.
      double dmax = cx / spec.focal_px + 0.5;
      s.slope = rng.uniform(-0.45, 0.45) / std::max(dmax, 0.5);
      s.z0 = rng.uniform(std::min(zn * 1.9, 0.65 * zf), 0.65 * zf);
      scene.surfaces.push_back(s);
      break;
    }
    case Layout::ramp: {
      Surface s;
      s.kind = Surface::slant_y;
      double dmax = cy / spec.focal_px;
      s.slope = rng.uniform(-0.45, 0.45) / std::max(dmax, 0.3);
      s.z0 = rng.uniform(std::min(zn * 1.9, 0.65 * zf), 0.65 * zf);
      scene.surfaces.push_back(s);
      break;
    }
    case Layout::boxes: {
      int n = has_room ? 3 + rng.uniform_int(4) : 0;
      for (int k = 0; k < n; ++k) {
        Surface s;
        s.z0 = rng.uniform(zn, 0.7 * zf);
        double xc = rng.uniform(-half_w, half_w), yc = rng.uniform(-half_h, half_h);
        double w = rng.uniform(0.1, 0.35) * half_w, h = rng.uniform(0.15, 0.5) * half_h;
        s.x_lo = xc - w;
        s.x_hi = xc + w;
        s.y_lo = yc - h;
        s.y_hi = yc + h;
        scene.surfaces.push_back(s);
      }
      break;
    }
  }
  return scene;
}

// ---- world-space texture --------------------------------------------------
// Value noise on a 3-D lattice: corresponding pixels of the two views hit the
// same world point and therefore read identical albedo.

double lattice(uint64_t seed, int64_t ix, int64_t iy, int64_t iz, int channel, int octave) {
  uint64_t h = seed;
  h = splitmix64(h ^ static_cast<uint64_t>(ix) * 0x8da6b343ull);
  h = splitmix64(h ^ static_cast<uint64_t>(iy) * 0xd8163841ull);
  h = splitmix64(h ^ static_cast<uint64_t>(iz) * 0xcb1ab31full);
  h = splitmix64(h ^ (static_cast<uint64_t>(channel) * 4096 + static_cast<uint64_t>(octave)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(uint64_t seed, double x, double y, double z, int channel, int octave) {
  double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  int64_t ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy),
          iz = static_cast<int64_t>(fz);
  double tx = smoothstep(x - fx), ty = smoothstep(y - fy), tz = smoothstep(z - fz);
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
        acc += w * lattice(seed, ix + dx, iy + dy, iz + dz, channel, octave);
      }
  return acc;
}

double albedo(uint64_t seed, double x, double y, double z, int channel, int octaves) {
  double acc = 0.0, norm = 0.0, amp = 1.0, freq = 2.0;
  for (int o = 0; o < octaves; ++o) {
    acc += amp * value_noise(seed, x * freq, y * freq, z * freq, channel, o);
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return 0.1 + 0.85 * (acc / norm);
}

// Renders one view; fills per-pixel depth and albedo image.
void render_view(const SceneSpec& spec, const Scene& scene, uint64_t tex_seed, double ox,
                 Tensor& img, Tensor& depth) {
  const int H = spec.height, W = spec.width;
  const double cx = (W - 1) * 0.5, cy = (H - 1) * 0.5, f = spec.focal_px;
  img = Tensor({3, H, W});
  depth = Tensor({1, H, W});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double dx = (j - cx) / f, dy = (i - cy) / f;
      double z = trace(scene, ox, dx, dy);
      if (!std::isfinite(z)) throw std::runtime_error("gen_scene: ray escaped the scene");
      depth.at(0, i, j) = z;
      double wx = ox + z * dx, wy = z * dy;
      for (int c = 0; c < 3; ++c) img.at(c, i, j) = albedo(tex_seed, wx, wy, z, c, spec.octaves);
    }
}

double gray_variance(const Tensor& img) {
  const int H = img.shape[1], W = img.shape[2];
  double mean = 0.0;
  std::vector<double> gray(static_cast<size_t>(H) * W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double g = (img.at(0, i, j) + img.at(1, i, j) + img.at(2, i, j)) / 3.0;
      gray[static_cast<size_t>(i) * W + j] = g;
      mean += g;
    }
  mean /= static_cast<double>(gray.size());
  double var = 0.0;
  for (double g : gray) var += (g - mean) * (g - mean);
  return var / static_cast<double>(gray.size());
}

}  // namespace

Layout layout_from_string(const std::string& s) {
  if (s == "fronto_planes") return Layout::fronto_planes;
  if (s == "slanted_plane") return Layout::slanted_plane;
  if (s == "ramp") return Layout::ramp;
  if (s == "boxes") return Layout::boxes;
  throw std::invalid_argument("unknown layout: " + s);
}

std::string layout_to_string(Layout l) {
  switch (l) {
    case Layout::fronto_planes: return "fronto_planes";
    case Layout::slanted_plane: return "slanted_plane";
    case Layout::ramp: return "ramp";
    case Layout::boxes: return "boxes";
  }
  throw std::invalid_argument("layout_to_string: bad enum value");
}

Tensor degrade_underwater(const Tensor& img, const Tensor& depth, const WaterParams& water,
                          uint64_t speckle_seed) {
  if (img.shape.size() != 3 || img.shape[0] != 3)
    throw std::invalid_argument("degrade_underwater: image must be [3,H,W]");
  if (depth.shape.size() != 3 || depth.shape[0] != 1 || depth.shape[1] != img.shape[1] ||
      depth.shape[2] != img.shape[2])
    throw std::invalid_argument("degrade_underwater: depth must be [1,H,W] matching the image");
  for (double b : water.beta)
    if (b < 0.0) throw std::invalid_argument("degrade_underwater: beta must be non-negative");
  for (double z : depth.data)
    if (!(z > 0.0)) throw std::invalid_argument("degrade_underwater: depth must be positive");

  const int H = img.shape[1], W = img.shape[2];
  Tensor out({3, H, W});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double t = std::exp(-water.beta[static_cast<size_t>(c)] * depth.at(0, i, j));
        out.at(c, i, j) = img.at(c, i, j) * t + water.veil[static_cast<size_t>(c)] * (1.0 - t);
      }

  if (water.particle_density > 0.0) {
    Rng rng(speckle_seed);
    int count = static_cast<int>(water.particle_density * H * W);
    for (int k = 0; k < count; ++k) {
      int i = rng.uniform_int(H), j = rng.uniform_int(W);
      double v = rng.uniform(0.5, 1.0);
      for (int c = 0; c < 3; ++c) out.at(c, i, j) = std::max(out.at(c, i, j), v);
    }
  }
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Sample gen_scene(const SceneSpec& spec, uint64_t seed) {
  validate_spec(spec);
  constexpr double kMinTextureVariance = 5e-4;
  uint64_t attempt_seed = seed;
  for (int attempt = 0; attempt < 16; ++attempt) {
    Rng rng(attempt_seed);
    Scene scene = build_scene(spec, rng);
    uint64_t tex_seed = rng.fork(1);

    Sample s;
    s.seed = seed;
    s.calib = Calibration(spec.focal_px, spec.baseline_m);
    Tensor depth_r;
    render_view(spec, scene, tex_seed, 0.0, s.il, s.gt_depth);
    render_view(spec, scene, tex_seed, spec.baseline_m, s.ir, depth_r);

    if (gray_variance(s.il) < kMinTextureVariance) {
      attempt_seed = splitmix64(attempt_seed);  // low-texture scene: derive a fresh seed
      continue;
    }

    const int H = spec.height, W = spec.width;
    s.gt_disparity = Tensor({1, H, W});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        s.gt_disparity.at(0, i, j) =
            spec.focal_px * spec.baseline_m / s.gt_depth.at(0, i, j);

    s.il = degrade_underwater(s.il, s.gt_depth, spec.water, rng.fork(2));
    s.ir = degrade_underwater(s.ir, depth_r, spec.water, rng.fork(3));
    return s;
  }
  throw std::runtime_error("gen_scene: could not satisfy the texture-variance gate");
}

SceneSpec randomize_spec(const SceneSpec& base, uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x5ce7edb1a9ull));
  SceneSpec spec = base;
  spec.layout = static_cast<Layout>(rng.uniform_int(4));
  spec.baseline_m = kBaselines[rng.uniform_int(4)];
  return spec;
}

void save_sample(const std::string& dir, const Sample& s, const SceneSpec& spec) {
  std::filesystem::create_directories(dir);
  write_ppm(dir + "/left.ppm", s.il);
  write_ppm(dir + "/right.ppm", s.ir);
  write_pfm(dir + "/depth.pfm", s.gt_depth);
  write_pfm(dir + "/disparity.pfm", s.gt_disparity);

  nlohmann::json meta;
  meta["seed"] = s.seed;
  meta["calib"] = {{"focal_px", s.calib.f}, {"baseline_m", s.calib.b}};
  meta["spec"] = {{"layout", layout_to_string(spec.layout)},
                  {"z_min", spec.z_min},
                  {"z_max", spec.z_max},
                  {"octaves", spec.octaves},
                  {"baseline_m", spec.baseline_m},
                  {"focal_px", spec.focal_px},
                  {"width", spec.width},
                  {"height", spec.height},
                  {"water",
                   {{"beta", spec.water.beta},
                    {"veil", spec.water.veil},
                    {"particle_density", spec.water.particle_density}}}};
  std::ofstream f(dir + "/meta.json");
  if (!f) throw std::runtime_error("save_sample: cannot open " + dir + "/meta.json");
  f << meta.dump(2) << "\n";
}

Sample load_sample(const std::string& dir) {
  std::ifstream f(dir + "/meta.json");
  if (!f) throw std::runtime_error("load_sample: cannot open " + dir + "/meta.json");
  nlohmann::json meta = nlohmann::json::parse(f);

  Sample s;
  s.seed = meta.at("seed").get<uint64_t>();
  s.calib = Calibration(meta.at("calib").at("focal_px").get<double>(),
                        meta.at("calib").at("baseline_m").get<double>());
  s.il = read_ppm(dir + "/left.ppm");
  s.ir = read_ppm(dir + "/right.ppm");
  s.gt_depth = read_pfm(dir + "/depth.pfm");
  s.gt_disparity = read_pfm(dir + "/disparity.pfm");
  return s;
}

}  // namespace sa
