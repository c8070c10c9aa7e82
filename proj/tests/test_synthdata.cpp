#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "sa/losses.hpp"
#include "sa/rng.hpp"
#include "sa/synthdata.hpp"

using namespace sa;

namespace {

SceneSpec desk_spec() {
  SceneSpec spec;
  spec.width = 64;
  spec.height = 32;
  spec.focal_px = 64.0;
  spec.z_min = 0.8;
  spec.z_max = 6.0;
  return spec;
}

std::string temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("single fronto plane at z=2 with f=320, b=0.1 gives constant disparity 16") {
  SceneSpec spec;
  spec.layout = Layout::fronto_planes;
  spec.z_min = 1.9;  // pins the range shut: no room for foreground, backdrop at z_max
  spec.z_max = 2.0;
  spec.focal_px = 320.0;
  spec.baseline_m = 0.10;
  spec.width = 64;
  spec.height = 32;
  Sample s = gen_scene(spec, 7);
  for (double z : s.gt_depth.data) CHECK(z == 2.0);
  for (double d : s.gt_disparity.data) CHECK(d == 16.0);
  // photometric consistency before degradation: I_R(j) == I_L(j + 16)
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j + 16 < 64; ++j)
        CHECK(s.ir.at(c, i, j) == doctest::Approx(s.il.at(c, i, j + 16)).epsilon(1e-12));
}

TEST_CASE("same seed and spec give a bit-identical sample") {
  SceneSpec spec = desk_spec();
  spec.layout = Layout::boxes;
  spec.water.beta = {0.3, 0.1, 0.08};
  spec.water.veil = {0.1, 0.3, 0.35};
  spec.water.particle_density = 0.002;
  Sample a = gen_scene(spec, 12345);
  Sample b = gen_scene(spec, 12345);
  CHECK(a.il.data == b.il.data);
  CHECK(a.ir.data == b.ir.data);
  CHECK(a.gt_depth.data == b.gt_depth.data);
  CHECK(a.gt_disparity.data == b.gt_disparity.data);
  Sample c = gen_scene(spec, 12346);
  CHECK(a.il.data != c.il.data);
}

TEST_CASE("disparity/depth identity is exact on every pixel for all layouts") {
  for (Layout layout :
       {Layout::fronto_planes, Layout::slanted_plane, Layout::ramp, Layout::boxes}) {
    SceneSpec spec = desk_spec();
    spec.layout = layout;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      Sample s = gen_scene(spec, seed);
      const int H = spec.height, W = spec.width;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          double z = s.gt_depth.at(0, i, j);
          CHECK(z > 0.0);
          CHECK(z <= spec.z_max + 1e-9);
          CHECK(s.gt_disparity.at(0, i, j) == spec.focal_px * spec.baseline_m / z);
        }
      for (double v : s.il.data) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("boxes layout: occlusion band width equals the disparity difference") {
  SceneSpec spec = desk_spec();
  spec.layout = Layout::boxes;
  spec.focal_px = 160.0;
  spec.baseline_m = 0.20;  // larger disparities make the bands measurable
  int checked = 0;
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Sample s = gen_scene(spec, seed);
    Tensor vis = occlusion_mask(s.gt_disparity);
    const int H = spec.height, W = spec.width;
    for (int i = 0; i < H; ++i) {
      int j = 0;
      while (j < W) {
        if (vis.at(0, i, j) != 0.0) {
          ++j;
          continue;
        }
        int start = j;
        while (j < W && vis.at(0, i, j) == 0.0) ++j;
        int end = j;  // occluded run [start, end)
        if (end >= W) continue;
        // Only score clean runs: constant background disparity inside the run,
        // bordered on the right by a nearer (larger-disparity) surface.
        double d_bg = s.gt_disparity.at(0, i, start);
        bool constant = true;
        for (int k = start; k < end; ++k)
          if (std::abs(s.gt_disparity.at(0, i, k) - d_bg) > 0.25) constant = false;
        double d_fg = s.gt_disparity.at(0, i, end);
        if (!constant || d_fg <= d_bg + 0.5) continue;
        CHECK(std::abs((end - start) - (d_fg - d_bg)) <= 1.0);
        ++checked;
      }
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("degrade_underwater with beta=0 and no particles is the identity") {
  Rng rng(5);
  Tensor img({3, 8, 8}), depth({1, 8, 8});
  for (auto& v : img.data) v = rng.uniform();
  for (auto& v : depth.data) v = rng.uniform(0.5, 6.0);
  WaterParams water;
  water.veil = {0.1, 0.3, 0.35};  // irrelevant when beta is zero
  Tensor out = degrade_underwater(img, depth, water, 99);
  CHECK(out.data == img.data);
}

TEST_CASE("degrade_underwater approaches the veil color at large depth") {
  Tensor img = Tensor::full({3, 4, 4}, 0.9);
  Tensor depth = Tensor::full({1, 4, 4}, 49.0);
  WaterParams water;
  water.beta = {1.0, 1.0, 1.0};
  water.veil = {0.1, 0.3, 0.35};
  Tensor out = degrade_underwater(img, depth, water, 0);
  for (int c = 0; c < 3; ++c)
    CHECK(out.at(c, 1, 1) == doctest::Approx(water.veil[c]).epsilon(1e-12));
}

TEST_CASE("degrade_underwater matches the closed form at beta=0.6, z=2") {
  Tensor img = Tensor::full({3, 2, 2}, 1.0);
  Tensor depth = Tensor::full({1, 2, 2}, 2.0);
  WaterParams water;
  water.beta = {0.6, 0.0, 0.0};
  water.veil = {0.1, 0.0, 0.0};
  Tensor out = degrade_underwater(img, depth, water, 0);
  double expected = std::exp(-1.2) + 0.1 * (1.0 - std::exp(-1.2));
  CHECK(out.at(0, 0, 0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(out.at(0, 0, 0) == doctest::Approx(0.3712).epsilon(1e-3));
  CHECK(out.at(1, 0, 0) == 1.0);  // untouched channel
}

TEST_CASE("degrade_underwater validates its inputs") {
  Tensor img = Tensor::full({3, 2, 2}, 0.5);
  Tensor depth = Tensor::full({1, 2, 2}, 1.0);
  WaterParams bad;
  bad.beta = {-0.1, 0.0, 0.0};
  CHECK_THROWS_AS(degrade_underwater(img, depth, bad, 0), std::invalid_argument);
  Tensor zero_depth = Tensor::full({1, 2, 2}, 0.0);
  CHECK_THROWS_AS(degrade_underwater(img, zero_depth, WaterParams{}, 0), std::invalid_argument);
}

TEST_CASE("gen_scene rejects invalid specs") {
  SceneSpec spec = desk_spec();
  spec.z_min = 0.0;
  CHECK_THROWS_AS(gen_scene(spec, 1), std::invalid_argument);
  spec = desk_spec();
  spec.z_max = 51.0;
  CHECK_THROWS_AS(gen_scene(spec, 1), std::invalid_argument);
  spec = desk_spec();
  spec.baseline_m = 0.15;
  CHECK_THROWS_AS(gen_scene(spec, 1), std::invalid_argument);
  spec = desk_spec();
  spec.width = 60;
  CHECK_THROWS_AS(gen_scene(spec, 1), std::invalid_argument);
  spec = desk_spec();
  spec.water.beta = {0.0, -1.0, 0.0};
  CHECK_THROWS_AS(gen_scene(spec, 1), std::invalid_argument);
}

TEST_CASE("randomize_spec draws each baseline with frequency 0.25 +- 0.05") {
  SceneSpec base = desk_spec();
  int counts[4] = {0, 0, 0, 0};
  const double baselines[4] = {0.04, 0.10, 0.20, 0.40};
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    SceneSpec s = randomize_spec(base, seed);
    bool found = false;
    for (int k = 0; k < 4; ++k)
      if (s.baseline_m == baselines[k]) {
        ++counts[k];
        found = true;
      }
    CHECK(found);
  }
  for (int k = 0; k < 4; ++k) {
    double freq = counts[k] / 1000.0;
    CHECK(freq > 0.20);
    CHECK(freq < 0.30);
  }
}

TEST_CASE("layout names round-trip") {
  for (Layout l : {Layout::fronto_planes, Layout::slanted_plane, Layout::ramp, Layout::boxes})
    CHECK(layout_from_string(layout_to_string(l)) == l);
  CHECK_THROWS_AS(layout_from_string("spheres"), std::invalid_argument);
}

TEST_CASE("PPM round-trips bit-exactly after 8-bit quantization") {
  std::string dir = temp_dir("sa_ppm_test");
  Rng rng(3);
  Tensor img({3, 16, 24});
  for (auto& v : img.data) v = rng.uniform();
  write_ppm(dir + "/a.ppm", img);
  Tensor back = read_ppm(dir + "/a.ppm");
  REQUIRE(back.shape == img.shape);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(back.data[i] == std::lround(img.data[i] * 255.0) / 255.0);
  // a second write of the decoded image reproduces the file byte-for-byte
  write_ppm(dir + "/b.ppm", back);
  CHECK(slurp(dir + "/a.ppm") == slurp(dir + "/b.ppm"));
}

TEST_CASE("PFM round-trips bit-exactly for float32 values") {
  std::string dir = temp_dir("sa_pfm_test");
  Rng rng(4);
  Tensor field({1, 12, 20});
  for (auto& v : field.data) v = static_cast<float>(rng.uniform(-10.0, 10.0));
  write_pfm(dir + "/a.pfm", field);
  Tensor back = read_pfm(dir + "/a.pfm");
  REQUIRE(back.shape == field.shape);
  CHECK(back.data == field.data);
  write_pfm(dir + "/b.pfm", back);
  CHECK(slurp(dir + "/a.pfm") == slurp(dir + "/b.pfm"));
}

TEST_CASE("save_sample/load_sample round-trips the dataset directory layout") {
  SceneSpec spec = desk_spec();
  spec.layout = Layout::boxes;
  Sample s = gen_scene(spec, 42);
  std::string dir = temp_dir("sa_sample_test");
  save_sample(dir + "/000042", s, spec);
  for (const char* name : {"left.ppm", "right.ppm", "depth.pfm", "disparity.pfm", "meta.json"})
    CHECK(std::filesystem::exists(dir + "/000042/" + name));

  Sample back = load_sample(dir + "/000042");
  CHECK(back.seed == s.seed);
  CHECK(back.calib.f == s.calib.f);
  CHECK(back.calib.b == s.calib.b);
  REQUIRE(back.gt_depth.shape == s.gt_depth.shape);
  for (size_t i = 0; i < s.gt_depth.data.size(); ++i) {
    CHECK(back.gt_depth.data[i] == static_cast<double>(static_cast<float>(s.gt_depth.data[i])));
    CHECK(back.gt_disparity.data[i] ==
          static_cast<double>(static_cast<float>(s.gt_disparity.data[i])));
  }
  for (size_t i = 0; i < s.il.data.size(); ++i)
    CHECK(back.il.data[i] == std::lround(s.il.data[i] * 255.0) / 255.0);
  CHECK_THROWS_AS(load_sample(dir + "/missing"), std::runtime_error);
}
