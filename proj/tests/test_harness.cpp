#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sa/harness.hpp"

using namespace sa;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Small-but-real training setup: 64x64 scenes, focal long enough that the
// coarsest baseline still yields multi-pixel disparities.
RunConfig small_config() {
  RunConfig c = config_from_json(nlohmann::json::object());
  c.stage1_epochs = 2;
  c.stage2_epochs = 2;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.seed = 11;
  c.refiner.hidden_dim = 64;
  c.refiner.iterations = 4;
  c.data.scene.width = 64;
  c.data.scene.height = 64;
  c.data.scene.focal_px = 128.0;
  c.data.scene.z_min = 1.6;
  c.data.scene.z_max = 6.0;
  c.data.count = 32;
  return c;
}

}  // namespace

TEST_CASE("config json round trip preserves every field") {
  RunConfig c = small_config();
  c.weight_decay = 0.5;
  c.iteration_supervision = true;
  c.iteration_gamma = 0.7;
  c.lora.rank = 4;
  c.lora.kappa_max = 0.02;
  c.lora.dense_fraction = 0.3;
  c.lora.lambda = 2e-4;
  c.loss.lambda1 = 0.11;
  c.align.sigma_c = 0.9;
  c.data.scene.layout = Layout::boxes;
  c.data.scene.baseline_m = 0.20;
  c.data.randomize = false;
  RunConfig d = config_from_json(config_to_json(c));
  CHECK(d.stage1_epochs == c.stage1_epochs);
  CHECK(d.stage2_epochs == c.stage2_epochs);
  CHECK(d.batch_size == c.batch_size);
  CHECK(d.learning_rate == c.learning_rate);
  CHECK(d.weight_decay == c.weight_decay);
  CHECK(d.iteration_supervision == c.iteration_supervision);
  CHECK(d.iteration_gamma == c.iteration_gamma);
  CHECK(d.seed == c.seed);
  CHECK(d.refiner.hidden_dim == c.refiner.hidden_dim);
  CHECK(d.refiner.iterations == c.refiner.iterations);
  CHECK(d.lora.rank == c.lora.rank);
  CHECK(d.lora.kappa_max == c.lora.kappa_max);
  CHECK(d.lora.dense_fraction == c.lora.dense_fraction);
  CHECK(d.lora.lambda == c.lora.lambda);
  CHECK(d.loss.lambda1 == c.loss.lambda1);
  CHECK(d.align.sigma_c == c.align.sigma_c);
  CHECK(d.data.scene.layout == Layout::boxes);
  CHECK(d.data.scene.baseline_m == c.data.scene.baseline_m);
  CHECK(d.data.scene.focal_px == c.data.scene.focal_px);
  CHECK(d.data.count == c.data.count);
  CHECK(d.data.randomize == c.data.randomize);
}

TEST_CASE("config parsing rejects unknown keys at every level") {
  CHECK_THROWS_AS(config_from_json({{"stage_one_epochs", 3}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"refiner", {{"hidden", 64}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json({{"data", {{"zmin", 1.0}}}}), std::invalid_argument);
  CHECK_NOTHROW(config_from_json({{"refiner", {{"hidden_dim", 64}}}}));
}

TEST_CASE("load_config reads a file and applies overrides") {
  std::string dir = temp_dir("sa_h_cfg");
  {
    std::ofstream f(dir + "/c.json");
    f << R"({"seed": 42, "data": {"width": 64, "height": 32}})";
  }
  RunConfig c = load_config(dir + "/c.json");
  CHECK(c.seed == 42);
  CHECK(c.data.scene.width == 64);
  CHECK(c.data.scene.height == 32);
  CHECK(c.stage1_epochs == 20);  // untouched default
}

TEST_CASE("pick_d_max rounds the half-width up to a multiple of 8") {
  CHECK(pick_d_max(160) == 23);  // w/4 = 40 -> 24-long volume
  CHECK(pick_d_max(64) == 7);    // w/4 = 16 -> 8-long volume
  CHECK(pick_d_max(256) == 31);  // w/4 = 64 -> 32-long volume
  CHECK(pick_d_max(128) == 15);
}

// ---- metrics: worked examples checked against hand arithmetic ----

TEST_CASE("metrics: perfect prediction scores zero error and unit accuracy") {
  Tensor gt({1, 2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  Tensor mask({1, 2, 3}, {1, 1, 1, 1, 1, 1});
  MetricsReport r = compute_metrics(gt, gt, mask);
  CHECK(std::fabs(r.rel) < 1e-12);
  CHECK(std::fabs(r.sq_rel) < 1e-12);
  CHECK(std::fabs(r.rmse) < 1e-12);
  CHECK(std::fabs(r.log_rmse) < 1e-12);
  CHECK(r.a1 == 1.0);
  CHECK(r.a2 == 1.0);
  CHECK(r.a3 == 1.0);
}

TEST_CASE("metrics: uniform 1.3x overprediction") {
  // rel = |1.3g - g|/g = 0.3; max(ratio, 1/ratio) = 1.3 which fails the 1.25
  // threshold but passes 1.25^2; log rmse = log(1.3).
  Tensor gt({1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  Tensor pred({1, 1, 4}, {1.3, 2.6, 3.9, 5.2});
  Tensor mask({1, 1, 4}, {1, 1, 1, 1});
  MetricsReport r = compute_metrics(pred, gt, mask);
  CHECK(std::fabs(r.rel - 0.3) < 1e-12);
  CHECK(r.a1 == 0.0);
  CHECK(r.a2 == 1.0);
  CHECK(r.a3 == 1.0);
  CHECK(std::fabs(r.log_rmse - std::log(1.3)) < 1e-12);
}

TEST_CASE("metrics: single pixel gt 2.0 pred 2.2") {
  Tensor gt({1, 1, 1}, {2.0});
  Tensor pred({1, 1, 1}, {2.2});
  Tensor mask({1, 1, 1}, {1.0});
  MetricsReport r = compute_metrics(pred, gt, mask);
  CHECK(std::fabs(r.rel - 0.1) < 1e-12);
  CHECK(std::fabs(r.sq_rel - 0.02) < 1e-12);
  CHECK(std::fabs(r.rmse - 0.2) < 1e-12);
  CHECK(r.a1 == 1.0);
}

TEST_CASE("metrics: mask selects pixels, empty mask throws") {
  Tensor gt({1, 1, 4}, {1.0, 2.0, 0.0, 4.0});  // zero gt hidden by the mask
  Tensor pred({1, 1, 4}, {1.1, 2.0, 9.0, 4.0});
  Tensor mask({1, 1, 4}, {1, 1, 0, 1});
  MetricsReport r = compute_metrics(pred, gt, mask);
  // only the first pixel is wrong: rel = mean(0.1, 0, 0)
  CHECK(std::fabs(r.rel - 0.1 / 3.0) < 1e-12);
  CHECK(std::fabs(r.valid_pixel_fraction - 0.75) < 1e-12);

  Tensor none({1, 1, 4}, {0, 0, 0, 0});
  CHECK_THROWS(compute_metrics(pred, gt, none));
  // gt <= 0 on a masked pixel is an error
  Tensor all({1, 1, 4}, {1, 1, 1, 1});
  CHECK_THROWS(compute_metrics(pred, gt, all));
}

TEST_CASE("split_dataset: deterministic disjoint 80/20 split") {
  std::string dir = temp_dir("sa_h_split");
  for (int i = 0; i < 10; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%06d", i);
    fs::create_directories(fs::path(dir) / name);
    std::ofstream(fs::path(dir) / name / "meta.json") << "{}";
  }
  Split s1 = split_dataset(dir, 5);
  Split s2 = split_dataset(dir, 5);
  CHECK(s1.train.size() == 8);
  CHECK(s1.val.size() == 2);
  CHECK(s1.train == s2.train);
  CHECK(s1.val == s2.val);
  std::vector<std::string> all = s1.train;
  all.insert(all.end(), s1.val.begin(), s1.val.end());
  std::sort(all.begin(), all.end());
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  CHECK(all.size() == 10);

  Split s3 = split_dataset(dir, 6);
  CHECK(s1.train != s3.train);  // seed changes the shuffle
}

TEST_CASE("checkpoint save/load round trip is byte identical") {
  RunConfig c = small_config();
  Model m = Model::init(c);
  std::string dir = temp_dir("sa_h_ckpt");
  save_checkpoint(dir + "/a.json", m, "stage2");
  Model m2 = load_checkpoint(dir + "/a.json");
  save_checkpoint(dir + "/b.json", m2, "stage2");
  CHECK(slurp(dir + "/a.json") == slurp(dir + "/b.json"));

  // a missing parameter is a load error
  nlohmann::json j;
  std::ifstream(dir + "/a.json") >> j;
  j["params"].erase(j["params"].begin().key());
  std::ofstream(dir + "/c.json") << j;
  CHECK_THROWS(load_checkpoint(dir + "/c.json"));
}

TEST_CASE("training improves on the aligned mono prior and is reproducible") {
  RunConfig cfg = small_config();
  std::string data = temp_dir("sa_h_data");
  generate_dataset(cfg.data.scene, cfg.data.randomize, data, cfg.data.count, cfg.seed);

  std::string run = temp_dir("sa_h_run");
  TrainResult tr = run_train(cfg, data, run + "/ckpt.json");
  REQUIRE(tr.stage1_loss.size() == 2);
  REQUIRE(tr.stage2_loss.size() == 2);
  for (double l : tr.stage1_loss) CHECK(std::isfinite(l));
  for (double l : tr.stage2_loss) CHECK(std::isfinite(l));

  Model m = load_checkpoint(run + "/ckpt.json");
  Split split = split_dataset(data, cfg.seed);
  EvalReport rep = run_eval(m, split.val);
  CHECK(rep.scenes == static_cast<int>(split.val.size()));
  CHECK(rep.epe_refined < rep.epe_prior);
  CHECK(rep.refined.rmse < rep.prior.rmse);

  // identical config + data -> byte-identical checkpoints
  run_train(cfg, data, run + "/ckpt2.json");
  CHECK(slurp(run + "/ckpt.json") == slurp(run + "/ckpt2.json"));
  CHECK(slurp(run + "/ckpt.json.stage1") == slurp(run + "/ckpt2.json.stage1"));

  // report serialization is stable too
  write_report(run + "/r1.json", rep);
  write_report(run + "/r2.json", run_eval(m, split.val));
  CHECK(slurp(run + "/r1.json") == slurp(run + "/r2.json"));
}

TEST_CASE("dense_fraction 1.0 disables sparsification: full effective rank") {
  RunConfig cfg = small_config();
  Model m = Model::init(cfg);
  m.enc.set_schedule(500, 1.0);  // the whole run stays in the dense stage
  Rng rng(31);
  for (auto& layer : m.enc.trunk) {
    TensorF g({cfg.lora.rank});
    for (int s = 0; s < 500; ++s) {
      CHECK_FALSE(layer.ad.in_sparse_stage());  // every update happens dense
      for (auto& v : g.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      layer.ad.proximal_update(g, 1e-2);
    }
    CHECK(layer.ad.effective_rank() == cfg.lora.rank);
  }
}

TEST_CASE("NonFiniteLoss carries the offending scene seed") {
  NonFiniteLoss e(123, "loss went NaN");
  CHECK(e.scene_seed == 123);
  CHECK(std::string(e.what()) == "loss went NaN");
  const std::runtime_error& base = e;  // catchable as runtime_error
  CHECK(std::string(base.what()) == "loss went NaN");
}
