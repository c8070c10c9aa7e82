// Command-line entry point: dataset generation, two-stage training,
// evaluation, and a quick self-test of the numerical core.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sa/correlation.hpp"
#include "sa/finite_diff.hpp"
#include "sa/harness.hpp"
#include "sa/metrics.hpp"
#include "sa/rng.hpp"
#include "sa/scale_align.hpp"
#include "sa/synthdata.hpp"

namespace {

sa::RunConfig load_or_default(const std::string& path) {
  if (path.empty()) return sa::RunConfig{};
  return sa::load_config(path);
}

std::vector<std::string> pick_split(const std::string& data_dir, const std::string& which,
                                    uint64_t seed) {
  sa::Split sp = sa::split_dataset(data_dir, seed);
  if (which == "train") return sp.train;
  if (which == "val") return sp.val;
  std::vector<std::string> all = sp.train;
  all.insert(all.end(), sp.val.begin(), sp.val.end());
  std::sort(all.begin(), all.end());
  return all;
}

int selftest() {
  using namespace sa;
  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::printf("%-52s %s\n", what.c_str(), ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  {  // correlation volume vs brute force
    Rng rng(1);
    bool ok = true;
    for (int rep = 0; rep < 5 && ok; ++rep) {
      Tape<double> tape;
      Tensor fl({4, 8, 8}), fr({4, 8, 8});
      for (auto& v : fl.data) v = rng.uniform(-1, 1);
      for (auto& v : fr.data) v = rng.uniform(-1, 1);
      int vol = build_volume(tape, tape.leaf(fl), tape.leaf(fr), 7);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          for (int d = 0; d <= 7; ++d) {
            double ref = 0.0;
            if (j - d >= 0)
              for (int c = 0; c < 4; ++c) ref += fl.at(c, i, j) * fr.at(c, i, j - d);
            ok = ok && tape.val(vol).data[(static_cast<size_t>(i) * 8 + j) * 8 + d] == ref;
          }
    }
    check(ok, "correlation volume == brute force");
  }

  {  // exact affine recovery
    Rng rng(2);
    Tensor mono({1, 8, 8});
    for (auto& v : mono.data) v = rng.uniform(1.0, 5.0);
    Calibration calib(160.0, 0.1);
    SparseMatches ms;
    for (int k = 0; k < 20; ++k) {
      int x = rng.uniform_int(8), y = rng.uniform_int(8);
      double depth = 3.0 * mono.at(0, y, x) + 0.5;
      ms.push_back({x, y, calib.f * calib.b / depth, rng.uniform(0.2, 1.0)});
    }
    ScaleShiftFit fit = fit_scale_shift(mono, ms, calib);
    check(std::abs(fit.s - 3.0) < 1e-9 && std::abs(fit.t - 0.5) < 1e-9,
          "scale/shift fit recovers exact affine");
  }

  {  // PFM/PPM round trip
    auto dir = std::filesystem::temp_directory_path() / "sa_selftest";
    std::filesystem::create_directories(dir);
    Rng rng(3);
    Tensor f({1, 6, 10});
    for (auto& v : f.data) v = static_cast<float>(rng.uniform(-5, 5));
    write_pfm((dir / "t.pfm").string(), f);
    check(read_pfm((dir / "t.pfm").string()).data == f.data, "PFM round trip bit-exact");
  }

  {  // metrics worked examples
    Tensor gt = Tensor::full({1, 4, 4}, 2.0), mask = Tensor::full({1, 4, 4}, 1.0);
    Tensor pred = Tensor::full({1, 4, 4}, 2.2);
    MetricsReport m = compute_metrics(pred, gt, mask);
    check(std::abs(m.rmse - 0.2) < 1e-12 && std::abs(m.sq_rel - 0.02) < 1e-12,
          "metrics match the worked example");
  }

  {  // gradient spot check through a conv
    Rng rng(4);
    TensorT<double> x({2, 6, 6}), w({3, 2 * 9}), b({3});
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    for (auto& v : w.data) v = rng.uniform(-0.5, 0.5);
    auto f = [&](Tape<double>& tape) {
      int xn = tape.leaf(x, true);
      return tape.mean(tape.conv2d(xn, tape.leaf(w, false), tape.leaf(b, false), 3, 1, 1));
    };
    Tape<double> tape;
    int xn = tape.leaf(x, true);
    int loss = tape.mean(tape.conv2d(xn, tape.leaf(w, false), tape.leaf(b, false), 3, 1, 1));
    tape.backward(loss);
    double worst = 0.0;
    Rng probes(5);
    for (int k = 0; k < 10; ++k) {
      size_t idx = static_cast<size_t>(probes.uniform_int(static_cast<int>(x.data.size())));
      double eps = 1e-6, save = x.data[idx];
      auto eval = [&](double v) {
        x.data[idx] = v;
        Tape<double> t;
        int loss2 = t.mean(t.conv2d(t.leaf(x), t.leaf(w), t.leaf(b), 3, 1, 1));
        x.data[idx] = save;
        return t.val(loss2).data[0];
      };
      double num = (eval(save + eps) - eval(save - eps)) / (2 * eps);
      worst = std::max(worst, std::abs(num - tape.grad(xn).data[idx]));
    }
    (void)f;
    check(worst < 1e-6, "conv gradient finite-difference check");
  }

  std::printf("selftest: %s\n", failures == 0 ? "all checks passed" : "FAILURES");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised underwater stereo depth (desk-scale)"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_dir, ckpt_path, report_path, dump_dir;
  std::string split = "all";
  int count = -1;
  uint64_t seed = 0;
  bool seed_set = false;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out_path, "output dataset directory")->required();
  gen->add_option("--count", count, "number of scenes (overrides config)");
  gen->add_option("--seed", seed, "dataset seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });

  auto* train = app.add_subcommand("train", "run the two-stage training loop");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", ckpt_path, "output checkpoint path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--report", report_path, "output report JSON");
  eval->add_option("--dump-depth", dump_dir, "directory for depth/disparity dumps");
  eval->add_option("--split", split, "train | val | all")
      ->check(CLI::IsMember({"train", "val", "all"}));

  auto* st = app.add_subcommand("selftest", "run built-in oracle checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      sa::RunConfig cfg = load_or_default(config_path);
      int n = count > 0 ? count : cfg.data.count;
      uint64_t s = seed_set ? seed : cfg.seed;
      sa::generate_dataset(cfg.data.scene, cfg.data.randomize, out_path, n, s);
      std::cout << "wrote " << n << " scenes to " << out_path << "\n";
    } else if (train->parsed()) {
      sa::RunConfig cfg = load_or_default(config_path);
      sa::TrainResult r = sa::run_train(cfg, data_dir, ckpt_path);
      std::cout << "stage 1 losses:";
      for (double l : r.stage1_loss) std::cout << " " << l;
      std::cout << "\nstage 2 losses:";
      for (double l : r.stage2_loss) std::cout << " " << l;
      std::cout << "\ncheckpoint: " << ckpt_path << "\n";
    } else if (eval->parsed()) {
      sa::Model model = sa::load_checkpoint(ckpt_path);
      auto dirs = pick_split(data_dir, split, model.cfg.seed);
      sa::EvalReport rep = sa::run_eval(model, dirs, dump_dir);
      if (!report_path.empty()) sa::write_report(report_path, rep);
      std::cout << "scenes " << rep.scenes << " (skipped " << rep.skipped << ")\n"
                << "refined: rmse " << rep.refined.rmse << "  a1 " << rep.refined.a1 << "  epe "
                << rep.epe_refined << "\n"
                << "prior:   rmse " << rep.prior.rmse << "  a1 " << rep.prior.a1 << "  epe "
                << rep.epe_prior << "\n";
    } else if (st->parsed()) {
      return selftest();
    }
  } catch (const sa::NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
