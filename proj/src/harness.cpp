#include "sa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "sa/correlation.hpp"
#include "sa/rng.hpp"
#include "sa/serialize.hpp"

namespace sa {
namespace {

TensorF to_f(const Tensor& t) {
  TensorF o;
  o.shape = t.shape;
  o.data.assign(t.data.begin(), t.data.end());
  return o;
}

Tensor to_d(const TensorF& t) {
  Tensor o;
  o.shape = t.shape;
  o.data.assign(t.data.begin(), t.data.end());
  return o;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace

// ---- configuration ----------------------------------------------------------

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  reject_unknown(j,
                 {"stage1_epochs", "stage2_epochs", "batch_size", "learning_rate",
                  "weight_decay", "iteration_supervision", "iteration_gamma", "seed", "refiner",
                  "encoder", "lora", "loss", "align", "data"},
                 "root");
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.iteration_supervision = j.value("iteration_supervision", c.iteration_supervision);
  c.iteration_gamma = j.value("iteration_gamma", c.iteration_gamma);
  c.seed = j.value("seed", c.seed);

  if (j.contains("refiner")) {
    const auto& r = j.at("refiner");
    reject_unknown(r, {"gru_layers", "hidden_dim", "iterations", "lookup_radius", "corr_ch",
                       "disp_ch", "fuse_ch", "update_deadband", "max_step", "step_decay"},
                   "refiner");
    c.refiner.gru_layers = r.value("gru_layers", c.refiner.gru_layers);
    c.refiner.hidden_dim = r.value("hidden_dim", c.refiner.hidden_dim);
    c.refiner.iterations = r.value("iterations", c.refiner.iterations);
    c.refiner.lookup_radius = r.value("lookup_radius", c.refiner.lookup_radius);
    c.refiner.corr_ch = r.value("corr_ch", c.refiner.corr_ch);
    c.refiner.disp_ch = r.value("disp_ch", c.refiner.disp_ch);
    c.refiner.fuse_ch = r.value("fuse_ch", c.refiner.fuse_ch);
    c.refiner.update_deadband = r.value("update_deadband", c.refiner.update_deadband);
    c.refiner.max_step = r.value("max_step", c.refiner.max_step);
    c.refiner.step_decay = r.value("step_decay", c.refiner.step_decay);
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    reject_unknown(e, {"depth_min", "depth_max"}, "encoder");
    c.encoder.depth_min = e.value("depth_min", c.encoder.depth_min);
    c.encoder.depth_max = e.value("depth_max", c.encoder.depth_max);
  }
  if (j.contains("lora")) {
    const auto& l = j.at("lora");
    reject_unknown(l, {"rank", "kappa_max", "dense_fraction", "lambda"}, "lora");
    c.lora.rank = l.value("rank", c.lora.rank);
    c.lora.kappa_max = l.value("kappa_max", c.lora.kappa_max);
    c.lora.dense_fraction = l.value("dense_fraction", c.lora.dense_fraction);
    c.lora.lambda = l.value("lambda", c.lora.lambda);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    reject_unknown(l, {"alpha_photo", "lambda1", "lambda3", "lambda4"}, "loss");
    c.loss.alpha_photo = l.value("alpha_photo", c.loss.alpha_photo);
    c.loss.lambda1 = l.value("lambda1", c.loss.lambda1);
    c.loss.lambda3 = l.value("lambda3", c.loss.lambda3);
    c.loss.lambda4 = l.value("lambda4", c.loss.lambda4);
  }
  if (j.contains("align")) {
    const auto& a = j.at("align");
    reject_unknown(a, {"tau", "sigma_d", "sigma_c", "match_stride"}, "align");
    c.align.tau = a.value("tau", c.align.tau);
    c.align.sigma_d = a.value("sigma_d", c.align.sigma_d);
    c.align.sigma_c = a.value("sigma_c", c.align.sigma_c);
    c.align.match_stride = a.value("match_stride", c.align.match_stride);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d,
                   {"layout", "z_min", "z_max", "octaves", "baseline_m", "focal_px", "width",
                    "height", "beta", "veil", "particle_density", "count", "randomize"},
                   "data");
    SceneSpec& s = c.data.scene;
    if (d.contains("layout")) s.layout = layout_from_string(d.at("layout").get<std::string>());
    s.z_min = d.value("z_min", s.z_min);
    s.z_max = d.value("z_max", s.z_max);
    s.octaves = d.value("octaves", s.octaves);
    s.baseline_m = d.value("baseline_m", s.baseline_m);
    s.focal_px = d.value("focal_px", s.focal_px);
    s.width = d.value("width", s.width);
    s.height = d.value("height", s.height);
    if (d.contains("beta")) s.water.beta = d.at("beta").get<std::array<double, 3>>();
    if (d.contains("veil")) s.water.veil = d.at("veil").get<std::array<double, 3>>();
    s.water.particle_density = d.value("particle_density", s.water.particle_density);
    c.data.count = d.value("count", c.data.count);
    c.data.randomize = d.value("randomize", c.data.randomize);
  }

  if (c.stage1_epochs < 1 || c.stage2_epochs < 1)
    throw std::invalid_argument("config: epochs must be >= 1");
  if (c.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (c.learning_rate <= 0) throw std::invalid_argument("config: learning_rate must be > 0");
  return c;
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["stage1_epochs"] = c.stage1_epochs;
  j["stage2_epochs"] = c.stage2_epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["iteration_supervision"] = c.iteration_supervision;
  j["iteration_gamma"] = c.iteration_gamma;
  j["seed"] = c.seed;
  j["refiner"] = {{"gru_layers", c.refiner.gru_layers},   {"hidden_dim", c.refiner.hidden_dim},
                  {"iterations", c.refiner.iterations},   {"lookup_radius", c.refiner.lookup_radius},
                  {"corr_ch", c.refiner.corr_ch},         {"disp_ch", c.refiner.disp_ch},
                  {"fuse_ch", c.refiner.fuse_ch},         {"update_deadband", c.refiner.update_deadband},
                  {"max_step", c.refiner.max_step},       {"step_decay", c.refiner.step_decay}};
  j["encoder"] = {{"depth_min", c.encoder.depth_min}, {"depth_max", c.encoder.depth_max}};
  j["lora"] = {{"rank", c.lora.rank},
               {"kappa_max", c.lora.kappa_max},
               {"dense_fraction", c.lora.dense_fraction},
               {"lambda", c.lora.lambda}};
  j["loss"] = {{"alpha_photo", c.loss.alpha_photo},
               {"lambda1", c.loss.lambda1},
               {"lambda3", c.loss.lambda3},
               {"lambda4", c.loss.lambda4}};
  j["align"] = {{"tau", c.align.tau},
                {"sigma_d", c.align.sigma_d},
                {"sigma_c", c.align.sigma_c},
                {"match_stride", c.align.match_stride}};
  j["data"] = {{"layout", layout_to_string(c.data.scene.layout)},
               {"z_min", c.data.scene.z_min},
               {"z_max", c.data.scene.z_max},
               {"octaves", c.data.scene.octaves},
               {"baseline_m", c.data.scene.baseline_m},
               {"focal_px", c.data.scene.focal_px},
               {"width", c.data.scene.width},
               {"height", c.data.scene.height},
               {"beta", c.data.scene.water.beta},
               {"veil", c.data.scene.water.veil},
               {"particle_density", c.data.scene.water.particle_density},
               {"count", c.data.count},
               {"randomize", c.data.randomize}};
  return j;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_config: cannot open " + path);
  return config_from_json(nlohmann::json::parse(f));
}

// ---- model ------------------------------------------------------------------

Model Model::init(const RunConfig& cfg) {
  Model m;
  m.cfg = cfg;
  EncoderConfig ecfg = cfg.encoder;
  ecfg.rank = cfg.lora.rank;
  ecfg.hidden = cfg.refiner.hidden_dim;  // context channels feed the GRU hidden
  Rng rng(cfg.seed);
  m.enc = Encoder<float>::init(ecfg, rng);
  m.ref = Refiner<float>::init(cfg.refiner, rng);
  for (auto& l : m.enc.trunk) {
    l.ad.kappa_max = static_cast<float>(cfg.lora.kappa_max);
    l.ad.lambda_l1 = static_cast<float>(cfg.lora.lambda);
  }
  return m;
}

ParamList<float> Model::params() {
  ParamList<float> out;
  enc.collect_params(out, "enc");
  ref.collect_params(out, "ref");
  return out;
}

// ---- checkpoints -------------------------------------------------------------

void save_checkpoint(const std::string& path, Model& model, const std::string& phase) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["phase"] = phase;
  j["config"] = config_to_json(model.cfg);
  nlohmann::ordered_json params;
  for (const auto& p : model.params()) params[p.name] = tensor_to_json(*p.tensor);
  j["params"] = std::move(params);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << j.dump(1) << "\n";
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported format version");
  Model m = Model::init(config_from_json(j.at("config")));
  const auto& params = j.at("params");
  for (auto& p : m.params()) {
    if (!params.contains(p.name))
      throw std::runtime_error("load_checkpoint: missing parameter " + p.name);
    TensorF t = tensor_from_json<float>(params.at(p.name));
    if (t.shape != p.tensor->shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name);
    *p.tensor = std::move(t);
  }
  return m;
}

// ---- dataset -----------------------------------------------------------------

void generate_dataset(const SceneSpec& base, bool randomize, const std::string& out_dir,
                      int count, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
  std::filesystem::create_directories(out_dir);
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    uint64_t scene_seed = rng.fork(static_cast<uint64_t>(i));
    SceneSpec spec = randomize ? randomize_spec(base, scene_seed) : base;
    Sample s = gen_scene(spec, scene_seed);
    char name[16];
    std::snprintf(name, sizeof(name), "%06d", i);
    save_sample(out_dir + "/" + name, s, spec);
  }
}

Split split_dataset(const std::string& data_dir, uint64_t seed) {
  std::vector<std::string> dirs;
  if (!std::filesystem::is_directory(data_dir))
    throw std::runtime_error("split_dataset: not a directory: " + data_dir);
  for (const auto& e : std::filesystem::directory_iterator(data_dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json"))
      dirs.push_back(e.path().string());
  if (dirs.empty()) throw std::runtime_error("split_dataset: no samples in " + data_dir);
  std::sort(dirs.begin(), dirs.end());
  Rng rng(seed ^ 0x517ce7ull);
  for (size_t i = dirs.size(); i > 1; --i)
    std::swap(dirs[i - 1], dirs[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
  size_t ntrain = (dirs.size() * 4 + 4) / 5;  // 80%, rounded
  ntrain = std::min(std::max<size_t>(ntrain, 1), dirs.size() - (dirs.size() > 1 ? 1 : 0));
  Split sp;
  sp.train.assign(dirs.begin(), dirs.begin() + static_cast<long>(ntrain));
  sp.val.assign(dirs.begin() + static_cast<long>(ntrain), dirs.end());
  return sp;
}

int pick_d_max(int width) {
  int w4 = width / 4;
  int len = ((w4 / 2 + 7) / 8) * 8;  // round W'/2 up: volume length divisible by 8
  if (len >= w4) len = (w4 - 1) / 8 * 8;  // build_volume needs d_max < W'
  if (len < 8) throw std::invalid_argument("pick_d_max: image too narrow");
  return len - 1;
}

// ---- forward passes ----------------------------------------------------------

namespace {

struct SceneData {
  std::string dir;
  TensorF il, ir;
  Tensor il_d;
  Calibration calib{160.0, 0.1};
  uint64_t seed = 0;
};

SceneData load_scene(const std::string& dir) {
  Sample s = load_sample(dir);
  SceneData d;
  d.dir = dir;
  d.il = to_f(s.il);
  d.ir = to_f(s.ir);
  d.il_d = s.il;
  d.calib = s.calib;
  d.seed = s.seed;
  return d;
}

struct Prior {
  TensorF d_full;     // full-resolution disparity
  TensorF d_quarter;  // 1/4 resolution, in quarter-res pixel units
  Tensor depth_full;  // anchor-refined depth the refiner is initialized from
  Tensor depth_aligned;  // scale-aligned mono (before bilateral refinement)
};

// Mono depth -> sparse anchors at 1/4 resolution -> scale alignment at full
// resolution. No gradients flow through the prior.
Prior compute_prior(const Model& model, const SceneData& sc) {
  const RunConfig& cfg = model.cfg;
  Tape<float> tape;
  int il = tape.leaf(sc.il), ir = tape.leaf(sc.ir);
  auto pl = model.enc.extract_pyramid(tape, il);
  auto pr = model.enc.extract_pyramid(tape, ir);
  int depth_node = model.enc.mono_depth(tape, pl);
  Tensor mono = to_d(tape.val(depth_node));

  int d_max4 = pick_d_max(sc.il.shape[2]);
  SparseMatches matches =
      sparse_match(to_d(tape.val(pl.l4)), to_d(tape.val(pr.l4)), d_max4, cfg.align.match_stride);
  for (auto& m : matches) {  // level-4 -> full-resolution coordinates
    m.x *= 4;
    m.y *= 4;
    m.d *= 4.0;
  }

  AlignmentResult ar = align_scale(mono, matches, sc.il_d, sc.calib, cfg.align);
  Prior p;
  p.depth_full = ar.depth_refined;
  p.depth_aligned = ar.depth_0;
  for (auto& z : p.depth_full.data)
    z = std::clamp(z, cfg.encoder.depth_min, cfg.encoder.depth_max);
  for (auto& z : p.depth_aligned.data)
    z = std::clamp(z, cfg.encoder.depth_min, cfg.encoder.depth_max);
  p.d_full = to_f(disparity_depth_convert(p.depth_full, sc.calib));

  int H = p.d_full.shape[1], W = p.d_full.shape[2];
  p.d_quarter = TensorF({1, H / 4, W / 4});
  for (int i = 0; i < H / 4; ++i)
    for (int j = 0; j < W / 4; ++j) {
      float acc = 0.0f;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) acc += p.d_full.at(0, 4 * i + a, 4 * j + b);
      p.d_quarter.at(0, i, j) = acc / 64.0f;  // mean / 4: quarter-res units
    }
  return p;
}

// Stage-1 objective: warp the right image with the mono disparity, composite
// occlusions, photometric + smoothness.
int mono_loss(Tape<float>& tape, const Model& model, const SceneData& sc, Binds<float>* binds,
              bool trainable) {
  int il = tape.leaf(sc.il), ir = tape.leaf(sc.ir);
  auto pl = model.enc.extract_pyramid(tape, il, binds, trainable);
  int depth = model.enc.mono_depth(tape, pl, binds, trainable);
  int num = tape.leaf(
      TensorF::full(tape.val(depth).shape, static_cast<float>(sc.calib.f * sc.calib.b)));
  int disp = tape.div(num, depth);
  TensorF valid;
  int rec = warp_horizontal(tape, ir, disp, &valid);
  auto [comp, masks] = occlusion_composite(tape, il, rec, tape.val(disp), valid);
  int l_rec = photometric(tape, rec, comp, static_cast<float>(model.cfg.loss.alpha_photo));
  int l_sm = smoothness(tape, disp, il);
  return total_mono(tape, l_rec, l_sm, model.cfg.loss);
}

// Stage-2 objective on the refined disparity, guided by the cached prior.
int stereo_loss(Tape<float>& tape, const Model& model, const SceneData& sc, const Prior& prior,
                Binds<float>* binds, bool trainable, float lora_l1) {
  const RunConfig& cfg = model.cfg;
  int il = tape.leaf(sc.il), ir = tape.leaf(sc.ir);
  auto pl = model.enc.extract_pyramid(tape, il, binds, trainable);
  auto pr = model.enc.extract_pyramid(tape, ir, binds, trainable);
  auto ctx = model.enc.combined_context(tape, il, pl, binds, trainable);
  int vol = build_volume(tape, pl.l4, pr.l4, pick_d_max(sc.il.shape[2]));
  auto pyr = build_pyramid(tape, vol);
  int d_init = tape.leaf(prior.d_quarter);
  auto res = model.ref.iterate(tape, pyr, ctx, d_init, sc.calib, binds, trainable,
                               cfg.iteration_supervision);

  // The occlusion composite is built from the current prediction (detached),
  // not the prior: an anchor-sparse prior can carry bogus occlusion flags that
  // substitute its own warp as the photometric target, which rewards copying
  // the prior verbatim. Deriving visibility from the prediction keeps the
  // target anchored to the left image wherever the estimate says both views
  // see the surface. Guidance still pulls toward the anchor-refined prior.
  int dl = tape.leaf(prior.d_full);
  TensorF d_pred_det = tape.val(res.d_full);
  int dt = tape.leaf(d_pred_det);
  TensorF valid_m;
  int rec_m = warp_horizontal(tape, ir, dt, &valid_m);
  auto [comp, masks] = occlusion_composite(tape, il, rec_m, d_pred_det, valid_m);

  auto stereo_term = [&](int d_node) {
    TensorF valid_s;
    int rec_s = warp_horizontal(tape, ir, d_node, &valid_s);
    int l_rec = photometric(tape, rec_s, comp, static_cast<float>(cfg.loss.alpha_photo));
    int l_sm = smoothness(tape, d_node, il);
    int l_g = guidance(tape, d_node, dl, masks.m_out);
    return total_stereo(tape, l_rec, l_sm, l_g, cfg.loss, 0.0f);
  };

  int loss;
  if (cfg.iteration_supervision) {
    int n = static_cast<int>(res.full_res.size());
    loss = -1;
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
      double w = std::pow(cfg.iteration_gamma, n - 1 - i);
      wsum += w;
      int term = tape.scale(stereo_term(res.full_res[static_cast<size_t>(i)]),
                            static_cast<float>(w));
      loss = loss < 0 ? term : tape.add(loss, term);
    }
    loss = tape.scale(loss, static_cast<float>(1.0 / wsum));
  } else {
    loss = stereo_term(res.d_full);
  }
  if (lora_l1 != 0.0f) loss = tape.add_scalar(loss, lora_l1);
  return loss;
}

// Decoupled weight decay Adam. Importance vectors are excluded (proximal rule).
struct AdamW {
  double lr, wd;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<TensorF> m, v;

  AdamW(double lr_, double wd_, const ParamList<float>& params) : lr(lr_), wd(wd_) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor->shape);
      v.emplace_back(p.tensor->shape);
    }
  }

  void step(const ParamList<float>& params, const std::vector<TensorF>& grads) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, t), bc2 = 1.0 - std::pow(beta2, t);
    for (size_t k = 0; k < params.size(); ++k) {
      if (params[k].importance) continue;
      bool decay = params[k].name.find(".trunk") == std::string::npos;
      TensorF& p = *params[k].tensor;
      const TensorF& g = grads[k];
      for (size_t i = 0; i < p.data.size(); ++i) {
        double gi = g.data.empty() ? 0.0 : static_cast<double>(g.data[i]);
        double mi = beta1 * m[k].data[i] + (1.0 - beta1) * gi;
        double vi = beta2 * v[k].data[i] + (1.0 - beta2) * gi * gi;
        m[k].data[i] = static_cast<float>(mi);
        v[k].data[i] = static_cast<float>(vi);
        double upd = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        if (decay) upd += wd * p.data[i];
        p.data[i] = static_cast<float>(p.data[i] - lr * upd);
      }
    }
  }
};

std::vector<size_t> epoch_order(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
  return order;
}

}  // namespace

// ---- training ----------------------------------------------------------------

TrainResult run_train(const RunConfig& cfg, const std::string& data_dir,
                      const std::string& ckpt_path) {
  Model model = Model::init(cfg);
  Split split = split_dataset(data_dir, cfg.seed);

  std::vector<SceneData> train;
  train.reserve(split.train.size());
  for (const auto& d : split.train) train.push_back(load_scene(d));
  const size_t n = train.size();
  const size_t bs = static_cast<size_t>(cfg.batch_size);
  const int steps_per_epoch = static_cast<int>((n + bs - 1) / bs);

  TrainResult result;
  Rng order_rng(Rng(cfg.seed).fork(11));

  // Collect the LoRA adapters once; their importance vectors take the proximal
  // update instead of Adam.
  std::vector<LoraAdapter<float>*> adapters;
  for (auto& l : model.enc.trunk) adapters.push_back(&l.ad);
  auto adapter_of = [&](const TensorF* w) -> LoraAdapter<float>* {
    for (auto* a : adapters)
      if (&a->w == w) return a;
    return nullptr;
  };

  auto run_stage = [&](int epochs, const ParamList<float>& params, bool stage2,
                       const std::vector<Prior>& priors, std::vector<double>& losses) {
    AdamW opt(cfg.learning_rate, cfg.weight_decay, params);
    for (int epoch = 0; epoch < epochs; ++epoch) {
      auto order = epoch_order(n, order_rng);
      double epoch_loss = 0.0;
      for (size_t b0 = 0; b0 < n; b0 += bs) {
        size_t b1 = std::min(n, b0 + bs);
        std::vector<TensorF> grads(params.size());
        for (size_t k = 0; k < params.size(); ++k) grads[k] = TensorF(params[k].tensor->shape);
        for (size_t bi = b0; bi < b1; ++bi) {
          const SceneData& sc = train[order[bi]];
          Tape<float> tape;
          Binds<float> binds;
          int loss_node = -1;
          try {
            float l1 = 0.0f;
            if (stage2)
              for (auto* a : adapters)
                if (a->in_sparse_stage()) l1 += a->l1_penalty();
            loss_node = stage2 ? stereo_loss(tape, model, sc, priors[order[bi]], &binds, true, l1)
                               : mono_loss(tape, model, sc, &binds, true);
          } catch (const std::runtime_error& e) {
            throw NonFiniteLoss(sc.seed, std::string("training forward failed: ") + e.what() +
                                             " (scene seed " + std::to_string(sc.seed) + ")");
          }
          float lv = tape.val(loss_node).data[0];
          if (!std::isfinite(lv))
            throw NonFiniteLoss(sc.seed, "non-finite loss at scene seed " + std::to_string(sc.seed));
          epoch_loss += lv;
          tape.backward(loss_node);
          for (size_t k = 0; k < params.size(); ++k) {
            int node = binds.node_of(params[k].tensor);
            if (node < 0) continue;
            const TensorF& g = tape.grad(node);
            if (g.data.size() != grads[k].data.size()) continue;
            for (size_t i = 0; i < g.data.size(); ++i) grads[k].data[i] += g.data[i];
          }
        }
        float inv = 1.0f / static_cast<float>(b1 - b0);
        for (auto& g : grads)
          for (auto& v : g.data) v *= inv;
        opt.step(params, grads);
        for (size_t k = 0; k < params.size(); ++k) {
          if (!params[k].importance) continue;
          if (auto* a = adapter_of(params[k].tensor))
            a->proximal_update(grads[k], static_cast<float>(cfg.learning_rate));
        }
      }
      losses.push_back(epoch_loss / static_cast<double>(n));
    }
  };

  // ---- stage 1: LoRA + mono head on the mono objective ----
  model.enc.set_schedule(cfg.stage1_epochs * steps_per_epoch, cfg.lora.dense_fraction);
  ParamList<float> all = model.params();
  ParamList<float> st1;
  for (const auto& p : all)
    if (p.trainable &&
        (p.name.rfind("enc.trunk", 0) == 0 || p.name.rfind("enc.m", 0) == 0))
      st1.push_back(p);
  run_stage(cfg.stage1_epochs, st1, false, {}, result.stage1_loss);
  model.enc.merge_all();
  save_checkpoint(ckpt_path + ".stage1", model, "stage1");

  // ---- cached priors from the merged stage-1 encoder ----
  std::vector<Prior> priors;
  priors.reserve(n);
  for (const auto& sc : train) priors.push_back(compute_prior(model, sc));

  // ---- stage 2: fresh adapters + refiner + context on the stereo objective ----
  Rng rearm(Rng(cfg.seed).fork(12));
  for (auto* a : adapters) a->reinit(rearm);
  model.enc.set_schedule(cfg.stage2_epochs * steps_per_epoch, cfg.lora.dense_fraction);
  all = model.params();
  ParamList<float> st2;
  for (const auto& p : all)
    if (p.trainable && (p.name.rfind("enc.trunk", 0) == 0 ||
                        p.name.rfind("enc.align", 0) == 0 || p.name.rfind("enc.cnn", 0) == 0 ||
                        p.name.rfind("ref.", 0) == 0))
      st2.push_back(p);
  run_stage(cfg.stage2_epochs, st2, true, priors, result.stage2_loss);
  model.enc.merge_all();
  save_checkpoint(ckpt_path, model, "stage2");
  return result;
}

// ---- evaluation ----------------------------------------------------------------

namespace {

double mean_abs_diff(const Tensor& a, const Tensor& b, const Tensor& mask) {
  double s = 0.0;
  double n = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (mask.data[i] == 0.0) continue;
    s += std::abs(a.data[i] - b.data[i]);
    n += 1.0;
  }
  return s / n;
}

// Blue -> cyan -> yellow -> red ramp for disparity previews.
void write_colorized(const std::string& path, const Tensor& field) {
  double lo = field.data[0], hi = field.data[0];
  for (double v : field.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span = std::max(hi - lo, 1e-12);
  int H = field.shape[1], W = field.shape[2];
  Tensor img({3, H, W});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double t = (field.at(0, i, j) - lo) / span;
      img.at(0, i, j) = std::clamp(1.5 - std::abs(4.0 * t - 3.0), 0.0, 1.0);
      img.at(1, i, j) = std::clamp(1.5 - std::abs(4.0 * t - 2.0), 0.0, 1.0);
      img.at(2, i, j) = std::clamp(1.5 - std::abs(4.0 * t - 1.0), 0.0, 1.0);
    }
  write_ppm(path, img);
}

}  // namespace

EvalReport run_eval(const Model& model, const std::vector<std::string>& scene_dirs,
                    const std::string& dump_dir) {
  if (scene_dirs.empty()) throw std::invalid_argument("run_eval: empty dataset");
  if (!dump_dir.empty()) std::filesystem::create_directories(dump_dir);

  EvalReport rep;
  for (const auto& dir : scene_dirs) {
    if (!std::filesystem::exists(dir + "/depth.pfm") ||
        !std::filesystem::exists(dir + "/disparity.pfm")) {
      std::cerr << "warning: skipping " << dir << " (missing ground truth)\n";
      ++rep.skipped;
      continue;
    }
    Sample s = load_sample(dir);
    SceneData sc;
    sc.dir = dir;
    sc.il = to_f(s.il);
    sc.ir = to_f(s.ir);
    sc.il_d = s.il;
    sc.calib = s.calib;
    sc.seed = s.seed;

    Prior prior = compute_prior(model, sc);

    Tape<float> tape;
    int il = tape.leaf(sc.il), ir = tape.leaf(sc.ir);
    auto pl = model.enc.extract_pyramid(tape, il);
    auto pr = model.enc.extract_pyramid(tape, ir);
    auto ctx = model.enc.combined_context(tape, il, pl);
    int vol = build_volume(tape, pl.l4, pr.l4, pick_d_max(sc.il.shape[2]));
    auto pyr = build_pyramid(tape, vol);
    int d_init = tape.leaf(prior.d_quarter);
    auto res =
        model.ref.iterate(tape, pyr, ctx, d_init, sc.calib, nullptr, false, /*full_res=*/true);

    Tensor d_pred = to_d(tape.val(res.d_full));
    Tensor depth_pred = to_d(tape.val(res.depth_full));
    // The reported baseline is the scale-aligned mono prior (global scale /
    // shift correction only); the anchor-refined map is the refiner's
    // initialization, not the mono prior itself.
    Tensor d_prior = disparity_depth_convert(prior.depth_aligned, sc.calib);

    // Standard non-occluded ("noc") evaluation: pixels hidden in the right
    // view have no photometric evidence, so they are excluded via the exact
    // ground-truth visibility mask. That includes pixels whose right-view
    // projection x - d falls outside the image: the z-buffer test cannot
    // flag them, but they are just as invisible to the second camera.
    Tensor mask = occlusion_mask(s.gt_disparity);
    for (int i = 0; i < mask.shape[1]; ++i)
      for (int j = 0; j < mask.shape[2]; ++j)
        if (j - s.gt_disparity.at(0, i, j) < 0.0) mask.at(0, i, j) = 0.0;
    SceneEval se;
    se.dir = dir;
    se.refined = compute_metrics(depth_pred, s.gt_depth, mask);
    se.prior = compute_metrics(prior.depth_aligned, s.gt_depth, mask);
    se.epe_refined = mean_abs_diff(d_pred, s.gt_disparity, mask);
    se.epe_prior = mean_abs_diff(d_prior, s.gt_disparity, mask);
    for (int fr : res.full_res)
      se.epe_per_iteration.push_back(mean_abs_diff(to_d(tape.val(fr)), s.gt_disparity, mask));

    if (!dump_dir.empty()) {
      std::string name = std::filesystem::path(dir).filename().string();
      write_pfm(dump_dir + "/" + name + "_disparity.pfm", d_pred);
      write_pfm(dump_dir + "/" + name + "_depth.pfm", depth_pred);
      write_colorized(dump_dir + "/" + name + "_disparity.ppm", d_pred);
    }
    rep.per_scene.push_back(std::move(se));
  }
  if (rep.per_scene.empty()) throw std::runtime_error("run_eval: no scene had ground truth");

  rep.scenes = static_cast<int>(rep.per_scene.size());
  rep.epe_per_iteration.assign(rep.per_scene[0].epe_per_iteration.size(), 0.0);
  auto add = [](MetricsReport& acc, const MetricsReport& x) {
    acc.rel += x.rel;
    acc.sq_rel += x.sq_rel;
    acc.rmse += x.rmse;
    acc.log_rmse += x.log_rmse;
    acc.a1 += x.a1;
    acc.a2 += x.a2;
    acc.a3 += x.a3;
    acc.valid_pixel_fraction += x.valid_pixel_fraction;
  };
  for (const auto& se : rep.per_scene) {
    add(rep.refined, se.refined);
    add(rep.prior, se.prior);
    rep.epe_refined += se.epe_refined;
    rep.epe_prior += se.epe_prior;
    for (size_t i = 0; i < rep.epe_per_iteration.size(); ++i)
      rep.epe_per_iteration[i] += se.epe_per_iteration[i];
  }
  double inv = 1.0 / rep.scenes;
  auto scale = [&](MetricsReport& m) {
    m.rel *= inv;
    m.sq_rel *= inv;
    m.rmse *= inv;
    m.log_rmse *= inv;
    m.a1 *= inv;
    m.a2 *= inv;
    m.a3 *= inv;
    m.valid_pixel_fraction *= inv;
  };
  scale(rep.refined);
  scale(rep.prior);
  rep.epe_refined *= inv;
  rep.epe_prior *= inv;
  for (auto& v : rep.epe_per_iteration) v *= inv;
  return rep;
}

static nlohmann::ordered_json metrics_to_json(const MetricsReport& m) {
  return {{"rel", m.rel}, {"sq_rel", m.sq_rel},     {"rmse", m.rmse},
          {"log_rmse", m.log_rmse}, {"a1", m.a1},   {"a2", m.a2},
          {"a3", m.a3},   {"valid_pixel_fraction", m.valid_pixel_fraction}};
}

nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["scenes"] = r.scenes;
  j["skipped"] = r.skipped;
  j["refined"] = metrics_to_json(r.refined);
  j["prior"] = metrics_to_json(r.prior);
  j["epe_refined"] = r.epe_refined;
  j["epe_prior"] = r.epe_prior;
  j["epe_per_iteration"] = r.epe_per_iteration;
  nlohmann::ordered_json scenes = nlohmann::ordered_json::array();
  for (const auto& se : r.per_scene) {
    nlohmann::ordered_json js;
    js["dir"] = std::filesystem::path(se.dir).filename().string();
    js["refined"] = metrics_to_json(se.refined);
    js["prior"] = metrics_to_json(se.prior);
    js["epe_refined"] = se.epe_refined;
    js["epe_prior"] = se.epe_prior;
    js["epe_per_iteration"] = se.epe_per_iteration;
    scenes.push_back(std::move(js));
  }
  j["per_scene"] = std::move(scenes);
  return j;
}

void write_report(const std::string& path, const EvalReport& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_report: cannot open " + path);
  f << report_to_json(r).dump(1) << "\n";
  if (!f) throw std::runtime_error("write_report: write failed for " + path);
}

}  // namespace sa
