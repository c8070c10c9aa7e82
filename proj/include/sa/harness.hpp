#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sa/encoder.hpp"
#include "sa/losses.hpp"
#include "sa/metrics.hpp"
#include "sa/refiner.hpp"
#include "sa/scale_align.hpp"
#include "sa/synthdata.hpp"

namespace sa {

struct LoraSettings {
  int rank = 16;
  double kappa_max = 0.01;
  double dense_fraction = 0.45;
  double lambda = 1e-4;
};

struct DataSettings {
  SceneSpec scene;
  int count = 320;        // total scenes; seeded 80/20 train/val split
  bool randomize = true;  // per-sample layout/baseline variation
};

struct RunConfig {
  int stage1_epochs = 20;
  int stage2_epochs = 40;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;  // non-LoRA parameters only
  bool iteration_supervision = false;
  double iteration_gamma = 0.8;  // weight decay across iterations when enabled
  uint64_t seed = 1;
  RefinerConfig refiner;
  EncoderConfig encoder;
  LoraSettings lora;
  LossWeights loss;
  AlignConfig align;
  DataSettings data;
};

// Every default is overridable from a single JSON document; unknown keys are
// rejected to catch typos.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);

// Thrown when a training loss goes non-finite; carries the offending scene.
struct NonFiniteLoss : std::runtime_error {
  uint64_t scene_seed;
  NonFiniteLoss(uint64_t s, const std::string& what)
      : std::runtime_error(what), scene_seed(s) {}
};

struct Model {
  RunConfig cfg;
  Encoder<float> enc;
  Refiner<float> ref;

  static Model init(const RunConfig& cfg);
  ParamList<float> params();  // named tensors in a stable order
};

void save_checkpoint(const std::string& path, Model& model, const std::string& phase);
Model load_checkpoint(const std::string& path);

// Writes `count` sample directories (000000, 000001, ...) under out_dir.
void generate_dataset(const SceneSpec& base, bool randomize, const std::string& out_dir,
                      int count, uint64_t seed);

struct Split {
  std::vector<std::string> train, val;
};
// Deterministic shuffled 80/20 split of the sorted sample directories.
Split split_dataset(const std::string& data_dir, uint64_t seed);

// Maximum integer disparity at 1/4 resolution: about half the feature width,
// rounded up so the volume length divides by 8 (pyramid depth 4).
int pick_d_max(int width);

struct TrainResult {
  std::vector<double> stage1_loss, stage2_loss;  // per-epoch means
};
// Two-stage training; saves a checkpoint after each stage. Throws
// NonFiniteLoss when a batch loss is not finite.
TrainResult run_train(const RunConfig& cfg, const std::string& data_dir,
                      const std::string& ckpt_path);

struct SceneEval {
  std::string dir;
  MetricsReport refined, prior;  // depth metrics
  double epe_refined = 0.0, epe_prior = 0.0;
  std::vector<double> epe_per_iteration;
};

struct EvalReport {
  MetricsReport refined, prior;
  double epe_refined = 0.0, epe_prior = 0.0;
  std::vector<double> epe_per_iteration;
  int scenes = 0, skipped = 0;
  std::vector<SceneEval> per_scene;
};

// Evaluates the model on the given sample directories. Scenes with missing
// ground truth are skipped with a warning; an empty evaluation is an error.
// When dump_dir is non-empty, writes per-scene disparity PFMs and colorized
// PPM previews.
EvalReport run_eval(const Model& model, const std::vector<std::string>& scene_dirs,
                    const std::string& dump_dir = "");

nlohmann::ordered_json report_to_json(const EvalReport& r);
void write_report(const std::string& path, const EvalReport& r);

}  // namespace sa
