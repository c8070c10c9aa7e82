#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sa/layers.hpp"
#include "sa/lora.hpp"
#include "sa/params.hpp"
#include "sa/rng.hpp"
#include "sa/tape.hpp"

namespace sa {

// Feature pyramid tape nodes at scales 4/8/16/32.
struct PyramidNodes {
  int l4 = -1, l8 = -1, l16 = -1, l32 = -1;
};

// Context tape nodes at scales 4/8/16.
struct ContextNodes {
  int l4 = -1, l8 = -1, l16 = -1;
};

struct EncoderConfig {
  int rank = 16;
  int hidden = 128;  // context channels per level
  double depth_min = 0.3;
  double depth_max = 20.0;
};

// Five-stage strided CNN trunk (3->32->48->64->96->128, two convs per stage)
// with LoRA adapters on every trunk conv. Taps after stages 2..5 give the
// 4/8/16/32 pyramid. A small decoder regresses full-resolution mono depth and
// a context head fuses aligned pyramid features with a lightweight CNN branch.
template <typename T>
struct Encoder {
  EncoderConfig cfg;
  static constexpr int kStageCh[6] = {3, 32, 48, 64, 96, 128};

  std::vector<LoraConvLayer<T>> trunk;  // 10 convs: [stage*2 + {0,1}]

  // mono decoder: coarse-to-fine upsample/concat/conv, then two refinement
  // convs at 1/2 and full resolution and a 1x1 regression head
  ConvLayer<T> m16, m8, m4, m2, m1, m_head;
  // context: per-level 1x1 alignment plus a strided CNN branch
  ConvLayer<T> align4, align8, align16;
  ConvLayer<T> cnn_a, cnn_b, cnn_8, cnn_16;

  static Encoder init(const EncoderConfig& cfg, Rng& rng) {
    Encoder e;
    e.cfg = cfg;
    for (int s = 0; s < 5; ++s) {
      e.trunk.push_back(LoraConvLayer<T>::init(kStageCh[s], kStageCh[s + 1], 3, 2, cfg.rank, rng));
      e.trunk.push_back(LoraConvLayer<T>::init(kStageCh[s + 1], kStageCh[s + 1], 3, 1, cfg.rank, rng));
    }
    e.m16 = ConvLayer<T>::init(128 + 96, 96, 3, 1, rng);
    e.m8 = ConvLayer<T>::init(96 + 64, 64, 3, 1, rng);
    e.m4 = ConvLayer<T>::init(64 + 48, 48, 3, 1, rng);
    e.m2 = ConvLayer<T>::init(48, 32, 3, 1, rng);
    e.m1 = ConvLayer<T>::init(32, 16, 3, 1, rng);
    e.m_head = ConvLayer<T>::init(16, 1, 1, 1, rng);
    e.align4 = ConvLayer<T>::init(48, cfg.hidden, 1, 1, rng);
    e.align8 = ConvLayer<T>::init(64, cfg.hidden, 1, 1, rng);
    e.align16 = ConvLayer<T>::init(96, cfg.hidden, 1, 1, rng);
    e.cnn_a = ConvLayer<T>::init(3, 32, 3, 2, rng);
    e.cnn_b = ConvLayer<T>::init(32, cfg.hidden, 3, 2, rng);
    e.cnn_8 = ConvLayer<T>::init(cfg.hidden, cfg.hidden, 3, 2, rng);
    e.cnn_16 = ConvLayer<T>::init(cfg.hidden, cfg.hidden, 3, 2, rng);
    return e;
  }

  PyramidNodes extract_pyramid(Tape<T>& tape, int image, Binds<T>* binds = nullptr,
                               bool train_lora = false) const {
    const auto& shp = tape.val(image).shape;
    if (shp.size() != 3 || shp[0] != 3 || shp[1] % 32 != 0 || shp[2] % 32 != 0)
      throw std::invalid_argument("extract_pyramid: image must be [3,H,W] with H,W divisible by 32");
    PyramidNodes p;
    int x = image;
    for (int s = 0; s < 5; ++s) {
      x = tape.relu(trunk[2 * s].forward(tape, x, binds, train_lora));
      x = tape.relu(trunk[2 * s + 1].forward(tape, x, binds, train_lora));
      if (s == 1) p.l4 = x;
      if (s == 2) p.l8 = x;
      if (s == 3) p.l16 = x;
      if (s == 4) p.l32 = x;
    }
    return p;
  }

  // Full-resolution metric depth from the pyramid. Sigmoid inverse-depth
  // parameterization bounded to [depth_min, depth_max].
  int mono_depth(Tape<T>& tape, const PyramidNodes& p, Binds<T>* binds = nullptr,
                 bool trainable = false) const {
    int x = tape.relu(m16.forward(tape, tape.concat({tape.upsample_nearest2(p.l32), p.l16}), binds, trainable));
    x = tape.relu(m8.forward(tape, tape.concat({tape.upsample_nearest2(x), p.l8}), binds, trainable));
    x = tape.relu(m4.forward(tape, tape.concat({tape.upsample_nearest2(x), p.l4}), binds, trainable));
    x = tape.relu(m2.forward(tape, tape.upsample_nearest2(x), binds, trainable));
    x = tape.relu(m1.forward(tape, tape.upsample_nearest2(x), binds, trainable));
    int inv = tape.sigmoid(m_head.forward(tape, x, binds, trainable));
    // depth = 1 / (1/dmax + sig * (1/dmin - 1/dmax))
    T inv_lo = static_cast<T>(1.0 / cfg.depth_max);
    T inv_hi = static_cast<T>(1.0 / cfg.depth_min);
    int denom = tape.add_scalar(tape.scale(inv, inv_hi - inv_lo), inv_lo);
    return tape.div(tape.leaf(TensorT<T>::full(tape.val(denom).shape, T(1))), denom);
  }

  ContextNodes combined_context(Tape<T>& tape, int image, const PyramidNodes& p,
                                Binds<T>* binds = nullptr, bool trainable = false) const {
    ContextNodes c;
    int y = tape.relu(cnn_a.forward(tape, image, binds, trainable));
    int c4 = tape.relu(cnn_b.forward(tape, y, binds, trainable));
    int c8 = tape.relu(cnn_8.forward(tape, c4, binds, trainable));
    int c16 = tape.relu(cnn_16.forward(tape, c8, binds, trainable));
    c.l4 = tape.add(align4.forward(tape, p.l4, binds, trainable), c4);
    c.l8 = tape.add(align8.forward(tape, p.l8, binds, trainable), c8);
    c.l16 = tape.add(align16.forward(tape, p.l16, binds, trainable), c16);
    return c;
  }

  void set_schedule(int total, double dense_frac) {
    for (auto& l : trunk) l.ad.set_schedule(total, dense_frac);
  }

  void merge_all() {
    for (auto& l : trunk) l.ad.merge();
  }

  void collect_params(ParamList<T>& out, const std::string& prefix) {
    for (size_t i = 0; i < trunk.size(); ++i) {
      std::string p = prefix + ".trunk" + std::to_string(i);
      out.push_back({p + ".W0", &trunk[i].ad.W0, false, false});
      out.push_back({p + ".A", &trunk[i].ad.A, true, false});
      out.push_back({p + ".B", &trunk[i].ad.B, true, false});
      out.push_back({p + ".w", &trunk[i].ad.w, true, true});
      out.push_back({p + ".b", &trunk[i].b, false, false});
    }
    m16.collect(out, prefix + ".m16", true);
    m8.collect(out, prefix + ".m8", true);
    m4.collect(out, prefix + ".m4", true);
    m2.collect(out, prefix + ".m2", true);
    m1.collect(out, prefix + ".m1", true);
    m_head.collect(out, prefix + ".m_head", true);
    align4.collect(out, prefix + ".align4", true);
    align8.collect(out, prefix + ".align8", true);
    align16.collect(out, prefix + ".align16", true);
    cnn_a.collect(out, prefix + ".cnn_a", true);
    cnn_b.collect(out, prefix + ".cnn_b", true);
    cnn_8.collect(out, prefix + ".cnn_8", true);
    cnn_16.collect(out, prefix + ".cnn_16", true);
  }
};

}  // namespace sa
