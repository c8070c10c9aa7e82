#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sa/correlation.hpp"
#include "sa/encoder.hpp"
#include "sa/layers.hpp"
#include "sa/scale_align.hpp"
#include "sa/tape.hpp"

namespace sa {

struct RefinerConfig {
  int gru_layers = 3;  // in {2, 3, 4}
  int hidden_dim = 128;
  int iterations = 32;
  int lookup_radius = 4;
  int corr_ch = 48;  // correlation feature channels after the two-layer encoder
  int disp_ch = 16;  // phi(d) channels
  int fuse_ch = 48;  // fused GRU input channels
  // Annealed trust region on the per-iteration update: iteration k's delta is
  // squashed to max_step * decay^k quarter-pixels via tanh (identity near
  // zero, so the zero-initialized head still gets gradient). Early iterations
  // keep large corrections; late iterations can only fine-tune, so the
  // trajectory settles instead of overshooting and wandering. 0 disables.
  double max_step = 0.5;
  double step_decay = 0.6;
  // Soft-threshold (proximal l1) applied to each iteration's disparity update
  // at inference, in quarter-resolution pixels. A converged cell keeps
  // emitting a tiny constant residual; shrinking sub-threshold updates to
  // exactly zero turns convergence into a true fixed point instead of a slow
  // drift. Genuine refinement steps are orders of magnitude larger and pass
  // through shifted by the (negligible) threshold. Disabled on the training
  // path: the delta head is zero-initialized, so a deadband there would block
  // its gradient permanently.
  double update_deadband = 0.01;
};

// Convolutional GRU cell. Cheap 1x1 gates, 3x3 candidate conv.
template <typename T>
struct GruCell {
  ConvLayer<T> wz, wr, wh;

  static GruCell init(int hidden, int xch, Rng& rng) {
    GruCell c;
    c.wz = ConvLayer<T>::init(hidden + xch, hidden, 1, 1, rng);
    c.wr = ConvLayer<T>::init(hidden + xch, hidden, 1, 1, rng);
    c.wh = ConvLayer<T>::init(hidden + xch, hidden, 3, 1, rng);
    return c;
  }

  // h' = h + z * (tanh(Wh [r*h, x]) - h)
  int step(Tape<T>& tape, int h, int x, Binds<T>* binds, bool trainable) const {
    int cat = tape.concat({h, x});
    int z = tape.sigmoid(wz.forward(tape, cat, binds, trainable));
    int r = tape.sigmoid(wr.forward(tape, cat, binds, trainable));
    int hh = tape.tanh_(wh.forward(tape, tape.concat({tape.mul(r, h), x}), binds, trainable));
    return tape.add(h, tape.mul(z, tape.sub(hh, h)));
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    wz.collect(out, prefix + ".wz", true);
    wr.collect(out, prefix + ".wr", true);
    wh.collect(out, prefix + ".wh", true);
  }
};

struct RefinerState {
  std::vector<int> hidden;  // one node per cell, coarse-to-fine
  int d = -1;               // [1, H/4, W/4] disparity at quarter resolution
  int iteration = 0;
};

struct IterateResult {
  std::vector<int> disparities;  // quarter-res node per iteration
  std::vector<int> full_res;     // convex-upsampled node per iteration (optional)
  int d_full = -1;               // final full-resolution disparity
  int depth_full = -1;           // f*b / max(d, eps)
};

// Recurrent refinement over correlation lookups: coarse-to-fine stack of
// ConvGRU cells over levels {16, 8, 4}, additive disparity updates clamped at
// zero, convex upsampling back to full resolution.
template <typename T>
struct Refiner {
  RefinerConfig cfg;
  ConvLayer<T> corr1, corr2;  // two-layer correlation feature encoder
  ConvLayer<T> phi1, phi2;    // phi(d)
  ConvLayer<T> fuse;          // 1x1 fusion of [corr, phi, ctx]
  std::vector<GruCell<T>> cells;   // coarse-to-fine
  std::vector<int> cell_level;     // pyramid scale per cell (16/8/4)
  std::vector<ConvLayer<T>> cross; // 1x1 hidden -> fuse_ch, cells[i>=1]
  ConvLayer<T> dh1, dh2;  // delta-d head (dh2 zero-init: identity start)
  ConvLayer<T> mh1, mh2;  // upsample-mask head (mh2 zero-init: uniform mask)

  static Refiner init(const RefinerConfig& cfg, Rng& rng) {
    if (cfg.gru_layers < 2 || cfg.gru_layers > 4)
      throw std::invalid_argument("refiner: gru_layers must be in {2,3,4}");
    if (cfg.iterations < 1) throw std::invalid_argument("refiner: iterations must be >= 1");
    Refiner r;
    r.cfg = cfg;
    int corr_in = (2 * cfg.lookup_radius + 1) * 4;
    r.corr1 = ConvLayer<T>::init(corr_in, cfg.corr_ch, 3, 1, rng);
    r.corr2 = ConvLayer<T>::init(cfg.corr_ch, cfg.corr_ch, 3, 1, rng);
    r.phi1 = ConvLayer<T>::init(1, cfg.disp_ch, 3, 1, rng);
    r.phi2 = ConvLayer<T>::init(cfg.disp_ch, cfg.disp_ch, 3, 1, rng);
    r.fuse = ConvLayer<T>::init(cfg.corr_ch + cfg.disp_ch + cfg.hidden_dim, cfg.fuse_ch, 1, 1, rng);
    switch (cfg.gru_layers) {
      case 2: r.cell_level = {8, 4}; break;
      case 3: r.cell_level = {16, 8, 4}; break;
      case 4: r.cell_level = {16, 8, 4, 4}; break;
    }
    for (size_t i = 0; i < r.cell_level.size(); ++i) {
      r.cells.push_back(GruCell<T>::init(cfg.hidden_dim, cfg.fuse_ch, rng));
      if (i > 0) r.cross.push_back(ConvLayer<T>::init(cfg.hidden_dim, cfg.fuse_ch, 1, 1, rng));
    }
    r.dh1 = ConvLayer<T>::init(cfg.hidden_dim, cfg.fuse_ch, 3, 1, rng);
    r.dh2 = ConvLayer<T>::init(cfg.fuse_ch, 1, 3, 1, rng);
    for (auto& v : r.dh2.w.data) v = T(0);
    r.mh1 = ConvLayer<T>::init(cfg.hidden_dim, cfg.fuse_ch, 3, 1, rng);
    r.mh2 = ConvLayer<T>::init(cfg.fuse_ch, 9 * 16, 1, 1, rng);
    for (auto& v : r.mh2.w.data) v = T(0);
    return r;
  }

  RefinerState init_state(Tape<T>& tape, const ContextNodes& ctx, int d1) const {
    const auto& ds = tape.val(d1).shape;
    const auto& cs = tape.val(ctx.l4).shape;
    if (ds.size() != 3 || ds[0] != 1 || ds[1] != cs[1] || ds[2] != cs[2])
      throw std::invalid_argument("init_state: d1 / context resolution mismatch");
    RefinerState st;
    for (int lvl : cell_level) {
      int c = lvl == 16 ? ctx.l16 : (lvl == 8 ? ctx.l8 : ctx.l4);
      st.hidden.push_back(tape.tanh_(c));
    }
    st.d = d1;
    return st;
  }

  // One recurrent update; returns the new state, with delta_d_out the Δd node.
  RefinerState gru_step(Tape<T>& tape, const RefinerState& st, const CorrelationPyramid<T>& pyr,
                        const ContextNodes& ctx, Binds<T>* binds = nullptr,
                        bool trainable = false, int* delta_d_out = nullptr) const {
    int corr = lookup(tape, pyr, st.d, cfg.lookup_radius);
    int c = tape.relu(corr2.forward(tape, tape.relu(corr1.forward(tape, corr, binds, trainable)), binds, trainable));
    int phi = phi2.forward(tape, tape.relu(phi1.forward(tape, st.d, binds, trainable)), binds, trainable);
    int x4 = tape.relu(fuse.forward(tape, tape.concat({c, phi, ctx.l4}), binds, trainable));
    int x8 = tape.avg_pool2d(x4, 2);
    int x16 = tape.avg_pool2d(x8, 2);

    RefinerState next;
    next.iteration = st.iteration + 1;
    int prev_level = 0;
    for (size_t i = 0; i < cells.size(); ++i) {
      int lvl = cell_level[i];
      int x = lvl == 16 ? x16 : (lvl == 8 ? x8 : x4);
      if (i > 0) {
        int carried = next.hidden.back();
        for (int s = prev_level; s > lvl; s /= 2) carried = tape.upsample_nearest2(carried);
        x = tape.add(x, cross[i - 1].forward(tape, carried, binds, trainable));
      }
      next.hidden.push_back(cells[i].step(tape, st.hidden[i], x, binds, trainable));
      prev_level = lvl;
    }
    int h4 = next.hidden.back();
    int dd = dh2.forward(tape, tape.relu(dh1.forward(tape, h4, binds, trainable)), binds, trainable);
    if (cfg.max_step > 0.0) {
      const T s = static_cast<T>(cfg.max_step * std::pow(cfg.step_decay, st.iteration));
      dd = tape.scale(tape.tanh_(tape.scale(dd, T(1) / s)), s);
    }
    if (!trainable && cfg.update_deadband > 0.0) {
      const T tau = static_cast<T>(cfg.update_deadband);
      dd = tape.sub(tape.relu(tape.add_scalar(dd, -tau)),
                    tape.relu(tape.add_scalar(tape.scale(dd, T(-1)), -tau)));
    }
    if (delta_d_out) *delta_d_out = dd;
    next.d = tape.relu(tape.add(st.d, dd));
    return next;
  }

  int upsample_mask(Tape<T>& tape, int h4, Binds<T>* binds = nullptr, bool trainable = false) const {
    int m = mh2.forward(tape, tape.relu(mh1.forward(tape, h4, binds, trainable)), binds, trainable);
    return tape.softmax_groups(m, 9);
  }

  // Runs cfg.iterations steps from the quarter-resolution prior disparity.
  // want_full_res additionally upsamples every intermediate disparity (eval).
  IterateResult iterate(Tape<T>& tape, const CorrelationPyramid<T>& pyr, const ContextNodes& ctx,
                        int d_init, const Calibration& calib, Binds<T>* binds = nullptr,
                        bool trainable = false, bool want_full_res = false) const {
    IterateResult res;
    RefinerState st = init_state(tape, ctx, d_init);
    for (int it = 0; it < cfg.iterations; ++it) {
      st = gru_step(tape, st, pyr, ctx, binds, trainable);
      if (!tape.val(st.d).all_finite())
        throw std::runtime_error("refiner: non-finite disparity at iteration " + std::to_string(it + 1));
      res.disparities.push_back(st.d);
      if (want_full_res) {
        int mask = upsample_mask(tape, st.hidden.back(), binds, trainable);
        res.full_res.push_back(tape.convex_upsample(st.d, mask, 4));
      }
    }
    if (want_full_res) {
      res.d_full = res.full_res.back();
    } else {
      int mask = upsample_mask(tape, st.hidden.back(), binds, trainable);
      res.d_full = tape.convex_upsample(st.d, mask, 4);
    }
    // depth = f*b / max(d, eps): invalid (tiny) disparities saturate instead
    // of blowing up
    const T eps = T(1e-3);
    int clamped = tape.add_scalar(tape.relu(tape.add_scalar(res.d_full, -eps)), eps);
    int num = tape.leaf(TensorT<T>::full(tape.val(res.d_full).shape, static_cast<T>(calib.f * calib.b)));
    res.depth_full = tape.div(num, clamped);
    return res;
  }

  void collect_params(ParamList<T>& out, const std::string& prefix) {
    corr1.collect(out, prefix + ".corr1", true);
    corr2.collect(out, prefix + ".corr2", true);
    phi1.collect(out, prefix + ".phi1", true);
    phi2.collect(out, prefix + ".phi2", true);
    fuse.collect(out, prefix + ".fuse", true);
    for (size_t i = 0; i < cells.size(); ++i)
      cells[i].collect(out, prefix + ".gru" + std::to_string(i));
    for (size_t i = 0; i < cross.size(); ++i)
      cross[i].collect(out, prefix + ".cross" + std::to_string(i), true);
    dh1.collect(out, prefix + ".dh1", true);
    dh2.collect(out, prefix + ".dh2", true);
    mh1.collect(out, prefix + ".mh1", true);
    mh2.collect(out, prefix + ".mh2", true);
  }
};

}  // namespace sa
