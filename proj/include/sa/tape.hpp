#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sa/gemm.hpp"
#include "sa/tensor.hpp"

namespace sa {

// Reverse-mode gradient tape. Operations append nodes in execution order;
// backward() replays the recorded closures in reverse. Accumulation order is
// fixed by tape order, so two backward passes over the same tape (and two
// runs with the same inputs) produce identical gradients.
//
// Gradients are only materialized for nodes on a path from a requires_grad
// leaf, so frozen subgraphs cost nothing in the backward pass.
template <typename T>
class Tape {
 public:
  using Tsr = TensorT<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Aborting on non-finite values is part of the numerics contract; the
  // check is a cheap linear scan but can be disabled for hot training loops
  // (the harness checks its losses explicitly).
  bool finite_checks = true;

  int leaf(Tsr v, bool requires_grad = false) {
    return push(std::move(v), requires_grad, {});
  }

  const Tsr& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tsr& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  int add(int a, int b) {
    const Tsr &va = val(a), &vb = val(b);
    require(va.same_shape(vb), "add: shape mismatch");
    Tsr out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int o) {
      const Tsr& g = grad(o);
      accumulate(a, g.data.data(), g.numel());
      accumulate(b, g.data.data(), g.numel());
    });
  }

  int sub(int a, int b) {
    const Tsr &va = val(a), &vb = val(b);
    require(va.same_shape(vb), "sub: shape mismatch");
    Tsr out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int o) {
      const Tsr& g = grad(o);
      accumulate(a, g.data.data(), g.numel());
      if (needs(b)) {
        Tsr& gb = mutable_grad(b);
        for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= g.data[i];
      }
    });
  }

  int mul(int a, int b) {
    const Tsr &va = val(a), &vb = val(b);
    require(va.same_shape(vb), "mul: shape mismatch");
    Tsr out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int o) {
      const Tsr& g = grad(o);
      if (needs(a)) {
        Tsr& ga = mutable_grad(a);
        const Tsr& vb2 = val(b);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
      }
      if (needs(b)) {
        Tsr& gb = mutable_grad(b);
        const Tsr& va2 = val(a);
        for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i] * va2.data[i];
      }
    });
  }

  int div(int a, int b) {
    const Tsr &va = val(a), &vb = val(b);
    require(va.same_shape(vb), "div: shape mismatch");
    Tsr out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= vb.data[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int o) {
      const Tsr& g = grad(o);
      const Tsr &va2 = val(a), &vb2 = val(b);
      if (needs(a)) {
        Tsr& ga = mutable_grad(a);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] / vb2.data[i];
      }
      if (needs(b)) {
        Tsr& gb = mutable_grad(b);
        for (size_t i = 0; i < gb.data.size(); ++i)
          gb.data[i] -= g.data[i] * va2.data[i] / (vb2.data[i] * vb2.data[i]);
      }
    });
  }

  int scale(int a, T c) {
    Tsr out = val(a);
    for (T& v : out.data) v *= c;
    return push(std::move(out), needs(a), [this, a, c](int o) {
      const Tsr& g = grad(o);
      if (needs(a)) {
        Tsr& ga = mutable_grad(a);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += c * g.data[i];
      }
    });
  }

  int add_scalar(int a, T c) {
    Tsr out = val(a);
    for (T& v : out.data) v += c;
    return push(std::move(out), needs(a), [this, a](int o) {
      const Tsr& g = grad(o);
      accumulate(a, g.data.data(), g.numel());
    });
  }

  int abs(int a) {
    Tsr out = val(a);
    for (T& v : out.data) v = std::fabs(v);
    // subgradient convention: sign(0) = 0
    return push(std::move(out), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      const Tsr& va = val(a);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i) {
        T s = va.data[i] > T(0) ? T(1) : (va.data[i] < T(0) ? T(-1) : T(0));
        ga.data[i] += s * g.data[i];
      }
    });
  }

  int relu(int a) {
    Tsr out = val(a);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return push(std::move(out), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      const Tsr& va = val(a);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i)
        if (va.data[i] > T(0)) ga.data[i] += g.data[i];
    });
  }

  int tanh_(int a) {
    Tsr out = val(a);
    for (T& v : out.data) v = std::tanh(v);
    return push(std::move(out), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      const Tsr& vo = val(o);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i)
        ga.data[i] += (T(1) - vo.data[i] * vo.data[i]) * g.data[i];
    });
  }

  int sigmoid(int a) {
    Tsr out = val(a);
    for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    return push(std::move(out), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      const Tsr& vo = val(o);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i)
        ga.data[i] += vo.data[i] * (T(1) - vo.data[i]) * g.data[i];
    });
  }

  int exp_(int a) {
    Tsr out = val(a);
    for (T& v : out.data) v = std::exp(v);
    return push(std::move(out), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      const Tsr& vo = val(o);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += vo.data[i] * g.data[i];
    });
  }

  // ---- reductions ----

  int sum(int a) {
    T s = T(0);
    for (T v : val(a).data) s += v;
    return push(Tsr::scalar(s), needs(a), [this, a](int o) {
      if (!needs(a)) return;
      T g = grad(o).data[0];
      Tsr& ga = mutable_grad(a);
      for (T& v : ga.data) v += g;
    });
  }

  int mean(int a) {
    int64_t n = val(a).numel();
    T s = T(0);
    for (T v : val(a).data) s += v;
    s /= static_cast<T>(n);
    return push(Tsr::scalar(s), needs(a), [this, a, n](int o) {
      if (!needs(a)) return;
      T g = grad(o).data[0] / static_cast<T>(n);
      Tsr& ga = mutable_grad(a);
      for (T& v : ga.data) v += g;
    });
  }

  // out = a / s where s is a scalar ([1]) node
  int div_scalar_node(int a, int s) {
    require(val(s).numel() == 1, "div_scalar_node: divisor must be scalar");
    T sv = val(s).data[0];
    Tsr out = val(a);
    for (T& v : out.data) v /= sv;
    return push(std::move(out), needs(a) || needs(s), [this, a, s](int o) {
      const Tsr& g = grad(o);
      T sv2 = val(s).data[0];
      if (needs(a)) {
        Tsr& ga = mutable_grad(a);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] / sv2;
      }
      if (needs(s)) {
        const Tsr& va = val(a);
        T acc = T(0);
        for (size_t i = 0; i < va.data.size(); ++i) acc += g.data[i] * va.data[i];
        mutable_grad(s).data[0] -= acc / (sv2 * sv2);
      }
    });
  }

  // [C,H,W] -> [1,H,W], mean over channels
  int mean_channels(int a) {
    const Tsr& va = val(a);
    require(va.shape.size() == 3, "mean_channels: expected [C,H,W]");
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    Tsr out({1, H, W});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H * W; ++i) out.data[static_cast<size_t>(i)] += va.data[static_cast<size_t>(c) * H * W + i];
    for (T& v : out.data) v /= static_cast<T>(C);
    return push(std::move(out), needs(a), [this, a, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
          ga.data[static_cast<size_t>(c) * H * W + i] += g.data[static_cast<size_t>(i)] / static_cast<T>(C);
    });
  }

  // ---- linear algebra ----

  int matmul(int a, int b) {
    const Tsr &va = val(a), &vb = val(b);
    require(va.shape.size() == 2 && vb.shape.size() == 2 && va.shape[1] == vb.shape[0],
            "matmul: bad shapes");
    int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tsr out = Tsr::uninit({m, n});
    gemm(false, false, m, n, k, T(1), va.data.data(), k, vb.data.data(), n, T(0), out.data.data(),
         n);
    return push(std::move(out), needs(a) || needs(b), [this, a, b, m, k, n](int o) {
      const Tsr& g = grad(o);
      if (needs(a)) {
        // dA += g * B^T
        Tsr& ga = mutable_grad(a);
        gemm(false, true, m, k, n, T(1), g.data.data(), n, val(b).data.data(), n, T(1),
             ga.data.data(), k);
      }
      if (needs(b)) {
        // dB += A^T * g
        Tsr& gb = mutable_grad(b);
        gemm(true, false, k, n, m, T(1), val(a).data.data(), k, g.data.data(), n, T(1),
             gb.data.data(), n);
      }
    });
  }

  // out[:,i] = B[:,i] * w[i];  B: [d,r], w: [r]
  int scale_columns(int b, int w) {
    const Tsr &vb = val(b), &vw = val(w);
    require(vb.shape.size() == 2 && vw.numel() == vb.shape[1], "scale_columns: bad shapes");
    int d = vb.shape[0], r = vb.shape[1];
    Tsr out = vb;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < r; ++j) out.at(i, j) *= vw.data[static_cast<size_t>(j)];
    return push(std::move(out), needs(b) || needs(w), [this, b, w, d, r](int o) {
      const Tsr& g = grad(o);
      const Tsr &vb2 = val(b), &vw2 = val(w);
      if (needs(b)) {
        Tsr& gb = mutable_grad(b);
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < r; ++j) gb.at(i, j) += g.at(i, j) * vw2.data[static_cast<size_t>(j)];
      }
      if (needs(w)) {
        Tsr& gw = mutable_grad(w);
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < r; ++j) gw.data[static_cast<size_t>(j)] += g.at(i, j) * vb2.at(i, j);
      }
    });
  }

  // ---- convolution ----

  // x: [C,H,W], w: [O, C*k*k], bias: [O] (or -1 for none); zero padding.
  int conv2d(int x, int w, int bias, int k, int stride, int pad) {
    const Tsr &vx = val(x), &vw = val(w);
    require(vx.shape.size() == 3, "conv2d: input must be [C,H,W]");
    int C = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
    require(vw.shape.size() == 2 && vw.shape[1] == C * k * k, "conv2d: weight shape mismatch");
    int O = vw.shape[0];
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    require(Ho > 0 && Wo > 0, "conv2d: empty output");

    std::vector<T> col;
    im2col(vx, k, stride, pad, Ho, Wo, col);
    Tsr out = Tsr::uninit({O, Ho, Wo});
    gemm(false, false, O, Ho * Wo, C * k * k, T(1), vw.data.data(), C * k * k, col.data(), Ho * Wo,
         T(0), out.data.data(), Ho * Wo);
    if (bias >= 0) {
      const Tsr& vb = val(bias);
      require(vb.numel() == O, "conv2d: bias shape mismatch");
      for (int oc = 0; oc < O; ++oc) {
        T bv = vb.data[static_cast<size_t>(oc)];
        T* p = out.data.data() + static_cast<size_t>(oc) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) p[i] += bv;
      }
    }
    return push(std::move(out), needs(x) || needs(w) || (bias >= 0 && needs(bias)),
                [this, x, w, bias, k, stride, pad, C, H, W, O, Ho, Wo](int o) {
                  const Tsr& g = grad(o);
                  if (needs(w) || needs(x)) {
                    std::vector<T> col2;
                    if (needs(w)) {
                      im2col(val(x), k, stride, pad, Ho, Wo, col2);
                      Tsr& gw = mutable_grad(w);
                      gemm(false, true, O, C * k * k, Ho * Wo, T(1), g.data.data(), Ho * Wo,
                           col2.data(), Ho * Wo, T(1), gw.data.data(), C * k * k);
                    }
                    if (needs(x)) {
                      std::vector<T, UninitAlloc<T>> dcol(static_cast<size_t>(C * k * k) * Ho * Wo);
                      gemm(true, false, C * k * k, Ho * Wo, O, T(1), val(w).data.data(), C * k * k,
                           g.data.data(), Ho * Wo, T(0), dcol.data(), Ho * Wo);
                      col2im_accum(dcol, k, stride, pad, C, H, W, Ho, Wo, mutable_grad(x));
                    }
                  }
                  if (bias >= 0 && needs(bias)) {
                    Tsr& gb = mutable_grad(bias);
                    for (int oc = 0; oc < O; ++oc) {
                      T acc = T(0);
                      const T* p = g.data.data() + static_cast<size_t>(oc) * Ho * Wo;
                      for (int i = 0; i < Ho * Wo; ++i) acc += p[i];
                      gb.data[static_cast<size_t>(oc)] += acc;
                    }
                  }
                });
  }

  // ---- sampling / resampling ----

  // src: [C,H,W], coords: [2,Ho,Wo] with coords[0]=x, coords[1]=y.
  // Out-of-bounds samples contribute value 0 with mask 0 (no clamping; the
  // mask feeds the invalid-reprojection mask downstream).
  int bilinear_sample(int src, int coords, TensorT<T>* mask_out = nullptr) {
    const Tsr &vs = val(src), &vc = val(coords);
    require(vs.shape.size() == 3 && vc.shape.size() == 3 && vc.shape[0] == 2,
            "bilinear_sample: bad shapes");
    int C = vs.shape[0], H = vs.shape[1], W = vs.shape[2];
    int Ho = vc.shape[1], Wo = vc.shape[2];
    Tsr out({C, Ho, Wo});
    if (mask_out) *mask_out = Tsr({1, Ho, Wo});
    for (int i = 0; i < Ho; ++i) {
      for (int j = 0; j < Wo; ++j) {
        T xx = vc.at(0, i, j), yy = vc.at(1, i, j);
        bool inb = xx >= T(0) && xx <= T(W - 1) && yy >= T(0) && yy <= T(H - 1);
        if (mask_out) mask_out->at(0, i, j) = inb ? T(1) : T(0);
        if (!inb) continue;
        int x0 = static_cast<int>(std::floor(xx)), y0 = static_cast<int>(std::floor(yy));
        int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        T tx = xx - static_cast<T>(x0), ty = yy - static_cast<T>(y0);
        for (int c = 0; c < C; ++c) {
          T v00 = vs.at(c, y0, x0), v01 = vs.at(c, y0, x1);
          T v10 = vs.at(c, y1, x0), v11 = vs.at(c, y1, x1);
          out.at(c, i, j) = (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) +
                            ty * ((T(1) - tx) * v10 + tx * v11);
        }
      }
    }
    return push(std::move(out), needs(src) || needs(coords),
                [this, src, coords, C, H, W, Ho, Wo](int o) {
                  const Tsr& g = grad(o);
                  const Tsr &vs2 = val(src), &vc2 = val(coords);
                  bool ns = needs(src), nc = needs(coords);
                  Tsr* gs = ns ? &mutable_grad(src) : nullptr;
                  Tsr* gc = nc ? &mutable_grad(coords) : nullptr;
                  for (int i = 0; i < Ho; ++i) {
                    for (int j = 0; j < Wo; ++j) {
                      T xx = vc2.at(0, i, j), yy = vc2.at(1, i, j);
                      if (!(xx >= T(0) && xx <= T(W - 1) && yy >= T(0) && yy <= T(H - 1))) continue;
                      int x0 = static_cast<int>(std::floor(xx)), y0 = static_cast<int>(std::floor(yy));
                      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                      T tx = xx - static_cast<T>(x0), ty = yy - static_cast<T>(y0);
                      T gx = T(0), gy = T(0);
                      for (int c = 0; c < C; ++c) {
                        T go = g.at(c, i, j);
                        if (go == T(0)) continue;
                        T v00 = vs2.at(c, y0, x0), v01 = vs2.at(c, y0, x1);
                        T v10 = vs2.at(c, y1, x0), v11 = vs2.at(c, y1, x1);
                        if (gs) {
                          gs->at(c, y0, x0) += go * (T(1) - ty) * (T(1) - tx);
                          gs->at(c, y0, x1) += go * (T(1) - ty) * tx;
                          gs->at(c, y1, x0) += go * ty * (T(1) - tx);
                          gs->at(c, y1, x1) += go * ty * tx;
                        }
                        gx += go * ((T(1) - ty) * (v01 - v00) + ty * (v11 - v10));
                        gy += go * ((T(1) - tx) * (v10 - v00) + tx * (v11 - v01));
                      }
                      if (gc) {
                        gc->at(0, i, j) += gx;
                        gc->at(1, i, j) += gy;
                      }
                    }
                  }
                });
  }

  // [C,H,W] -> [C,H/k,W/k]; each cell the mean of its k x k block.
  int avg_pool2d(int a, int k) {
    const Tsr& va = val(a);
    require(va.shape.size() == 3, "avg_pool2d: expected [C,H,W]");
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    require(H % k == 0 && W % k == 0, "avg_pool2d: size not divisible by k");
    int Ho = H / k, Wo = W / k;
    Tsr out = Tsr::uninit({C, Ho, Wo});
    T inv = T(1) / static_cast<T>(k * k);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          T acc = T(0);
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) acc += va.at(c, i * k + dy, j * k + dx);
          out.at(c, i, j) = acc * inv;
        }
    return push(std::move(out), needs(a), [this, a, k, C, Ho, Wo](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      T inv = T(1) / static_cast<T>(k * k);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            T gv = g.at(c, i, j) * inv;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) ga.at(c, i * k + dy, j * k + dx) += gv;
          }
    });
  }

  int upsample_nearest2(int a) {
    const Tsr& va = val(a);
    require(va.shape.size() == 3, "upsample_nearest2: expected [C,H,W]");
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    Tsr out = Tsr::uninit({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j) out.at(c, i, j) = va.at(c, i / 2, j / 2);
    return push(std::move(out), needs(a), [this, a, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < 2 * H; ++i)
          for (int j = 0; j < 2 * W; ++j) ga.at(c, i / 2, j / 2) += g.at(c, i, j);
    });
  }

  int concat(const std::vector<int>& parts) {
    require(!parts.empty(), "concat: empty");
    std::vector<int> shape = val(parts[0]).shape;
    require(shape.size() >= 1, "concat: rank 0");
    int total = 0;
    int64_t inner = 1;
    for (size_t i = 1; i < shape.size(); ++i) inner *= shape[i];
    bool ng = false;
    for (int p : parts) {
      const Tsr& v = val(p);
      require(v.shape.size() == shape.size(), "concat: rank mismatch");
      for (size_t i = 1; i < shape.size(); ++i)
        require(v.shape[i] == shape[i], "concat: trailing dim mismatch");
      total += v.shape[0];
      ng = ng || needs(p);
    }
    shape[0] = total;
    Tsr out = Tsr::uninit(shape);
    size_t off = 0;
    for (int p : parts) {
      const Tsr& v = val(p);
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<long>(off));
      off += v.data.size();
    }
    std::vector<int> ps = parts;
    return push(std::move(out), ng, [this, ps](int o) {
      const Tsr& g = grad(o);
      size_t off2 = 0;
      for (int p : ps) {
        size_t n = val(p).data.size();
        if (needs(p)) {
          Tsr& gp = mutable_grad(p);
          for (size_t i = 0; i < n; ++i) gp.data[i] += g.data[off2 + i];
        }
        off2 += n;
      }
    });
    (void)inner;
  }

  // horizontal forward difference: [C,H,W] -> [C,H,W-1]
  int dx(int a) {
    const Tsr& va = val(a);
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    Tsr out = Tsr::uninit({C, H, W - 1});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j + 1 < W; ++j) out.at(c, i, j) = va.at(c, i, j + 1) - va.at(c, i, j);
    return push(std::move(out), needs(a), [this, a, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j + 1 < W; ++j) {
            T gv = g.at(c, i, j);
            ga.at(c, i, j + 1) += gv;
            ga.at(c, i, j) -= gv;
          }
    });
  }

  int dy(int a) {
    const Tsr& va = val(a);
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    Tsr out = Tsr::uninit({C, H - 1, W});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i + 1 < H; ++i)
        for (int j = 0; j < W; ++j) out.at(c, i, j) = va.at(c, i + 1, j) - va.at(c, i, j);
    return push(std::move(out), needs(a), [this, a, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i + 1 < H; ++i)
          for (int j = 0; j < W; ++j) {
            T gv = g.at(c, i, j);
            ga.at(c, i + 1, j) += gv;
            ga.at(c, i, j) -= gv;
          }
    });
  }

  // 3x3 box mean with zero padding, same spatial size (self-adjoint).
  int mean3x3(int a) {
    const Tsr& va = val(a);
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    Tsr out = box3(va, C, H, W);
    return push(std::move(out), needs(a), [this, a, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr gb = box3(g, C, H, W);
      Tsr& ga = mutable_grad(a);
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gb.data[i];
    });
  }

  // softmax over consecutive channel groups of size g at every pixel
  int softmax_groups(int a, int g) {
    const Tsr& va = val(a);
    int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    require(C % g == 0, "softmax_groups: channels not divisible");
    Tsr out = va;
    int HW = H * W;
    for (int grp = 0; grp < C / g; ++grp)
      for (int px = 0; px < HW; ++px) {
        T mx = out.data[static_cast<size_t>(grp * g) * HW + px];
        for (int c = 1; c < g; ++c)
          mx = std::max(mx, out.data[static_cast<size_t>((grp * g + c)) * HW + px]);
        T denom = T(0);
        for (int c = 0; c < g; ++c) {
          size_t idx = static_cast<size_t>(grp * g + c) * HW + px;
          out.data[idx] = std::exp(out.data[idx] - mx);
          denom += out.data[idx];
        }
        for (int c = 0; c < g; ++c) out.data[static_cast<size_t>(grp * g + c) * HW + px] /= denom;
      }
    return push(std::move(out), needs(a), [this, a, g, C, H, W](int o) {
      if (!needs(a)) return;
      const Tsr& gr = grad(o);
      const Tsr& s = val(o);
      Tsr& ga = mutable_grad(a);
      int HW = H * W;
      for (int grp = 0; grp < C / g; ++grp)
        for (int px = 0; px < HW; ++px) {
          T dot = T(0);
          for (int c = 0; c < g; ++c) {
            size_t idx = static_cast<size_t>(grp * g + c) * HW + px;
            dot += gr.data[idx] * s.data[idx];
          }
          for (int c = 0; c < g; ++c) {
            size_t idx = static_cast<size_t>(grp * g + c) * HW + px;
            ga.data[idx] += s.data[idx] * (gr.data[idx] - dot);
          }
        }
    });
  }

  // ---- stereo-specific ----

  // fL,fR: [C,H,W] -> volume [H,W,dmax+1]; entries with j-d<0 are 0.
  int corr_volume(int fl, int fr, int dmax) {
    const Tsr &vl = val(fl), &vr = val(fr);
    require(vl.same_shape(vr) && vl.shape.size() == 3, "corr_volume: bad shapes");
    int C = vl.shape[0], H = vl.shape[1], W = vl.shape[2];
    require(dmax < W, "corr_volume: d_max >= W");
    int D = dmax + 1;
    Tsr out({H, W, D});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        for (int d = 0; d <= std::min(dmax, j); ++d) {
          T acc = T(0);
          for (int c = 0; c < C; ++c) acc += vl.at(c, i, j) * vr.at(c, i, j - d);
          out.data[(static_cast<size_t>(i) * W + j) * D + d] = acc;
        }
    return push(std::move(out), needs(fl) || needs(fr), [this, fl, fr, dmax, C, H, W](int o) {
      const Tsr& g = grad(o);
      const Tsr &vl2 = val(fl), &vr2 = val(fr);
      int D = dmax + 1;
      bool nl = needs(fl), nr = needs(fr);
      Tsr* gl = nl ? &mutable_grad(fl) : nullptr;
      Tsr* gr = nr ? &mutable_grad(fr) : nullptr;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          for (int d = 0; d <= std::min(dmax, j); ++d) {
            T gv = g.data[(static_cast<size_t>(i) * W + j) * D + d];
            if (gv == T(0)) continue;
            for (int c = 0; c < C; ++c) {
              if (gl) gl->at(c, i, j) += gv * vr2.at(c, i, j - d);
              if (gr) gr->at(c, i, j - d) += gv * vl2.at(c, i, j);
            }
          }
    });
  }

  // mean-pool pairs along the last (disparity) axis: [H,W,D] -> [H,W,D/2]
  int pool_disparity2(int a) {
    const Tsr& va = val(a);
    require(va.shape.size() == 3 && va.shape[2] % 2 == 0, "pool_disparity2: bad shape");
    int H = va.shape[0], W = va.shape[1], D = va.shape[2];
    Tsr out = Tsr::uninit({H, W, D / 2});
    for (int i = 0; i < H * W; ++i)
      for (int d = 0; d < D / 2; ++d)
        out.data[static_cast<size_t>(i) * (D / 2) + d] =
            (va.data[static_cast<size_t>(i) * D + 2 * d] +
             va.data[static_cast<size_t>(i) * D + 2 * d + 1]) /
            T(2);
    return push(std::move(out), needs(a), [this, a, H, W, D](int o) {
      if (!needs(a)) return;
      const Tsr& g = grad(o);
      Tsr& ga = mutable_grad(a);
      for (int i = 0; i < H * W; ++i)
        for (int d = 0; d < D / 2; ++d) {
          T gv = g.data[static_cast<size_t>(i) * (D / 2) + d] / T(2);
          ga.data[static_cast<size_t>(i) * D + 2 * d] += gv;
          ga.data[static_cast<size_t>(i) * D + 2 * d + 1] += gv;
        }
    });
  }

  // Sample a pyramid level along the disparity axis at positions
  // disp*inv_scale + delta, delta in [-radius, radius], linear interpolation,
  // out-of-range positions contribute 0. vol: [H,W,D], disp: [1,H,W].
  int corr_lookup(int vol, int disp, T inv_scale, int radius) {
    const Tsr &vv = val(vol), &vd = val(disp);
    require(vv.shape.size() == 3 && vd.shape.size() == 3, "corr_lookup: bad shapes");
    int H = vv.shape[0], W = vv.shape[1], D = vv.shape[2];
    require(vd.shape[1] == H && vd.shape[2] == W, "corr_lookup: resolution mismatch");
    int K = 2 * radius + 1;
    Tsr out = Tsr::uninit({K, H, W});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        T base = vd.at(0, i, j) * inv_scale;
        for (int t = 0; t < K; ++t) {
          T pos = base + static_cast<T>(t - radius);
          T acc = T(0);
          int p0 = static_cast<int>(std::floor(pos));
          T fr = pos - static_cast<T>(p0);
          if (p0 >= 0 && p0 < D) acc += (T(1) - fr) * vv.data[(static_cast<size_t>(i) * W + j) * D + p0];
          if (p0 + 1 >= 0 && p0 + 1 < D) acc += fr * vv.data[(static_cast<size_t>(i) * W + j) * D + p0 + 1];
          out.at(t, i, j) = acc;
        }
      }
    return push(std::move(out), needs(vol) || needs(disp),
                [this, vol, disp, inv_scale, radius, H, W, D](int o) {
                  const Tsr& g = grad(o);
                  const Tsr &vv2 = val(vol), &vd2 = val(disp);
                  int K = 2 * radius + 1;
                  bool nv = needs(vol), nd = needs(disp);
                  Tsr* gv = nv ? &mutable_grad(vol) : nullptr;
                  Tsr* gd = nd ? &mutable_grad(disp) : nullptr;
                  for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                      T base = vd2.at(0, i, j) * inv_scale;
                      T dpos_acc = T(0);
                      for (int t = 0; t < K; ++t) {
                        T go = g.at(t, i, j);
                        if (go == T(0)) continue;
                        T pos = base + static_cast<T>(t - radius);
                        int p0 = static_cast<int>(std::floor(pos));
                        T fr = pos - static_cast<T>(p0);
                        T v0 = (p0 >= 0 && p0 < D)
                                   ? vv2.data[(static_cast<size_t>(i) * W + j) * D + p0]
                                   : T(0);
                        T v1 = (p0 + 1 >= 0 && p0 + 1 < D)
                                   ? vv2.data[(static_cast<size_t>(i) * W + j) * D + p0 + 1]
                                   : T(0);
                        if (gv) {
                          if (p0 >= 0 && p0 < D)
                            gv->data[(static_cast<size_t>(i) * W + j) * D + p0] += go * (T(1) - fr);
                          if (p0 + 1 >= 0 && p0 + 1 < D)
                            gv->data[(static_cast<size_t>(i) * W + j) * D + p0 + 1] += go * fr;
                        }
                        dpos_acc += go * (v1 - v0);
                      }
                      if (gd) gd->at(0, i, j) += dpos_acc * inv_scale;
                    }
                });
  }

  // Convex upsampling: every fine pixel is a convex combination of its 3x3
  // coarse neighborhood (border-replicated), scaled by the upsampling factor.
  // d: [1,H,W], mask: [9*f*f,H,W] softmax-normalized over the 9 weights.
  int convex_upsample(int d, int mask, int f) {
    const Tsr &vd = val(d), &vm = val(mask);
    int H = vd.shape[1], W = vd.shape[2];
    require(vm.shape[0] == 9 * f * f && vm.shape[1] == H && vm.shape[2] == W,
            "convex_upsample: mask shape mismatch");
    if (finite_checks) {
      for (int sp = 0; sp < f * f; ++sp)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            T s = T(0);
            for (int n = 0; n < 9; ++n) s += vm.at(sp * 9 + n, i, j);
            require(std::fabs(static_cast<double>(s) - 1.0) < 1e-3,
                    "convex_upsample: mask not normalized");
          }
    }
    Tsr out = Tsr::uninit({1, f * H, f * W});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        for (int a = 0; a < f; ++a)
          for (int b = 0; b < f; ++b) {
            int sp = a * f + b;
            T acc = T(0);
            for (int n = 0; n < 9; ++n) {
              int ni = std::clamp(i + n / 3 - 1, 0, H - 1);
              int nj = std::clamp(j + n % 3 - 1, 0, W - 1);
              acc += vm.at(sp * 9 + n, i, j) * vd.at(0, ni, nj);
            }
            out.at(0, i * f + a, j * f + b) = acc * static_cast<T>(f);
          }
    return push(std::move(out), needs(d) || needs(mask), [this, d, mask, f, H, W](int o) {
      const Tsr& g = grad(o);
      const Tsr &vd2 = val(d), &vm2 = val(mask);
      bool ndp = needs(d), nm = needs(mask);
      Tsr* gd = ndp ? &mutable_grad(d) : nullptr;
      Tsr* gm = nm ? &mutable_grad(mask) : nullptr;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          for (int a = 0; a < f; ++a)
            for (int b = 0; b < f; ++b) {
              int sp = a * f + b;
              T go = g.at(0, i * f + a, j * f + b) * static_cast<T>(f);
              if (go == T(0)) continue;
              for (int n = 0; n < 9; ++n) {
                int ni = std::clamp(i + n / 3 - 1, 0, H - 1);
                int nj = std::clamp(j + n % 3 - 1, 0, W - 1);
                if (gd) gd->at(0, ni, nj) += go * vm2.at(sp * 9 + n, i, j);
                if (gm) gm->at(sp * 9 + n, i, j) += go * vd2.at(0, ni, nj);
              }
            }
    });
  }

  // ---- backward ----

  void backward(int root) {
    require(val(root).numel() == 1, "backward: root must be scalar");
    require(needs(root), "backward: root does not depend on any trainable leaf");
    for (int i = 0; i <= root; ++i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.needs) {
        n.grad = Tsr(n.value.shape);
      }
    }
    nodes_[static_cast<size_t>(root)].grad.data[0] = T(1);
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.needs && n.back) n.back(i);
    }
  }

 private:
  struct Node {
    Tsr value;
    Tsr grad;
    bool needs = false;
    std::function<void(int)> back;  // argument: own node id
  };
  std::vector<Node> nodes_;

  int push(Tsr v, bool needs_grad, std::function<void(int)> back) {
    if (finite_checks && !v.all_finite())
      throw std::runtime_error("tape: non-finite value produced");
    Node n;
    n.value = std::move(v);
    n.needs = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tsr& mutable_grad(int id) { return nodes_[static_cast<size_t>(id)].grad; }

  void accumulate(int id, const T* g, int64_t n) {
    if (!needs(id)) return;
    Tsr& dst = mutable_grad(id);
    for (int64_t i = 0; i < n; ++i) dst.data[static_cast<size_t>(i)] += g[i];
  }

  static void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
  }

  static Tsr box3(const Tsr& a, int C, int H, int W) {
    Tsr out = Tsr::uninit({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          T acc = T(0);
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx2 = -1; dx2 <= 1; ++dx2) {
              int y = i + dy, x = j + dx2;
              if (y >= 0 && y < H && x >= 0 && x < W) acc += a.at(c, y, x);
            }
          out.at(c, i, j) = acc / T(9);
        }
    return out;
  }

  static void im2col(const Tsr& x, int k, int stride, int pad, int Ho, int Wo,
                     std::vector<T>& col) {
    int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    col.assign(static_cast<size_t>(C * k * k) * Ho * Wo, T(0));
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* dst = col.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* src = x.data.data() + (static_cast<size_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < W) dst[oy * Wo + ox] = src[ix];
            }
          }
        }
  }

  static void col2im_accum(const std::vector<T, UninitAlloc<T>>& col, int k, int stride, int pad, int C, int H,
                           int W, int Ho, int Wo, Tsr& gx) {
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* src = col.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            T* dst = gx.data.data() + (static_cast<size_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
            }
          }
        }
  }
};

using TapeD = Tape<double>;
using TapeF = Tape<float>;

}  // namespace sa
