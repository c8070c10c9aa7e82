#pragma once

#include <stdexcept>
#include <string>

#include "sa/params.hpp"
#include "sa/rng.hpp"
#include "sa/tape.hpp"
#include "sa/tensor.hpp"

namespace sa {

// Dynamic low-rank adaptation of a frozen weight matrix W0 [d x k]:
//   W = W0 + sum_i w_i * outer(B[:,i], A[i,:])
// with learnable per-component importance weights w, pruned during training
// by an l1 proximal step with a ramped threshold, then merged into W0.
template <typename T>
struct LoraAdapter {
  TensorT<T> W0;  // frozen base, [d,k]
  TensorT<T> A;   // [r,k]
  TensorT<T> B;   // [d,r]
  TensorT<T> w;   // importance, [r]
  int rank = 0;
  T lambda_l1 = T(1e-4);
  T kappa_max = T(0.01);
  // schedule state
  int step_count = 0;
  int total_steps = 0;
  double dense_fraction = 0.45;

  LoraAdapter() = default;

  // B starts at zero so the update is exactly zero at initialization;
  // A ~ N(0, 0.02), w ~ U[0.5, 1.5].
  static LoraAdapter init(TensorT<T> base, int r, Rng& rng) {
    LoraAdapter ad;
    ad.W0 = std::move(base);
    if (ad.W0.shape.size() != 2) throw std::invalid_argument("lora: W0 must be a matrix");
    int d = ad.W0.shape[0], k = ad.W0.shape[1];
    ad.rank = r;
    ad.A = TensorT<T>({r, k});
    for (auto& v : ad.A.data) v = static_cast<T>(rng.normal(0.0, 0.02));
    ad.B = TensorT<T>({d, r});
    ad.w = TensorT<T>({r});
    for (auto& v : ad.w.data) v = static_cast<T>(rng.uniform(0.5, 1.5));
    return ad;
  }

  static LoraAdapter frozen(TensorT<T> base) {
    LoraAdapter ad;
    ad.W0 = std::move(base);
    return ad;
  }

  bool active() const { return rank > 0; }
  int d() const { return W0.shape[0]; }
  int k() const { return W0.shape[1]; }

  void set_schedule(int total, double dense_frac) {
    if (total < 1) throw std::invalid_argument("lora: total_steps must be >= 1");
    total_steps = total;
    dense_fraction = dense_frac;
    step_count = 0;
  }

  bool in_sparse_stage() const {
    return total_steps > 0 && step_count >= static_cast<int>(dense_fraction * total_steps);
  }

  T current_kappa() const {
    int dense_steps = static_cast<int>(dense_fraction * total_steps);
    if (step_count < dense_steps) return T(0);
    int sparse_total = std::max(1, total_steps - dense_steps);
    double progress = std::min(1.0, static_cast<double>(step_count - dense_steps + 1) / sparse_total);
    T kappa = static_cast<T>(kappa_max * progress);
    if (kappa < T(0)) throw std::invalid_argument("lora: negative kappa");
    return kappa;
  }

  // Effective weight on the tape: W0 (no grad) + B diag(w) A.
  int weight_node(Tape<T>& tape, Binds<T>* binds = nullptr, bool trainable = true) const {
    int w0 = tape.leaf(W0, false);
    if (!active()) return w0;
    // reuse bound leaves so repeated uses accumulate into one gradient
    int an = binds ? binds->node_of(&A) : -1;
    int bn = binds ? binds->node_of(&B) : -1;
    int wn = binds ? binds->node_of(&w) : -1;
    if (an < 0) {
      an = tape.leaf(A, trainable);
      bn = tape.leaf(B, trainable);
      wn = tape.leaf(w, trainable);
      if (binds) {
        binds->bind(&A, an);
        binds->bind(&B, bn);
        binds->bind(&w, wn);
      }
    }
    int delta = tape.matmul(tape.scale_columns(bn, wn), an);
    return tape.add(w0, delta);
  }

  // h = W0 x + sum_i w_i B[:,i] (A[i,:] x);  x: [k] or [k,1]
  int forward(Tape<T>& tape, int x, Binds<T>* binds = nullptr) const {
    int xn = x;
    if (tape.val(x).shape.size() == 1) {
      TensorT<T> xm = tape.val(x);
      xm.shape = {static_cast<int>(xm.numel()), 1};
      xn = tape.leaf(xm, false);
    }
    if (tape.val(xn).shape[0] != k()) throw std::invalid_argument("lora: dimension mismatch");
    return tape.matmul(weight_node(tape, binds), xn);
  }

  TensorT<T> delta_matrix() const {
    TensorT<T> dm({d(), k()});
    if (!active()) return dm;
    for (int i = 0; i < d(); ++i)
      for (int j = 0; j < k(); ++j) {
        T acc = T(0);
        for (int c = 0; c < rank; ++c) acc += w.data[static_cast<size_t>(c)] * B.at(i, c) * A.at(c, j);
        dm.at(i, j) = acc;
      }
    return dm;
  }

  TensorT<T> apply(const TensorT<T>& x) const {  // convenience dense forward, [k] -> [d]
    TensorT<T> out({d()});
    TensorT<T> dm = delta_matrix();
    for (int i = 0; i < d(); ++i) {
      T acc = T(0);
      for (int j = 0; j < k(); ++j)
        acc += (W0.at(i, j) + dm.at(i, j)) * x.data[static_cast<size_t>(j)];
      out.data[static_cast<size_t>(i)] = acc;
    }
    return out;
  }

  // Gradient step on w followed by soft-thresholding (the proximal operator
  // of the l1 penalty). The paper's written rule expands magnitudes by kappa;
  // standard shrinkage is used here instead. During the dense stage no
  // thresholding is applied.
  void proximal_update(const TensorT<T>& grad_w, T lr) {
    if (total_steps <= 0) throw std::logic_error("lora: proximal_update before schedule init");
    if (grad_w.numel() != rank) throw std::invalid_argument("lora: grad_w size");
    T kappa = current_kappa();
    for (int i = 0; i < rank; ++i) {
      T what = w.data[static_cast<size_t>(i)] - lr * grad_w.data[static_cast<size_t>(i)];
      if (in_sparse_stage()) {
        T mag = std::fabs(what);
        w.data[static_cast<size_t>(i)] = mag > kappa ? (what > T(0) ? mag - kappa : kappa - mag) : T(0);
      } else {
        w.data[static_cast<size_t>(i)] = what;
      }
    }
    ++step_count;
  }

  int effective_rank() const {
    int n = 0;
    for (int i = 0; i < rank; ++i)
      if (w.data[static_cast<size_t>(i)] != T(0)) ++n;
    return n;
  }

  T l1_penalty() const {
    T s = T(0);
    for (int i = 0; i < rank; ++i) s += std::fabs(w.data[static_cast<size_t>(i)]);
    return lambda_l1 * s;
  }

  // Folds the surviving components into W0 and zeroes w. Returns false (and
  // leaves state untouched) when there is nothing to merge.
  bool merge() {
    if (!active()) return false;
    bool any = false;
    for (int i = 0; i < rank; ++i) any = any || w.data[static_cast<size_t>(i)] != T(0);
    if (!any) return false;
    TensorT<T> dm = delta_matrix();
    for (size_t i = 0; i < W0.data.size(); ++i) W0.data[i] += dm.data[i];
    std::fill(w.data.begin(), w.data.end(), T(0));
    return true;
  }

  // Re-arm with fresh random components on top of the (possibly merged) base.
  void reinit(Rng& rng) {
    if (!active()) return;
    for (auto& v : A.data) v = static_cast<T>(rng.normal(0.0, 0.02));
    std::fill(B.data.begin(), B.data.end(), T(0));
    for (auto& v : w.data) v = static_cast<T>(rng.uniform(0.5, 1.5));
    step_count = 0;
    total_steps = 0;
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".W0", &W0, false, false});
    if (!active()) return;
    out.push_back({prefix + ".lora.A", &A, true, false});
    out.push_back({prefix + ".lora.B", &B, true, false});
    out.push_back({prefix + ".lora.w", &w, true, true});
  }
};

}  // namespace sa
